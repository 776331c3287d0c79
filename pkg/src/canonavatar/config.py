"""Flat key = value configuration for the pipeline.

Every tunable default lives here: dataset sizes, sampling counts, network
widths, training schedule, and reconstruction resolution. Files are plain
``key = value`` lines with ``#`` comments; unknown keys are rejected and
every value is range-checked at load time. The desk-scale defaults run the
whole pipeline on a laptop CPU; ``paper_config()`` is the full-scale preset
(200 subjects, 512 px frames, 14756 + 1628 sample points, 190/10 split).
"""

from dataclasses import dataclass, fields, replace

from .net import NetConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    # dataset
    image_size: int = 128
    crop_margin: float = 0.1
    frames_per_subject: int = 6
    n_subjects: int = 20
    train_fraction: float = 0.9
    beta_min: float = 0.85
    beta_max: float = 1.2
    pose_range: float = 0.45
    root_rot_range: float = 0.3
    root_trans_range: float = 0.05
    garment_max: float = 0.05
    # point sampling
    n_surface: int = 4000
    n_uniform: int = 800
    sigma_surface: float = 0.05
    mesh_res: int = 64
    # network
    pe_frequencies: int = 6
    pixel_width: int = 8
    embed_widths: tuple = (64, 64)
    attention_dim: int = 16
    head_widths: tuple = (64,)
    fusion: str = "attention"
    occupancy_loss: str = "bce"
    lambda_skin: float = 0.5
    ohem_ratio: float = 0.5
    augment: bool = True
    # training
    lr: float = 1e-3
    batch_points: int = 2000
    steps: int = 3000
    log_interval: int = 100
    val_grid_res: int = 24
    # reconstruction
    grid_res: int = 64
    iso_level: float = 0.5
    seed: int = 0

    def __post_init__(self):
        _validate(self)

    def net_config(self) -> NetConfig:
        return NetConfig(
            pe_frequencies=self.pe_frequencies,
            pixel_width=self.pixel_width,
            embed_widths=tuple(self.embed_widths),
            attention_dim=self.attention_dim,
            head_widths=tuple(self.head_widths),
            fusion=self.fusion,
            occupancy_loss=self.occupancy_loss,
            lambda_skin=self.lambda_skin,
        )


_RANGES = {
    "image_size": lambda v: v >= 16,
    "crop_margin": lambda v: 0.0 <= v <= 1.0,
    "frames_per_subject": lambda v: v >= 1,
    "n_subjects": lambda v: v >= 2,
    "train_fraction": lambda v: 0.0 < v < 1.0,
    "beta_min": lambda v: 0.5 <= v <= 2.0,
    "beta_max": lambda v: 0.5 <= v <= 2.0,
    "pose_range": lambda v: 0.0 <= v <= 3.141592653589793,
    "root_rot_range": lambda v: 0.0 <= v <= 3.141592653589793,
    "root_trans_range": lambda v: 0.0 <= v <= 1.0,
    "garment_max": lambda v: 0.0 <= v <= 0.05,
    "n_surface": lambda v: v >= 0,
    "n_uniform": lambda v: v >= 0,
    "sigma_surface": lambda v: v >= 0.0,
    "mesh_res": lambda v: v >= 32,
    "pe_frequencies": lambda v: v >= 0,
    "pixel_width": lambda v: v >= 1,
    "embed_widths": lambda v: len(v) >= 1 and all(w >= 1 for w in v),
    "attention_dim": lambda v: v >= 1,
    "head_widths": lambda v: len(v) >= 1 and all(w >= 1 for w in v),
    "fusion": lambda v: v in ("average", "attention"),
    "occupancy_loss": lambda v: v in ("bce", "mse"),
    "lambda_skin": lambda v: v >= 0.0,
    "ohem_ratio": lambda v: 0.0 < v <= 1.0,
    "augment": lambda v: isinstance(v, bool),
    "lr": lambda v: v > 0.0,
    "batch_points": lambda v: v >= 1,
    "steps": lambda v: v >= 1,
    "log_interval": lambda v: v >= 1,
    "val_grid_res": lambda v: v >= 8,
    "grid_res": lambda v: v >= 16,
    "iso_level": lambda v: 0.0 < v < 1.0,
    "seed": lambda v: True,
}


def _validate(cfg: Config):
    for f in fields(Config):
        value = getattr(cfg, f.name)
        if not _RANGES[f.name](value):
            raise ConfigError(f"config value out of range: {f.name} = {value}")
    if cfg.beta_min >= cfg.beta_max:
        raise ConfigError("beta_min must be < beta_max")


def default_config() -> Config:
    """Desk-scale defaults (20 subjects, 128 px, 18/2 split)."""
    return Config()


def paper_config() -> Config:
    """Full-scale preset mirroring the challenge protocol sizes."""
    return Config(
        image_size=512,
        n_subjects=200,
        frames_per_subject=6,
        train_fraction=0.95,
        n_surface=14756,
        n_uniform=1628,
        batch_points=4096,
        steps=50000,
    )


_FIELD_TYPES = {f.name: (f.type if isinstance(f.type, str) else f.type.__name__)
                for f in fields(Config)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "tuple":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse config value: {key} = {raw}") from None


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse ``key = value`` lines over the given base (defaults if None)."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"malformed config line {lineno}: {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key: {key}")
        values[key] = _parse_value(key, val)
    return replace(base if base is not None else Config(), **values)


def serialize_config(cfg: Config) -> str:
    lines = []
    for f in fields(Config):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            rendered = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            rendered = "true" if value else "false"
        else:
            rendered = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{f.name} = {rendered}")
    return "\n".join(lines) + "\n"


def load_config(path) -> Config:
    with open(path) as fh:
        return parse_config(fh.read())


def save_config(path, cfg: Config):
    with open(path, "w") as fh:
        fh.write(serialize_config(cfg))

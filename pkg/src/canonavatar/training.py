"""Training loop: per-subject point pools, Adam, validation IoU logging.

Each training subject gets a fixed labeled point pool (near-surface +
uniform samples with occupancy/skinning/normal labels) and precomputed
pixel-aligned features for all of its frames; every step draws a
mini-batch from one subject, round-robin. All randomness flows from one
seeded generator, so single-threaded runs are bit-reproducible.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import recon
from .body import (build_capsule_body, build_skeleton, canonical_bounds,
                   canonical_mesh, load_body, occupancy_batch)
from .config import Config
from .geometry import KdIndex, grid_from_function, sample_surface
from .net import Adam, NetParams, init_params, loss_and_gradient, positional_encoding
from .synth import FrameObservation, color_jitter, load_frame, sample_points


class NumericalError(RuntimeError):
    """Raised when training diverges to a non-finite loss."""


@dataclass
class SubjectData:
    subject_id: str
    beta: object
    garment: object
    skeleton: object
    capsules: object
    frames: list
    surface_index: KdIndex
    points: np.ndarray
    occ_labels: np.ndarray
    skin_labels: np.ndarray
    normals: np.ndarray
    pe: np.ndarray
    feats: np.ndarray  # (P, N, C)


def load_subject(data_dir, entry, cfg: Config, augment: bool) -> SubjectData:
    """Build the training pool for one manifest subject."""
    data_dir = Path(data_dir)
    beta, garment, subject_seed = load_body(data_dir / entry["body"])
    skeleton = build_skeleton(beta)
    capsules = build_capsule_body(beta, garment)

    frames = [load_frame(data_dir, f, entry["id"]) for f in entry["frames"]]
    if augment:
        jittered = []
        for frame in frames:
            seed = np.random.SeedSequence([subject_seed, 77, frame.frame_id])
            image = color_jitter(frame.image, seed)
            jittered.append(FrameObservation(frame.subject_id, frame.frame_id,
                                             frame.camera, frame.pose, image))
        frames = jittered

    mesh = canonical_mesh(capsules, cfg.mesh_res)
    surface_index = KdIndex(sample_surface(
        mesh, recon.SURFACE_INDEX_SAMPLES,
        np.random.SeedSequence([subject_seed, 13])))
    batch = sample_points(capsules, cfg.n_surface, cfg.n_uniform,
                          cfg.sigma_surface, subject_seed, cfg.mesh_res, mesh=mesh)
    pe = positional_encoding(batch.points, cfg.pe_frequencies)
    feats = recon.subject_features(batch.points, frames, capsules, skeleton)
    return SubjectData(entry["id"], beta, garment, skeleton, capsules, frames,
                       surface_index, batch.points, batch.occ_labels,
                       batch.skin_labels, batch.normals, pe, feats)


def validation_iou(val_subjects, params: NetParams, net_config, cfg: Config) -> float:
    """Mean volumetric IoU against the analytic occupancy on coarse grids."""
    scores = []
    for sd in val_subjects:
        lo, hi = canonical_bounds(sd.capsules, expand=0.1)
        grid = grid_from_function(lambda pts: occupancy_batch(sd.capsules, pts),
                                  (cfg.val_grid_res,) * 3, lo, hi)
        nx, ny, nz = grid.resolution
        xs, ys, zs = grid.axes()
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        occ_pred, _ = recon.evaluate_points(pts, sd.frames, sd.capsules,
                                            sd.skeleton, sd.surface_index,
                                            params, net_config)
        scores.append(recon.volumetric_iou(occ_pred, grid.values))
    return float(np.mean(scores))


def train(manifest: dict, data_dir, cfg: Config, seed: int | None = None,
          log=None):
    """Train the predictor; returns (params, rows) with rows = (step, loss, iou)."""
    if seed is None:
        seed = cfg.seed
    net_config = cfg.net_config()
    train_entries = [s for s in manifest["subjects"] if s.get("split") == "train"]
    val_entries = [s for s in manifest["subjects"] if s.get("split") == "val"]
    if not train_entries:
        raise ValueError("empty train split")

    if log:
        log(f"building pools for {len(train_entries)} train / {len(val_entries)} val subjects")
    train_data = [load_subject(data_dir, e, cfg, cfg.augment) for e in train_entries]
    val_data = [load_subject(data_dir, e, cfg, augment=False) for e in val_entries]

    params = init_params(net_config, seed)
    adam = Adam(params.vector.size, lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 424242]))

    rows = []
    window = []
    for step in range(1, cfg.steps + 1):
        sd = train_data[(step - 1) % len(train_data)]
        idx = rng.integers(0, len(sd.points), cfg.batch_points)
        total, grads, _ = loss_and_gradient(
            sd.pe[idx], sd.normals[idx], sd.feats[idx],
            sd.occ_labels[idx], sd.skin_labels[idx],
            params, net_config, cfg.ohem_ratio)
        if not np.isfinite(total):
            raise NumericalError(f"non-finite loss at step {step} "
                                 f"(subject {sd.subject_id})")
        params.vector[:] = adam.step(params.vector, grads.vector)
        window.append(total)
        if step % cfg.log_interval == 0 or step == cfg.steps:
            iou = (validation_iou(val_data, params, net_config, cfg)
                   if val_data else float("nan"))
            rows.append((step, float(np.mean(window)), iou))
            window = []
            if log:
                log(f"step {step}: loss {rows[-1][1]:.4f} val_iou {iou:.4f}")
    return params, rows


def run_ablation(manifest: dict, data_dir, cfg: Config, log=None):
    """Cumulative ablation: baseline, +PE, +Att, +DA, +HM.

    The baseline disables positional encoding, attention fusion, data
    augmentation, and hard-example mining; each row switches one of them
    back on, on top of the previous row. Every row trains from scratch and
    reports the mean validation chamfer (ground-truth poses and shape, so
    the rows isolate the network components).
    """
    from dataclasses import replace

    base = replace(cfg, pe_frequencies=0, fusion="average", augment=False,
                   ohem_ratio=1.0)
    stages = [
        ("baseline", base),
        ("+PE", replace(base, pe_frequencies=cfg.pe_frequencies)),
        ("+Att", replace(base, pe_frequencies=cfg.pe_frequencies,
                         fusion="attention")),
        ("+DA", replace(base, pe_frequencies=cfg.pe_frequencies,
                        fusion="attention", augment=True)),
        ("+HM", replace(base, pe_frequencies=cfg.pe_frequencies,
                        fusion="attention", augment=True,
                        ohem_ratio=cfg.ohem_ratio)),
    ]

    val_entries = [s for s in manifest["subjects"] if s.get("split") == "val"]
    if not val_entries:
        raise ValueError("ablation needs a validation split")
    data_dir = Path(data_dir)

    rows = []
    for label, row_cfg in stages:
        if log:
            log(f"ablation row {label}")
        params, _ = train(manifest, data_dir, row_cfg, seed=cfg.seed, log=None)
        chamfers = []
        for entry in val_entries:
            beta, garment, _ = load_body(data_dir / entry["body"])
            gt_body = build_capsule_body(beta, garment)
            frames = [load_frame(data_dir, f, entry["id"]) for f in entry["frames"]]
            request = recon.ReconstructionRequest(
                frames=frames, beta=beta, resolution=row_cfg.grid_res,
                iso=row_cfg.iso_level, params=params,
                config=row_cfg.net_config())
            _, report = recon.reconstruct(request, gt_body=gt_body)
            chamfers.append(report["chamfer"] if report["chamfer"] is not None
                            else float("inf"))
        rows.append({"label": label, "chamfer": float(np.mean(chamfers))})
        if log:
            log(f"ablation row {label}: chamfer {rows[-1]['chamfer']:.4f}")
    return rows


def write_loss_curve(path, rows):
    with open(path, "w") as fh:
        fh.write("step,loss,val_iou\n")
        for step, loss_v, iou in rows:
            fh.write(f"{step},{loss_v!r},{iou!r}\n")


def read_loss_curve(path):
    rows = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            step, loss_v, iou = line.strip().split(",")
            rows.append((int(step), float(loss_v), float(iou)))
    return rows

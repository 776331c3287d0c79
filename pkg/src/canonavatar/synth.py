"""Synthetic multi-frame dataset generation.

Each subject is a random capsule body observed by a few orthographic
cameras under random poses. A frame stores a 5-channel feature image
(silhouette, normalized depth, camera-frame normal xyz) produced by
ray-marching the posed capsules, then re-framed by a silhouette-centered
square crop. Frame tensors go to disk in a small binary format; poses,
cameras, and the split live in a JSON manifest.
"""

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .body import (CapsuleBody, GarmentParams, PoseParams, ShapeParams, Skeleton,
                   build_capsule_body, build_skeleton, canonical_bounds,
                   canonical_mesh, normal_batch, occupancy_batch, pose_capsules,
                   save_body, skin_weights_batch)
from .geometry import KdIndex, sample_surface

FRAME_MAGIC = b"AVF1"
N_CHANNELS = 5
RENDER_STEP_FACTOR = 0.25
FIT_MARGIN = 0.90  # fraction of the image the posed body is fitted into


# ---------------------------------------------------------------------------
# Camera
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Camera:
    """Orthographic camera: azimuth/elevation rotation, texel scale, center.

    ``center`` is the world point that projects to the image center; ``wpp``
    is world units per pixel. Texel coordinates place integer (u, v) at
    texel centers, u rightward, v downward.
    """

    azimuth: float
    elevation: float
    width: int
    height: int
    wpp: float
    center: np.ndarray

    def __post_init__(self):
        if self.wpp <= 0:
            raise ValueError("camera scale must be positive")
        c = np.ascontiguousarray(np.asarray(self.center, dtype=np.float64).reshape(3))
        c.setflags(write=False)
        object.__setattr__(self, "center", c)

    def basis(self):
        """(right, up, view) unit vectors; view points into the scene."""
        ca, sa = math.cos(self.azimuth), math.sin(self.azimuth)
        ce, se = math.cos(self.elevation), math.sin(self.elevation)
        d = np.array([ce * sa, se, ce * ca])  # scene center -> camera
        right = np.array([ca, 0.0, -sa])
        up = np.array([-se * sa, ce, -se * ca])
        return right, up, -d

    def project(self, points):
        """World points (P, 3) -> continuous texel coordinates (P, 2)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        right, up, _ = self.basis()
        rel = points - self.center
        u = (self.width - 1) * 0.5 + (rel @ right) / self.wpp
        v = (self.height - 1) * 0.5 - (rel @ up) / self.wpp
        return np.stack([u, v], axis=1)

    def to_json(self):
        return {
            "azimuth": float(self.azimuth),
            "elevation": float(self.elevation),
            "width": int(self.width),
            "height": int(self.height),
            "wpp": float(self.wpp),
            "center": [float(x) for x in self.center],
        }

    @classmethod
    def from_json(cls, doc):
        return cls(doc["azimuth"], doc["elevation"], doc["width"], doc["height"],
                   doc["wpp"], np.asarray(doc["center"], dtype=np.float64))


@dataclass(frozen=True)
class FrameObservation:
    subject_id: str
    frame_id: int
    camera: Camera
    pose: PoseParams
    image: np.ndarray  # (H, W, 5) float64, channel-last

    def __post_init__(self):
        img = np.ascontiguousarray(np.asarray(self.image, dtype=np.float64))
        img.setflags(write=False)
        object.__setattr__(self, "image", img)


@dataclass(frozen=True)
class SampleBatch:
    points: np.ndarray       # (P, 3)
    occ_labels: np.ndarray   # (P,)
    skin_labels: np.ndarray  # (P, J)
    normals: np.ndarray      # (P, 3)

    def __len__(self):
        return len(self.points)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_frame(body: CapsuleBody, skeleton: Skeleton, pose: PoseParams,
                 camera: Camera, subject_id: str = "", frame_id: int = 0) -> FrameObservation:
    """Ray-march the rigidly posed capsules through an orthographic camera."""
    posed = pose_capsules(body, skeleton, pose)
    right, up, view = camera.basis()

    rmax = posed.radius + posed.bump_amp
    rel_a = posed.seg_a - camera.center
    rel_b = posed.seg_b - camera.center
    xs = np.concatenate([rel_a @ right - rmax, rel_a @ right + rmax,
                         rel_b @ right - rmax, rel_b @ right + rmax])
    ys = np.concatenate([rel_a @ up - rmax, rel_a @ up + rmax,
                         rel_b @ up - rmax, rel_b @ up + rmax])
    u_lo = (camera.width - 1) * 0.5 + xs.min() / camera.wpp
    u_hi = (camera.width - 1) * 0.5 + xs.max() / camera.wpp
    v_lo = (camera.height - 1) * 0.5 - ys.max() / camera.wpp
    v_hi = (camera.height - 1) * 0.5 - ys.min() / camera.wpp
    if u_hi < 0 or u_lo > camera.width - 1 or v_hi < 0 or v_lo > camera.height - 1:
        raise ValueError("subject out of frame")

    step_h = RENDER_STEP_FACTOR * float(np.min(posed.radius - posed.bump_amp))
    image = kernels.render(camera.width, camera.height, right, up, view,
                           camera.center, camera.wpp, posed.seg_a, posed.seg_b,
                           posed.radius, posed.bump_amp, float(posed.bump_freq),
                           step_h)
    return FrameObservation(subject_id, frame_id, camera, pose, image)


def fit_camera(body: CapsuleBody, skeleton: Skeleton, pose: PoseParams,
               azimuth: float, elevation: float, width: int, height: int) -> Camera:
    """Center and scale the camera so the posed body fills FIT_MARGIN of it."""
    posed = pose_capsules(body, skeleton, pose)
    r = (posed.radius + posed.bump_amp)[:, None]
    lo = np.minimum(posed.seg_a - r, posed.seg_b - r).min(axis=0)
    hi = np.maximum(posed.seg_a + r, posed.seg_b + r).max(axis=0)
    center = 0.5 * (lo + hi)
    probe = Camera(azimuth, elevation, width, height, 1.0, center)
    right, up, _ = probe.basis()
    pts = np.concatenate([posed.seg_a, posed.seg_b])
    rel = pts - center
    rad = np.concatenate([posed.radius + posed.bump_amp] * 2)
    ext_x = 2.0 * (np.abs(rel @ right) + rad).max()
    ext_y = 2.0 * (np.abs(rel @ up) + rad).max()
    wpp = max(ext_x / (FIT_MARGIN * (width - 1)), ext_y / (FIT_MARGIN * (height - 1)))
    return Camera(azimuth, elevation, width, height, wpp, center)


# ---------------------------------------------------------------------------
# Cropping
# ---------------------------------------------------------------------------

def bilinear_grid_sample(image, uv):
    """Bilinear lookup of (P, 2) texel coords; zero outside [0,W-1]x[0,H-1]."""
    h, w = image.shape[:2]
    u = uv[:, 0]
    v = uv[:, 1]
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.clip(u, 0, w - 1)
    vc = np.clip(v, 0, h - 1)
    x0 = np.minimum(np.floor(uc).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(vc).astype(np.int64), h - 2)
    fx = uc - x0
    fy = vc - y0
    img = image.reshape(h, w, -1)
    c00 = img[y0, x0]
    c10 = img[y0, x0 + 1]
    c01 = img[y0 + 1, x0]
    c11 = img[y0 + 1, x0 + 1]
    top = c00 + fx[:, None] * (c10 - c00)
    bot = c01 + fx[:, None] * (c11 - c01)
    out = top + fy[:, None] * (bot - top)
    out[~inside] = 0.0
    return out


def crop_center_transform(image, margin: float = 0.1, out_size: int | None = None):
    """Silhouette-centered square crop; returns (image, scale, cx, cy).

    ``scale`` is source pixels per output pixel; (cx, cy) is the source-image
    silhouette bbox center, which maps exactly to the output center.
    """
    sil = image[:, :, 0] >= 0.5
    if not sil.any():
        raise ValueError("no foreground")
    rows = np.nonzero(sil.any(axis=1))[0]
    cols = np.nonzero(sil.any(axis=0))[0]
    y0, y1 = rows[0], rows[-1]
    x0, x1 = cols[0], cols[-1]
    cy = 0.5 * (y0 + y1)
    cx = 0.5 * (x0 + x1)
    side = max(x1 - x0 + 1, y1 - y0 + 1) * (1.0 + 2.0 * margin)
    s = out_size if out_size is not None else max(image.shape[0], image.shape[1])
    scale = side / s
    offs = (np.arange(s) - (s - 1) * 0.5) * scale
    uu, vv = np.meshgrid(cx + offs, cy + offs)  # vv rows, uu cols
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    out = bilinear_grid_sample(image, uv).reshape(s, s, image.shape[2])
    out_sil = (out[:, :, 0] >= 0.5).astype(np.float64)
    out[out_sil == 0.0] = 0.0
    out[:, :, 0] = out_sil
    np.clip(out[:, :, 1], 0.0, 1.0, out=out[:, :, 1])
    np.clip(out[:, :, 2:], -1.0, 1.0, out=out[:, :, 2:])
    return out, scale, cx, cy


def crop_center(image, margin: float = 0.1, out_size: int | None = None):
    """Square crop around the silhouette bbox, resampled to out_size."""
    return crop_center_transform(image, margin, out_size)[0]


def cropped_camera(camera: Camera, scale: float, cx: float, cy: float,
                   out_size: int) -> Camera:
    """Camera equivalent to observing the cropped/rescaled image."""
    right, up, _ = camera.basis()
    dx = (cx - (camera.width - 1) * 0.5) * camera.wpp
    dy = ((camera.height - 1) * 0.5 - cy) * camera.wpp
    center = camera.center + dx * right + dy * up
    return Camera(camera.azimuth, camera.elevation, out_size, out_size,
                  camera.wpp * scale, center)


# ---------------------------------------------------------------------------
# Color jitter over the normal channels
# ---------------------------------------------------------------------------

def _rgb_to_hsv(rgb):
    r, g, b = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    cmax = rgb.max(axis=1)
    cmin = rgb.min(axis=1)
    delta = cmax - cmin
    h = np.zeros_like(cmax)
    nz = delta > 0
    rm = nz & (cmax == r)
    gm = nz & (cmax == g) & ~rm
    bm = nz & ~rm & ~gm
    h[rm] = (((g - b)[rm] / delta[rm]) / 6.0) % 1.0
    h[gm] = (((b - r)[gm] / delta[gm]) + 2.0) / 6.0
    h[bm] = (((r - g)[bm] / delta[bm]) + 4.0) / 6.0
    s = np.where(cmax > 0, delta / np.maximum(cmax, 1e-300), 0.0)
    return np.stack([h, s, cmax], axis=1)


def _hsv_to_rgb(hsv):
    h, s, v = hsv[:, 0], hsv[:, 1], hsv[:, 2]
    i = np.floor(h * 6.0).astype(np.int64) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)
    rgb = np.empty((len(h), 3))
    for idx, (rr, gg, bb) in enumerate(((v, t, p), (q, v, p), (p, v, t),
                                        (p, q, v), (t, p, v), (v, p, q))):
        m = i == idx
        rgb[m, 0] = rr[m]
        rgb[m, 1] = gg[m]
        rgb[m, 2] = bb[m]
    return rgb


def apply_color_jitter(image, brightness: float, contrast: float,
                       saturation: float, hue_shift: float):
    """Jitter the normal channels of silhouette pixels, remapped via [0, 1].

    Identity factors leave the image bit-identical; silhouette, depth, and
    background pixels are never touched.
    """
    out = np.array(image)
    if brightness == 1.0 and contrast == 1.0 and saturation == 1.0 and hue_shift == 0.0:
        return out
    fg = image[:, :, 0] >= 0.5
    if not fg.any():
        return out
    rgb = (image[fg][:, 2:5] + 1.0) * 0.5
    if brightness != 1.0:
        rgb = rgb * brightness
    if contrast != 1.0:
        mean = rgb.mean(axis=0)
        rgb = mean + (rgb - mean) * contrast
    np.clip(rgb, 0.0, 1.0, out=rgb)
    if saturation != 1.0 or hue_shift != 0.0:
        hsv = _rgb_to_hsv(rgb)
        hsv[:, 0] = (hsv[:, 0] + hue_shift) % 1.0
        hsv[:, 1] = np.clip(hsv[:, 1] * saturation, 0.0, 1.0)
        rgb = _hsv_to_rgb(hsv)
        np.clip(rgb, 0.0, 1.0, out=rgb)
    patch = out[fg]
    patch[:, 2:5] = rgb * 2.0 - 1.0
    out[fg] = patch
    return out


def color_jitter(image, seed: int):
    """Seeded augmentation: brightness/contrast/saturation 0.8-1.2, hue 0.05."""
    rng = np.random.default_rng(seed)
    brightness = rng.uniform(0.8, 1.2)
    contrast = rng.uniform(0.8, 1.2)
    saturation = rng.uniform(0.8, 1.2)
    hue_shift = rng.uniform(-0.05, 0.05)
    return apply_color_jitter(image, brightness, contrast, saturation, hue_shift)


# ---------------------------------------------------------------------------
# Point sampling with labels
# ---------------------------------------------------------------------------

def sample_points(body: CapsuleBody, n_surface: int, n_uniform: int,
                  sigma: float = 0.05, seed: int = 0, mesh_res: int = 64,
                  mesh=None) -> SampleBatch:
    """Near-surface + uniform query points labeled by the analytic body."""
    if n_surface < 0 or n_uniform < 0 or (n_surface == 0 and n_uniform == 0):
        raise ValueError("need at least one sample")
    ss = np.random.SeedSequence(seed).spawn(4)
    if mesh is None:
        mesh = canonical_mesh(body, mesh_res)
    index_cloud = sample_surface(mesh, max(2048, min(n_surface, 8192)), ss[0])
    index = KdIndex(index_cloud)

    parts = []
    if n_surface > 0:
        surf = sample_surface(mesh, n_surface, ss[1])
        noise = np.random.default_rng(ss[2]).standard_normal((n_surface, 3))
        parts.append(surf.points + sigma * noise)
    if n_uniform > 0:
        lo, hi = canonical_bounds(body, expand=0.1)
        u = np.random.default_rng(ss[3]).random((n_uniform, 3))
        parts.append(lo + u * (hi - lo))
    points = np.concatenate(parts) if len(parts) > 1 else parts[0]

    occ = occupancy_batch(body, points)
    skin = skin_weights_batch(body, points)
    normals = normal_batch(index, points, k=4)
    return SampleBatch(points, occ, skin, normals)


# ---------------------------------------------------------------------------
# Frame tensor file format
# ---------------------------------------------------------------------------

def write_frame_tensor(path, image):
    """AVF1: magic, u32 LE W/H/C, then f32 LE scalars, rows outermost."""
    image = np.asarray(image, dtype=np.float64)
    h, w, c = image.shape
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC)
        fh.write(struct.pack("<III", w, h, c))
        fh.write(image.astype("<f4").tobytes())


def read_frame_tensor(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FRAME_MAGIC:
            raise ValueError(f"bad frame file magic in {path}")
        w, h, c = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(4 * w * h * c), dtype="<f4")
        if data.size != w * h * c:
            raise ValueError(f"truncated frame file {path}")
    return data.reshape(h, w, c).astype(np.float64)


# ---------------------------------------------------------------------------
# Dataset generation and split
# ---------------------------------------------------------------------------

def generate_dataset(n_subjects: int, frames_per_subject: int, seed: int, out_dir,
                     image_size: int = 128, beta_range=(0.85, 1.2),
                     pose_range: float = 0.45, root_rot_range: float = 0.3,
                     root_trans_range: float = 0.05, garment_amp_max: float = 0.05,
                     crop_margin: float = 0.1, elevation_max_deg: float = 15.0):
    """Render all subjects/frames and return the manifest (not yet split)."""
    from pathlib import Path

    if n_subjects < 2:
        raise ValueError("need >= 2 subjects")
    if frames_per_subject < 1:
        raise ValueError("need >= 1 frame per subject")
    out_dir = Path(out_dir)
    subjects = []
    for sidx in range(n_subjects):
        rng = np.random.default_rng(np.random.SeedSequence([seed, sidx]))
        beta = ShapeParams.from_array(rng.uniform(beta_range[0], beta_range[1], 4))
        garment = GarmentParams(rng.uniform(0.0, garment_amp_max),
                                int(rng.choice(np.array([2, 3, 4]))))
        subject_seed = int(rng.integers(2 ** 31))
        sid = f"s{sidx:03d}"
        sdir = out_dir / "subjects" / sid
        (sdir / "frames").mkdir(parents=True, exist_ok=True)
        save_body(sdir / "body.json", beta, garment, subject_seed)

        skeleton = build_skeleton(beta)
        capsules = build_capsule_body(beta, garment)
        frames = []
        for fidx in range(frames_per_subject):
            pose = _random_pose(rng, pose_range, root_rot_range, root_trans_range)
            azimuth = rng.uniform(0.0, 2.0 * math.pi)
            elevation = rng.uniform(-1.0, 1.0) * math.radians(elevation_max_deg)
            camera = fit_camera(capsules, skeleton, pose, azimuth, elevation,
                                image_size, image_size)
            frame = render_frame(capsules, skeleton, pose, camera, sid, fidx)
            cropped, scale, cx, cy = crop_center_transform(frame.image, crop_margin,
                                                           image_size)
            cam2 = cropped_camera(camera, scale, cx, cy, image_size)
            rel_path = f"subjects/{sid}/frames/{fidx}.avf"
            write_frame_tensor(out_dir / rel_path, cropped)
            frames.append({
                "id": fidx,
                "path": rel_path,
                "pose": [float(x) for x in pose.to_vector()],
                "camera": cam2.to_json(),
            })
        subjects.append({
            "id": sid,
            "body": f"subjects/{sid}/body.json",
            "frames": frames,
        })
    return {
        "seed": int(seed),
        "image_size": int(image_size),
        "frames_per_subject": int(frames_per_subject),
        "subjects": subjects,
    }


def _random_pose(rng, pose_range, root_rot_range, root_trans_range):
    rots = np.empty((9, 3))
    for j in range(9):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(0.0, root_rot_range if j == 0 else pose_range)
        rots[j] = axis * angle
    trans = rng.uniform(-root_trans_range, root_trans_range, 3)
    return PoseParams(rots, trans)


def split_dataset(manifest: dict, train_fraction: float = 0.95, seed: int = 0) -> dict:
    """Tag each subject train/val by a seeded shuffle; ceil(f*n) go to train."""
    if not (0.0 < train_fraction < 1.0):
        raise ValueError("train fraction must lie in (0, 1)")
    subjects = manifest["subjects"]
    if len(subjects) < 2:
        raise ValueError("need >= 2 subjects")
    n_train = math.ceil(train_fraction * len(subjects))
    perm = np.random.default_rng(seed).permutation(len(subjects))
    train_ids = set(int(i) for i in perm[:n_train])
    out = dict(manifest)
    out["subjects"] = [dict(s, split=("train" if i in train_ids else "val"))
                       for i, s in enumerate(subjects)]
    return out


def save_manifest(path, manifest: dict):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def load_frame(data_dir, entry, subject_id: str) -> FrameObservation:
    """Materialize one manifest frame entry."""
    from pathlib import Path

    image = read_frame_tensor(Path(data_dir) / entry["path"])
    pose = PoseParams.from_vector(np.asarray(entry["pose"], dtype=np.float64))
    camera = Camera.from_json(entry["camera"])
    return FrameObservation(subject_id, int(entry["id"]), camera, pose, image)

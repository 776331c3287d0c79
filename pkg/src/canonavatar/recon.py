"""Inference: canonical occupancy grid evaluation and mesh extraction.

Grid points are warped into every frame with that frame's pose, projected
by the frame camera, and the sampled pixel-aligned features feed the
trained predictor. Grid bounds come from the (fitted) shape's canonical
bounding box expanded 10%, so inference never touches the ground truth;
the analytic body is consulted only when a chamfer score is requested.
An oracle mode replaces the network with the analytic occupancy, which
exercises the whole grid -> marching cubes -> OBJ -> chamfer pipeline.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import geometry
from .body import (CapsuleBody, ShapeParams, Skeleton, build_capsule_body,
                   build_skeleton, canonical_bounds, canonical_mesh,
                   normal_batch, occupancy_batch, warp_points)
from .net import NetConfig, NetParams, bilinear_sample_batch, forward_batch, positional_encoding

EVAL_CHUNK = 16384
GT_MESH_RESOLUTION = 96
SURFACE_INDEX_SAMPLES = 4096


@dataclass
class ReconstructionRequest:
    frames: list                  # FrameObservation, >= 1
    beta: ShapeParams
    resolution: int = 64
    iso: float = 0.5
    params: NetParams | None = None
    config: NetConfig | None = None
    oracle_body: CapsuleBody | None = None  # replaces the network when set

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("need >= 1 frame")
        if self.resolution < 16:
            raise ValueError("grid resolution must be >= 16")
        if self.oracle_body is None and self.params is None:
            raise ValueError("need trained parameters or an oracle body")


def subject_features(points, frames, capsules: CapsuleBody, skeleton: Skeleton):
    """Pixel-aligned features per frame: warp, project, bilinear sample."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    feats = np.empty((len(points), len(frames), frames[0].image.shape[2]))
    for i, frame in enumerate(frames):
        warped = warp_points(capsules, skeleton, frame.pose, points)
        uv = frame.camera.project(warped)
        feats[:, i, :] = bilinear_sample_batch(frame.image, uv)
    return feats


def evaluate_points(points, frames, capsules, skeleton, surface_index,
                    params: NetParams, config: NetConfig, chunk: int = EVAL_CHUNK):
    """Network occupancy and skinning at arbitrary canonical points."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    occ = np.empty(len(points))
    skin = np.empty((len(points), config.n_joints))
    for start in range(0, len(points), chunk):
        pts = points[start: start + chunk]
        pe = positional_encoding(pts, config.pe_frequencies)
        normals = normal_batch(surface_index, pts, k=4)
        feats = subject_features(pts, frames, capsules, skeleton)
        o, s, _ = forward_batch(pe, normals, feats, params, config)
        occ[start: start + chunk] = o
        skin[start: start + chunk] = s
    return occ, skin


def build_surface_index(capsules: CapsuleBody, mesh_res: int = 64,
                        n_samples: int = SURFACE_INDEX_SAMPLES, seed: int = 11):
    """Sampled canonical surface with normals, for normal interpolation."""
    mesh = canonical_mesh(capsules, mesh_res)
    return geometry.KdIndex(geometry.sample_surface(mesh, n_samples, seed))


def evaluate_grid(request: ReconstructionRequest) -> geometry.ScalarGrid:
    """Occupancy sampled over the canonical bbox of the fitted shape."""
    smooth = build_capsule_body(request.beta)
    warp_body = request.oracle_body if request.oracle_body is not None else smooth
    bounds_body = warp_body if request.oracle_body is not None else smooth
    lo, hi = canonical_bounds(bounds_body, expand=0.1)
    res = (request.resolution,) * 3

    if request.oracle_body is not None:
        return geometry.grid_from_function(
            lambda pts: occupancy_batch(request.oracle_body, pts), res, lo, hi)

    config = request.config
    if config is None:
        raise ValueError("need a network configuration")
    skeleton = build_skeleton(request.beta)
    surface_index = build_surface_index(smooth)

    def field(pts):
        occ, _ = evaluate_points(pts, request.frames, smooth, skeleton,
                                 surface_index, request.params, config)
        return occ

    return geometry.grid_from_function(field, res, lo, hi)


def reconstruct(request: ReconstructionRequest, out_obj=None,
                gt_body: CapsuleBody | None = None,
                gt_resolution: int = GT_MESH_RESOLUTION):
    """Extract the canonical mesh and report occupancy stats and chamfer."""
    t0 = time.perf_counter()
    grid = evaluate_grid(request)
    mesh = geometry.marching_cubes(grid, request.iso)
    occupied = float(np.mean(grid.values >= request.iso))

    chamfer = None
    if gt_body is not None and not mesh.is_empty:
        gt_mesh = canonical_mesh(gt_body, gt_resolution)
        chamfer = geometry.chamfer_between_meshes(mesh, gt_mesh)
    if out_obj is not None and not mesh.is_empty:
        geometry.mesh_io_write(out_obj, mesh)
    report = {
        "empty": bool(mesh.is_empty),
        "occupied_fraction": occupied,
        "chamfer": chamfer,
        "resolution": int(request.resolution),
        "voxel_size": grid.voxel_size,
        "mesh_path": None if (out_obj is None or mesh.is_empty) else str(out_obj),
        "seconds": time.perf_counter() - t0,
    }
    return mesh, report


def export_skinning(mesh: geometry.Mesh, request: ReconstructionRequest, out_csv):
    """Per-vertex skinning weights from the network, one CSV row per vertex."""
    if mesh.is_empty:
        raise ValueError("cannot export skinning for an empty mesh")
    smooth = build_capsule_body(request.beta)
    skeleton = build_skeleton(request.beta)
    surface_index = build_surface_index(smooth)
    _, skin = evaluate_points(mesh.vertices, request.frames, smooth, skeleton,
                              surface_index, request.params, request.config)
    with open(out_csv, "w") as fh:
        for row in skin:
            fh.write(",".join(repr(float(x)) for x in row))
            fh.write("\n")
    return skin


def read_skinning(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([[float(x) for x in line.split(",")]
                         for line in fh if line.strip()])


def volumetric_iou(occ_pred, occ_true, threshold: float = 0.5) -> float:
    """Intersection over union of thresholded occupancies."""
    a = np.asarray(occ_pred) >= threshold
    b = np.asarray(occ_true) >= threshold
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)

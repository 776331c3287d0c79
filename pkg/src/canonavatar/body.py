"""Simplified articulated capsule body.

A 9-joint skeleton (pelvis root, chest, head, paired upper arms / forearms /
legs) carries one capsule per non-root joint, spanning the segment from the
parent joint to the joint. Four shape scalars control the template:

* ``s0`` scales everything (offsets, radii, garment bump), so doubling it
  doubles the body exactly;
* ``s1`` scales limb lengths;
* ``r0`` scales torso/head girth and also widens the shoulder and hip
  attachment points so it is observable from joint positions alone;
* ``r1`` scales limb girth and the elbow offset, for the same reason.

The canonical pose (all rotations zero) is a T-pose with arms along +-x and
the body standing along y. A per-subject "garment" adds a sinusoidal bump to
every capsule radius profile; the amplitude is clamped per capsule so radii
stay positive.

Joint rotations pivot at the parent joint: the local transform is
rotate-then-offset, so e.g. the forearm capsule swings about the elbow.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import geometry, kernels

JOINT_NAMES = (
    "pelvis", "chest", "head",
    "l_upper_arm", "l_forearm", "r_upper_arm", "r_forearm",
    "l_leg", "r_leg",
)
PARENTS = (-1, 0, 1, 1, 3, 1, 5, 0, 0)
N_JOINTS = 9

# per joint: x_const, x_s1, x_r0, x_r1, y_const, y_s1 (offset = s0 * expr)
# girth factors r0/r1 also widen attachment points (shoulders/hips scale with
# the torso, the elbow offset with limb girth) so every shape component is
# observable from joint positions alone
_OFFSET_COEFS = np.array([
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.30, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.22, 0.0],
    [0.0, 0.12, 0.16, 0.0, 0.02, 0.0],
    [0.0, 0.16, 0.0, 0.14, 0.0, 0.0],
    [0.0, -0.12, -0.16, 0.0, 0.02, 0.0],
    [0.0, -0.16, 0.0, -0.14, 0.0, 0.0],
    [0.05, 0.0, 0.10, 0.0, 0.0, -0.50],
    [-0.05, 0.0, -0.10, 0.0, 0.0, -0.50],
])

# capsule base radius = s0 * (c_r0 * r0 + c_r1 * r1), one capsule per joint 1..8
_RADIUS_COEFS = np.array([
    [0.13, 0.0],    # torso (pelvis-chest)
    [0.085, 0.0],   # head
    [0.0, 0.055],   # upper arms
    [0.0, 0.045],   # forearms
    [0.0, 0.055],
    [0.0, 0.045],
    [0.0, 0.075],   # legs
    [0.0, 0.075],
])

SKIN_SIGMA = 0.08   # Gaussian kernel width of the skinning weights
SKIN_K_NEAR = 3     # capsules kept per query point


@dataclass(frozen=True)
class ShapeParams:
    """Shape vector (s0, s1, r0, r1); each a factor in [0.5, 2.0]."""

    s0: float = 1.0
    s1: float = 1.0
    r0: float = 1.0
    r1: float = 1.0

    def __post_init__(self):
        for name, v in zip(("s0", "s1", "r0", "r1"), self.as_array()):
            if not (0.5 <= v <= 2.0):
                raise ValueError(f"shape parameter {name}={v} outside [0.5, 2.0]")

    def as_array(self):
        return np.array([self.s0, self.s1, self.r0, self.r1], dtype=np.float64)

    @classmethod
    def from_array(cls, arr):
        return cls(*(float(x) for x in np.asarray(arr, dtype=np.float64).reshape(4)))


@dataclass(frozen=True)
class GarmentParams:
    """Sinusoidal radius bump: amplitude (body heights) and integer frequency."""

    amp: float = 0.0
    freq: int = 2

    def __post_init__(self):
        if not (0.0 <= self.amp <= 0.05):
            raise ValueError("garment amplitude must lie in [0, 0.05]")
        if int(self.freq) not in (2, 3, 4):
            raise ValueError("garment frequency must be one of 2, 3, 4")
        object.__setattr__(self, "freq", int(self.freq))


@dataclass(frozen=True)
class Skeleton:
    """Topology plus shape-scaled rest offsets (parent-relative)."""

    parents: tuple
    offsets: np.ndarray  # (J, 3)

    def __post_init__(self):
        offs = np.ascontiguousarray(np.asarray(self.offsets, dtype=np.float64))
        offs.setflags(write=False)
        object.__setattr__(self, "offsets", offs)
        roots = [i for i, p in enumerate(self.parents) if p < 0]
        if roots != [0]:
            raise ValueError("skeleton must have exactly one root at index 0")
        for child, parent in enumerate(self.parents):
            if parent >= child and child > 0:
                raise ValueError("parents must precede children")
        if not np.all(np.isfinite(self.offsets)):
            raise ValueError("offsets must be finite")

    @property
    def n_joints(self):
        return len(self.parents)


@dataclass(frozen=True)
class PoseParams:
    """Axis-angle rotation per joint plus root translation (3J + 3 scalars)."""

    rotations: np.ndarray        # (J, 3)
    root_translation: np.ndarray  # (3,)

    def __post_init__(self):
        rot = np.ascontiguousarray(np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3))
        trans = np.ascontiguousarray(np.asarray(self.root_translation, dtype=np.float64).reshape(3))
        mags = np.linalg.norm(rot, axis=1)
        if np.any(mags > np.pi + 1e-9):
            raise ValueError("rotation magnitude exceeds pi")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "root_translation", trans)

    @classmethod
    def identity(cls, n_joints=N_JOINTS):
        return cls(np.zeros((n_joints, 3)), np.zeros(3))

    def to_vector(self):
        return np.concatenate([self.rotations.ravel(), self.root_translation])

    @classmethod
    def from_vector(cls, vec, n_joints=N_JOINTS):
        vec = np.asarray(vec, dtype=np.float64).reshape(3 * n_joints + 3)
        return cls(vec[: 3 * n_joints].reshape(n_joints, 3), vec[3 * n_joints:])


@dataclass(frozen=True)
class CapsuleBody:
    """Union of capsules; capsule k is bound to joint ``joint_of_capsule[k]``."""

    seg_a: np.ndarray   # (K, 3) parent-side endpoints, canonical space
    seg_b: np.ndarray   # (K, 3) joint-side endpoints
    radius: np.ndarray  # (K,)
    bump_amp: np.ndarray  # (K,)
    bump_freq: int
    joint_of_capsule: np.ndarray  # (K,) int
    n_joints: int

    def __post_init__(self):
        for name in ("seg_a", "seg_b", "radius", "bump_amp", "joint_of_capsule"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name)))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.radius <= 0):
            raise ValueError("capsule radii must be positive")
        if np.any(self.radius - np.abs(self.bump_amp) <= 0):
            raise ValueError("garment bump may not exceed the capsule radius")

    @property
    def n_capsules(self):
        return len(self.radius)

    def bounds(self):
        r = (self.radius + self.bump_amp)[:, None]
        lo = np.minimum(self.seg_a - r, self.seg_b - r).min(axis=0)
        hi = np.maximum(self.seg_a + r, self.seg_b + r).max(axis=0)
        return lo, hi


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def shape_offsets(beta: ShapeParams) -> np.ndarray:
    s0, s1, r0, r1 = beta.as_array()
    c = _OFFSET_COEFS
    off = np.zeros((N_JOINTS, 3))
    off[:, 0] = s0 * (c[:, 0] + c[:, 1] * s1 + c[:, 2] * r0 + c[:, 3] * r1)
    off[:, 1] = s0 * (c[:, 4] + c[:, 5] * s1)
    return off


def shape_offset_jacobian(beta: ShapeParams) -> np.ndarray:
    """(J, 3, 4) derivative of every rest offset w.r.t. (s0, s1, r0, r1)."""
    s0, s1, r0, r1 = beta.as_array()
    c = _OFFSET_COEFS
    jac = np.zeros((N_JOINTS, 3, 4))
    jac[:, 0, 0] = c[:, 0] + c[:, 1] * s1 + c[:, 2] * r0 + c[:, 3] * r1
    jac[:, 1, 0] = c[:, 4] + c[:, 5] * s1
    jac[:, 0, 1] = s0 * c[:, 1]
    jac[:, 1, 1] = s0 * c[:, 5]
    jac[:, 0, 2] = s0 * c[:, 2]
    jac[:, 0, 3] = s0 * c[:, 3]
    return jac


def build_skeleton(beta: ShapeParams) -> Skeleton:
    return Skeleton(PARENTS, shape_offsets(beta))


def canonical_joints(skeleton: Skeleton) -> np.ndarray:
    """Joint positions in the canonical pose (cumulative offsets)."""
    pos = np.zeros((skeleton.n_joints, 3))
    for j in range(skeleton.n_joints):
        parent = skeleton.parents[j]
        pos[j] = skeleton.offsets[j] + (pos[parent] if parent >= 0 else 0.0)
    return pos


def build_capsule_body(beta: ShapeParams, garment: GarmentParams = GarmentParams()) -> CapsuleBody:
    skeleton = build_skeleton(beta)
    joints = canonical_joints(skeleton)
    s0 = beta.s0
    child = np.arange(1, N_JOINTS)
    parent = np.array(PARENTS[1:])
    radius = s0 * (_RADIUS_COEFS[:, 0] * beta.r0 + _RADIUS_COEFS[:, 1] * beta.r1)
    amp = np.minimum(garment.amp * s0, 0.5 * radius)
    return CapsuleBody(
        seg_a=joints[parent],
        seg_b=joints[child],
        radius=radius,
        bump_amp=amp,
        bump_freq=garment.freq,
        joint_of_capsule=child,
        n_joints=N_JOINTS,
    )


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

def rotation_from_axis_angle(v):
    """Rodrigues rotation matrix for an axis-angle 3-vector."""
    v = np.asarray(v, dtype=np.float64).reshape(3)
    angle = np.linalg.norm(v)
    kx, ky, kz = v
    k_cross = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    if angle < 1e-12:
        return np.eye(3) + k_cross
    s = np.sin(angle) / angle
    c = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + s * k_cross + c * (k_cross @ k_cross)


def forward_kinematics(skeleton: Skeleton, pose: PoseParams):
    """World transform per joint as (rotations (J,3,3), positions (J,3)).

    Local transforms rotate first, then translate by the rest offset, so the
    joint pivots about its parent; composing down the chain and evaluating at
    the local origin yields the joint's world position.
    """
    j_count = skeleton.n_joints
    rot_w = np.empty((j_count, 3, 3))
    pos_w = np.empty((j_count, 3))
    for j in range(j_count):
        r_local = rotation_from_axis_angle(pose.rotations[j])
        parent = skeleton.parents[j]
        if parent < 0:
            rot_w[j] = r_local
            pos_w[j] = rot_w[j] @ skeleton.offsets[j] + pose.root_translation
        else:
            rot_w[j] = rot_w[parent] @ r_local
            pos_w[j] = rot_w[j] @ skeleton.offsets[j] + pos_w[parent]
    return rot_w, pos_w


def deformation_transforms(skeleton: Skeleton, pose: PoseParams):
    """Canonical-to-posed rigid transform per joint: x -> R x + t."""
    rot_w, pos_w = forward_kinematics(skeleton, pose)
    canon = canonical_joints(skeleton)
    trans = pos_w - np.einsum("jab,jb->ja", rot_w, canon)
    return rot_w, trans


def pose_capsules(body: CapsuleBody, skeleton: Skeleton, pose: PoseParams) -> CapsuleBody:
    """Rigidly move each capsule with its joint frame."""
    rot, trans = deformation_transforms(skeleton, pose)
    j = body.joint_of_capsule
    seg_a = np.einsum("kab,kb->ka", rot[j], body.seg_a) + trans[j]
    seg_b = np.einsum("kab,kb->ka", rot[j], body.seg_b) + trans[j]
    return CapsuleBody(seg_a, seg_b, body.radius, body.bump_amp,
                       body.bump_freq, body.joint_of_capsule, body.n_joints)


# ---------------------------------------------------------------------------
# Field queries
# ---------------------------------------------------------------------------

def field_batch(body: CapsuleBody, points) -> np.ndarray:
    """Implicit field values; the body interior is <= 0."""
    return kernels.capsule_field(points, body.seg_a, body.seg_b,
                                 body.radius, body.bump_amp, body.bump_freq)


def occupancy_batch(body: CapsuleBody, points) -> np.ndarray:
    return (field_batch(body, points) <= 0.0).astype(np.float64)


def occupancy_at(body: CapsuleBody, p) -> float:
    return float(occupancy_batch(body, np.asarray(p, dtype=np.float64).reshape(1, 3))[0])


def skin_weights_batch(body: CapsuleBody, points) -> np.ndarray:
    """(P, J) joint weights from the truncated Gaussian capsule kernel."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dists = kernels.axis_distances(points, body.seg_a, body.seg_b)
    w_caps = kernels.skin_weights_from_distances(dists, SKIN_SIGMA, SKIN_K_NEAR)
    out = np.zeros((len(points), body.n_joints))
    out[:, body.joint_of_capsule] = w_caps
    return out


def skin_weights_at(body: CapsuleBody, p) -> np.ndarray:
    return skin_weights_batch(body, np.asarray(p).reshape(1, 3))[0]


def warp_points(body: CapsuleBody, skeleton: Skeleton, pose: PoseParams, points) -> np.ndarray:
    """Linear blend skinning of canonical points into the posed frame."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    weights = skin_weights_batch(body, points)
    rot, trans = deformation_transforms(skeleton, pose)
    return kernels.blend_transforms(points, weights, rot, trans)


def warp_point(body: CapsuleBody, skeleton: Skeleton, pose: PoseParams, p) -> np.ndarray:
    return warp_points(body, skeleton, pose, np.asarray(p).reshape(1, 3))[0]


def field_gradient(body: CapsuleBody, points, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the implicit field (surface normal dir)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    grad = np.empty_like(points)
    for axis in range(3):
        d = np.zeros(3)
        d[axis] = eps
        grad[:, axis] = field_batch(body, points + d) - field_batch(body, points - d)
    return grad


# ---------------------------------------------------------------------------
# Normals from a sampled surface
# ---------------------------------------------------------------------------

def normal_at(surface: geometry.KdIndex, p, k: int = 4) -> np.ndarray:
    """Inverse-distance-weighted average of the k nearest surface normals."""
    if surface.normals is None:
        raise ValueError("surface index has no normals")
    hits = geometry.knn_query(surface, p, k)
    idx0, d0 = hits[0]
    if d0 < 1e-9:
        return np.array(surface.normals[idx0])
    acc = np.zeros(3)
    for idx, dist in hits:
        acc += surface.normals[idx] / dist
    norm = np.linalg.norm(acc)
    if norm < 1e-12:
        return np.array(surface.normals[idx0])
    return acc / norm


def normal_batch(surface: geometry.KdIndex, points, k: int = 4) -> np.ndarray:
    """Vectorized normal interpolation for many query points."""
    if surface.normals is None:
        raise ValueError("surface index has no normals")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if k > len(surface):
        raise ValueError("k exceeds set size")
    dist, idx = surface._tree.query(points, k=k)
    dist = np.atleast_2d(dist)
    idx = np.atleast_2d(idx)
    near = dist[:, 0] < 1e-9
    safe = np.maximum(dist, 1e-300)
    acc = (surface.normals[idx] / safe[:, :, None]).sum(axis=1)
    acc[near] = surface.normals[idx[near, 0]]
    lengths = np.linalg.norm(acc, axis=1)
    degenerate = lengths < 1e-12
    acc[degenerate] = surface.normals[idx[degenerate, 0]]
    lengths[degenerate] = 1.0
    return acc / lengths[:, None]


# ---------------------------------------------------------------------------
# Canonical mesh
# ---------------------------------------------------------------------------

def canonical_bounds(body: CapsuleBody, expand: float = 0.1):
    lo, hi = body.bounds()
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) * (1.0 + expand)
    return center - half, center + half


def canonical_mesh(body: CapsuleBody, resolution: int = 64) -> geometry.Mesh:
    """Ground-truth T-pose mesh: occupancy marched over the expanded bbox."""
    if resolution < 32:
        raise ValueError("canonical mesh resolution must be >= 32")
    lo, hi = canonical_bounds(body)
    grid = geometry.grid_from_function(
        lambda pts: occupancy_batch(body, pts), (resolution,) * 3, lo, hi)
    mesh = geometry.marching_cubes(grid, 0.5)
    if mesh.is_empty:
        return mesh
    grad = field_gradient(body, mesh.vertices)
    lengths = np.linalg.norm(grad, axis=1)
    lengths[lengths < 1e-12] = 1.0
    return geometry.Mesh(mesh.vertices, mesh.faces, grad / lengths[:, None])


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def body_to_json(beta: ShapeParams, garment: GarmentParams, seed: int) -> dict:
    return {
        "beta": [float(x) for x in beta.as_array()],
        "garment": {"amp": float(garment.amp), "freq": int(garment.freq)},
        "seed": int(seed),
    }


def body_from_json(doc: dict):
    beta = ShapeParams.from_array(doc["beta"])
    garment = GarmentParams(float(doc["garment"]["amp"]), int(doc["garment"]["freq"]))
    return beta, garment, int(doc["seed"])


def save_body(path, beta: ShapeParams, garment: GarmentParams, seed: int):
    with open(path, "w") as fh:
        json.dump(body_to_json(beta, garment, seed), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_body(path):
    with open(path) as fh:
        return body_from_json(json.load(fh))

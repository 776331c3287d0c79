"""Triangle meshes, nearest-neighbor queries, chamfer distance, and grid
isosurface extraction.

All containers are frozen after construction (arrays are marked read-only)
and every operation is pure given its seed, so concurrent evaluation is
safe. Distances are in the same units as the input coordinates
(body-height units throughout the pipeline).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ._mc_tables import EDGE_BASE, EDGE_AXIS, TRI_COUNTS, TRI_TABLE


def _freeze(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Mesh:
    """Indexed triangle mesh with optional unit per-vertex normals."""

    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray     # (F, 3) int64
    normals: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "vertices", _freeze(np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)))
        object.__setattr__(self, "faces", _freeze(np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)))
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if self.normals is not None:
            normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(normals) != len(self.vertices):
                raise ValueError("normal count must match vertex count")
            lengths = np.linalg.norm(normals, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise ValueError("normals must have unit length")
            object.__setattr__(self, "normals", _freeze(normals))

    @property
    def is_empty(self):
        return len(self.faces) == 0

    def bounds(self):
        if len(self.vertices) == 0:
            raise ValueError("empty mesh has no bounds")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N, 3)
    normals: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "points", _freeze(np.asarray(self.points, dtype=np.float64).reshape(-1, 3)))
        if self.normals is not None:
            normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(normals) != len(self.points):
                raise ValueError("normal count must match point count")
            object.__setattr__(self, "normals", _freeze(normals))

    def __len__(self):
        return len(self.points)


class KdIndex:
    """Balanced spatial index over a point cloud; results match a linear scan."""

    def __init__(self, cloud: PointCloud):
        self.cloud = cloud
        self._tree = cKDTree(cloud.points) if len(cloud) else None

    def __len__(self):
        return len(self.cloud)

    @property
    def points(self):
        return self.cloud.points

    @property
    def normals(self):
        return self.cloud.normals


@dataclass(frozen=True)
class ScalarGrid:
    """Regular scalar samples over an axis-aligned box, row-major (x, y, z)."""

    resolution: tuple  # (nx, ny, nz)
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    values: np.ndarray  # flat, nx*ny*nz

    def __post_init__(self):
        nx, ny, nz = self.resolution
        object.__setattr__(self, "resolution", (int(nx), int(ny), int(nz)))
        object.__setattr__(self, "bounds_min", _freeze(np.asarray(self.bounds_min, dtype=np.float64).reshape(3)))
        object.__setattr__(self, "bounds_max", _freeze(np.asarray(self.bounds_max, dtype=np.float64).reshape(3)))
        object.__setattr__(self, "values", _freeze(np.asarray(self.values, dtype=np.float64).reshape(-1)))
        if any(n < 2 for n in self.resolution):
            raise ValueError("grid resolution must be >= 2 per axis")
        if len(self.values) != nx * ny * nz:
            raise ValueError("value count must equal nx*ny*nz")
        if not np.all(self.bounds_min < self.bounds_max):
            raise ValueError("grid bounds min must be < max componentwise")

    def axes(self):
        nx, ny, nz = self.resolution
        return (np.linspace(self.bounds_min[0], self.bounds_max[0], nx),
                np.linspace(self.bounds_min[1], self.bounds_max[1], ny),
                np.linspace(self.bounds_min[2], self.bounds_max[2], nz))

    def as_array(self):
        return self.values.reshape(self.resolution)

    @property
    def voxel_size(self):
        n = np.array(self.resolution, dtype=np.float64)
        return float(((self.bounds_max - self.bounds_min) / (n - 1)).max())


def grid_from_function(fn, resolution, bounds_min, bounds_max):
    """Sample ``fn(points) -> values`` on a regular grid."""
    nx, ny, nz = resolution
    xs = np.linspace(bounds_min[0], bounds_max[0], nx)
    ys = np.linspace(bounds_min[1], bounds_max[1], ny)
    zs = np.linspace(bounds_min[2], bounds_max[2], nz)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    return ScalarGrid((nx, ny, nz), bounds_min, bounds_max, fn(pts))


# ---------------------------------------------------------------------------
# Nearest neighbors and chamfer distance
# ---------------------------------------------------------------------------

def knn_query(index: KdIndex, q, k: int):
    """k nearest points to q, ascending by distance, ties to the lower index."""
    n = len(index)
    if n == 0:
        raise ValueError("empty point set")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError("k exceeds set size")
    q = np.asarray(q, dtype=np.float64).reshape(3)
    dist, _ = index._tree.query(q, k=k)
    dmax = float(np.atleast_1d(dist)[-1])
    cand = index._tree.query_ball_point(q, r=dmax)
    if len(cand) < k:  # float-boundary safety net
        cand = list(range(n))
    cand = np.asarray(cand, dtype=np.int64)
    diffs = index.points[cand] - q
    dists = np.sqrt((diffs * diffs).sum(axis=1))
    order = np.lexsort((cand, dists))[:k]
    return [(int(cand[i]), float(dists[i])) for i in order]


def chamfer_distance(a: PointCloud, b: PointCloud) -> float:
    """Half the sum of the two mean nearest-neighbor distances."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty point cloud")
    d_ab, _ = cKDTree(b.points).query(a.points)
    d_ba, _ = cKDTree(a.points).query(b.points)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


# ---------------------------------------------------------------------------
# Surface sampling
# ---------------------------------------------------------------------------

def sample_surface(mesh: Mesh, n: int, seed: int) -> PointCloud:
    """n points drawn area-uniformly on the mesh, with interpolated normals."""
    if mesh.is_empty:
        raise ValueError("mesh has no faces")
    if n < 1:
        raise ValueError("sample count must be >= 1")
    tri = mesh.vertices[mesh.faces]  # (F, 3, 3)
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("degenerate mesh: zero total surface area")

    rng = np.random.default_rng(seed)
    cdf = np.cumsum(areas) / total
    face_idx = np.searchsorted(cdf, rng.random(n), side="right")
    face_idx = np.minimum(face_idx, len(areas) - 1)
    u = rng.random(n)
    v = rng.random(n)
    su = np.sqrt(u)
    w0 = 1.0 - su
    w1 = su * (1.0 - v)
    w2 = su * v
    chosen = tri[face_idx]
    pts = (w0[:, None] * chosen[:, 0] + w1[:, None] * chosen[:, 1]
           + w2[:, None] * chosen[:, 2])

    if mesh.normals is not None:
        vn = mesh.normals[mesh.faces[face_idx]]  # (n, 3, 3)
        nrm = (w0[:, None] * vn[:, 0] + w1[:, None] * vn[:, 1]
               + w2[:, None] * vn[:, 2])
    else:
        nrm = cross[face_idx]
    lengths = np.linalg.norm(nrm, axis=1)
    fallback = lengths < 1e-12
    if fallback.any():
        nrm[fallback] = cross[face_idx[fallback]]
        lengths = np.linalg.norm(nrm, axis=1)
        lengths[lengths < 1e-12] = 1.0
    nrm = nrm / lengths[:, None]
    return PointCloud(pts, nrm)


def chamfer_between_meshes(a: Mesh, b: Mesh, n: int = 10_000, seed: int = 7) -> float:
    """Chamfer distance on fixed-seed surface samples of both meshes."""
    return chamfer_distance(sample_surface(a, n, seed), sample_surface(b, n, seed + 1))


# ---------------------------------------------------------------------------
# Marching cubes
# ---------------------------------------------------------------------------

def marching_cubes(grid: ScalarGrid, iso: float) -> Mesh:
    """Classic table-driven isosurface extraction.

    Vertices sit on crossed cell edges at the linear interpolation of the two
    corner values; welding is exact by global edge key, so shared vertices
    coincide without any floating-point tolerance. Triangles that collapse to
    zero area (corner values equal to iso) are dropped after welding.
    """
    nx, ny, nz = grid.resolution
    vol = grid.as_array()

    below = (vol < iso).astype(np.int64)
    case = (below[:-1, :-1, :-1]
            | (below[1:, :-1, :-1] << 1)
            | (below[1:, 1:, :-1] << 2)
            | (below[:-1, 1:, :-1] << 3)
            | (below[:-1, :-1, 1:] << 4)
            | (below[1:, :-1, 1:] << 5)
            | (below[1:, 1:, 1:] << 6)
            | (below[:-1, 1:, 1:] << 7))
    ci, cj, ck = np.nonzero((case != 0) & (case != 255))
    if ci.size == 0:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    ccase = case[ci, cj, ck]
    counts = TRI_COUNTS[ccase]
    edges = TRI_TABLE[ccase]  # (A, 16)
    mask = np.arange(16)[None, :] < counts[:, None]
    flat_edges = edges[mask]  # cube-local edge ids, 3 per triangle

    reps = np.repeat(np.arange(ci.size), counts)
    base_i = ci[reps] + EDGE_BASE[flat_edges, 0]
    base_j = cj[reps] + EDGE_BASE[flat_edges, 1]
    base_k = ck[reps] + EDGE_BASE[flat_edges, 2]
    axis = EDGE_AXIS[flat_edges]
    # global undirected edge key, unique per (lattice point, axis)
    eid = ((base_i * ny + base_j) * nz + base_k) * 3 + axis

    uniq, inv = np.unique(eid, return_inverse=True)
    faces = inv.reshape(-1, 3)

    u_axis = uniq % 3
    rest = uniq // 3
    u_k = rest % nz
    rest //= nz
    u_j = rest % ny
    u_i = rest // ny

    xs, ys, zs = grid.axes()
    p0 = np.stack([xs[u_i], ys[u_j], zs[u_k]], axis=1)
    i1 = u_i + (u_axis == 0)
    j1 = u_j + (u_axis == 1)
    k1 = u_k + (u_axis == 2)
    p1 = np.stack([xs[i1], ys[j1], zs[k1]], axis=1)
    v0 = vol[u_i, u_j, u_k]
    v1 = vol[i1, j1, k1]
    t = np.clip((iso - v0) / (v1 - v0), 0.0, 1.0)
    verts = p0 + t[:, None] * (p1 - p0)

    # drop triangles that weld to fewer than 3 distinct points or zero area
    e1 = verts[faces[:, 1]] - verts[faces[:, 0]]
    e2 = verts[faces[:, 2]] - verts[faces[:, 0]]
    area2 = np.linalg.norm(np.cross(e1, e2), axis=1)
    keep = area2 > 2e-12
    faces = faces[keep]
    return Mesh(verts, faces)


def is_closed(mesh: Mesh) -> bool:
    """True when every undirected edge is shared by exactly two faces."""
    if mesh.is_empty:
        return False
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def euler_characteristic(mesh: Mesh) -> int:
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    n_edges = len(np.unique(edges, axis=0))
    n_verts = len(np.unique(f.ravel()))
    return n_verts - n_edges + len(f)


# ---------------------------------------------------------------------------
# OBJ io
# ---------------------------------------------------------------------------

def mesh_io_write(path, mesh: Mesh):
    """Write an ASCII OBJ with v/vn/f records, 6 decimal places."""
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}")
    if mesh.normals is not None:
        for n in mesh.normals:
            lines.append(f"vn {n[0]:.6f} {n[1]:.6f} {n[2]:.6f}")
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
        if lines:
            fh.write("\n")


def mesh_io_read(path) -> Mesh:
    """Read the OBJ subset written by :func:`mesh_io_write`."""
    verts, normals, faces = [], [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            try:
                if tag == "v":
                    if len(parts) != 4:
                        raise ValueError
                    verts.append([float(x) for x in parts[1:]])
                elif tag == "vn":
                    if len(parts) != 4:
                        raise ValueError
                    normals.append([float(x) for x in parts[1:]])
                elif tag == "f":
                    if len(parts) != 4:
                        raise ValueError("triangles only")
                    idx = [int(x) for x in parts[1:]]
                    if any(i < 1 for i in idx):
                        raise ValueError("face indices are 1-based")
                    faces.append([i - 1 for i in idx])
                else:
                    raise ValueError
            except ValueError as exc:
                detail = str(exc) or "malformed OBJ record"
                raise ValueError(f"{detail} (line {lineno})") from None
    verts = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    faces_arr = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces_arr.size and faces_arr.max() >= len(verts):
        raise ValueError("face index out of range")
    nrm = None
    if normals:
        if len(normals) != len(verts):
            raise ValueError("normal count must match vertex count")
        nrm = np.asarray(normals, dtype=np.float64)
        lengths = np.linalg.norm(nrm, axis=1)
        lengths[lengths == 0] = 1.0
        nrm = nrm / lengths[:, None]
    return Mesh(verts, faces_arr, nrm)

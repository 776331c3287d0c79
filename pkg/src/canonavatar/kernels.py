"""Hot numeric kernels, each with a numba loop and a vectorized numpy twin.

The two implementations of every kernel follow the same arithmetic sequence
so they agree to floating-point noise (libm ulp differences at most); the
dispatch wrapper picks the numba path unless ``CANONAVATAR_DISABLE_NUMBA``
is set. Each run uses a single path, so results are reproducible bit-for-bit
across runs either way.

Capsule conventions: ``seg_a``/``seg_b`` are the (K, 3) segment endpoints,
``radius`` the (K,) base radii, and the surface radius varies along the axis
parameter t in [0, 1] as ``radius + amp * sin(2*pi*freq*t)``. The implicit
field value at a point is min over capsules of (axis distance - radius(t));
the body interior is field <= 0.
"""

import math

import numpy as np

from .accel import NUMBA_ENABLED, njit

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# Capsule field
# ---------------------------------------------------------------------------

@njit(cache=True)
def _capsule_field_numba(points, seg_a, seg_b, radius, amp, freq):
    n = points.shape[0]
    k = seg_a.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        x = points[i, 0]
        y = points[i, 1]
        z = points[i, 2]
        best = 1e300
        for j in range(k):
            vx = seg_b[j, 0] - seg_a[j, 0]
            vy = seg_b[j, 1] - seg_a[j, 1]
            vz = seg_b[j, 2] - seg_a[j, 2]
            wx = x - seg_a[j, 0]
            wy = y - seg_a[j, 1]
            wz = z - seg_a[j, 2]
            t = (wx * vx + wy * vy + wz * vz) / (vx * vx + vy * vy + vz * vz)
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
            dx = wx - t * vx
            dy = wy - t * vy
            dz = wz - t * vz
            d = math.sqrt(dx * dx + dy * dy + dz * dz)
            f = d - (radius[j] + amp[j] * math.sin(TWO_PI * freq * t))
            if f < best:
                best = f
        out[i] = best
    return out


def capsule_field_numpy(points, seg_a, seg_b, radius, amp, freq):
    """Vectorized twin of the capsule field kernel."""
    v = seg_b - seg_a  # (K, 3)
    w = points[:, None, :] - seg_a[None, :, :]  # (P, K, 3)
    denom = (v * v).sum(axis=1)  # (K,)
    t = (w * v[None, :, :]).sum(axis=2) / denom[None, :]
    np.clip(t, 0.0, 1.0, out=t)
    diff = w - t[:, :, None] * v[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=2))
    f = d - (radius[None, :] + amp[None, :] * np.sin(TWO_PI * freq * t))
    return f.min(axis=1)


def capsule_field(points, seg_a, seg_b, radius, amp, freq):
    """Implicit body field at each point; interior where the value is <= 0."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    if NUMBA_ENABLED:
        return _capsule_field_numba(points, seg_a, seg_b, radius, amp, float(freq))
    return capsule_field_numpy(points, seg_a, seg_b, radius, amp, float(freq))


# ---------------------------------------------------------------------------
# Axis distances and skinning weights
# ---------------------------------------------------------------------------

@njit(cache=True)
def _axis_distances_numba(points, seg_a, seg_b):
    n = points.shape[0]
    k = seg_a.shape[0]
    out = np.empty((n, k), dtype=np.float64)
    for i in range(n):
        for j in range(k):
            vx = seg_b[j, 0] - seg_a[j, 0]
            vy = seg_b[j, 1] - seg_a[j, 1]
            vz = seg_b[j, 2] - seg_a[j, 2]
            wx = points[i, 0] - seg_a[j, 0]
            wy = points[i, 1] - seg_a[j, 1]
            wz = points[i, 2] - seg_a[j, 2]
            t = (wx * vx + wy * vy + wz * vz) / (vx * vx + vy * vy + vz * vz)
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
            dx = wx - t * vx
            dy = wy - t * vy
            dz = wz - t * vz
            out[i, j] = math.sqrt(dx * dx + dy * dy + dz * dz)
    return out


def axis_distances_numpy(points, seg_a, seg_b):
    v = seg_b - seg_a
    w = points[:, None, :] - seg_a[None, :, :]
    t = (w * v[None, :, :]).sum(axis=2) / (v * v).sum(axis=1)[None, :]
    np.clip(t, 0.0, 1.0, out=t)
    diff = w - t[:, :, None] * v[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def axis_distances(points, seg_a, seg_b):
    """(P, K) distances from each point to each capsule axis segment."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    if NUMBA_ENABLED:
        return _axis_distances_numba(points, seg_a, seg_b)
    return axis_distances_numpy(points, seg_a, seg_b)


@njit(cache=True)
def _skin_weights_numba(dists, sigma, k_near):
    n, k = dists.shape
    kn = k_near if k_near < k else k
    out = np.zeros((n, k), dtype=np.float64)
    inv_s2 = 1.0 / (sigma * sigma)
    for i in range(n):
        # k-pass selection of the nearest capsules, ties to the lower index
        chosen = np.full(kn, -1, dtype=np.int64)
        for m in range(kn):
            best = 1e300
            best_j = -1
            for j in range(k):
                taken = False
                for c in range(m):
                    if chosen[c] == j:
                        taken = True
                        break
                if taken:
                    continue
                if dists[i, j] < best:
                    best = dists[i, j]
                    best_j = j
            chosen[m] = best_j
        total = 0.0
        for m in range(kn):
            j = chosen[m]
            w = math.exp(-dists[i, j] * dists[i, j] * inv_s2)
            out[i, j] = w
            total += w
        if total > 0.0:
            for m in range(kn):
                out[i, chosen[m]] /= total
        else:
            # everything underflowed; bind rigidly to the nearest capsule
            for m in range(kn):
                out[i, chosen[m]] = 0.0
            out[i, chosen[0]] = 1.0
    return out


def skin_weights_numpy(dists, sigma, k_near):
    n, k = dists.shape
    kn = min(k_near, k)
    order = np.argsort(dists, axis=1, kind="stable")[:, :kn]
    rows = np.arange(n)[:, None]
    sel = np.exp(-(dists[rows, order] ** 2) / (sigma * sigma))
    total = sel.sum(axis=1)
    out = np.zeros((n, k), dtype=np.float64)
    ok = total > 0.0
    sel[ok] = sel[ok] / total[ok, None]
    sel[~ok] = 0.0
    out[rows, order] = sel
    out[~ok, order[~ok, 0]] = 1.0
    return out


def skin_weights_from_distances(dists, sigma, k_near=3):
    """Truncated Gaussian-kernel weights over capsules, rows summing to 1."""
    if NUMBA_ENABLED:
        return _skin_weights_numba(np.ascontiguousarray(dists), float(sigma), int(k_near))
    return skin_weights_numpy(dists, float(sigma), int(k_near))


# ---------------------------------------------------------------------------
# Blended rigid transforms (linear blend skinning)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _blend_transforms_numba(points, weights, rots, trans):
    n = points.shape[0]
    j_count = rots.shape[0]
    out = np.zeros((n, 3), dtype=np.float64)
    for i in range(n):
        px = points[i, 0]
        py = points[i, 1]
        pz = points[i, 2]
        ox = 0.0
        oy = 0.0
        oz = 0.0
        for j in range(j_count):
            w = weights[i, j]
            if w == 0.0:
                continue
            qx = rots[j, 0, 0] * px + rots[j, 0, 1] * py + rots[j, 0, 2] * pz + trans[j, 0]
            qy = rots[j, 1, 0] * px + rots[j, 1, 1] * py + rots[j, 1, 2] * pz + trans[j, 1]
            qz = rots[j, 2, 0] * px + rots[j, 2, 1] * py + rots[j, 2, 2] * pz + trans[j, 2]
            ox += w * qx
            oy += w * qy
            oz += w * qz
        out[i, 0] = ox
        out[i, 1] = oy
        out[i, 2] = oz
    return out


def blend_transforms_numpy(points, weights, rots, trans):
    out = np.zeros((points.shape[0], 3), dtype=np.float64)
    for j in range(rots.shape[0]):
        q = points @ rots[j].T + trans[j]
        out += weights[:, j, None] * q
    return out


def blend_transforms(points, weights, rots, trans):
    """Weighted sum of per-joint rigid transforms applied to each point."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    if NUMBA_ENABLED:
        return _blend_transforms_numba(points, np.ascontiguousarray(weights), rots, trans)
    return blend_transforms_numpy(points, weights, rots, trans)


# ---------------------------------------------------------------------------
# Orthographic ray-marched renderer
# ---------------------------------------------------------------------------

_N_BISECT = 30


@njit(cache=True)
def _render_numba(width, height, right, up, view, center, wpp,
                  seg_a, seg_b, radius, amp, freq, step_h):
    k = seg_a.shape[0]
    out = np.zeros((height, width, 5), dtype=np.float64)

    ax2 = np.empty(k)
    ay2 = np.empty(k)
    bx2 = np.empty(k)
    by2 = np.empty(k)
    s_lo = np.empty(k)
    s_hi = np.empty(k)
    rmax = np.empty(k)
    for j in range(k):
        rax = seg_a[j, 0] - center[0]
        ray = seg_a[j, 1] - center[1]
        raz = seg_a[j, 2] - center[2]
        rbx = seg_b[j, 0] - center[0]
        rby = seg_b[j, 1] - center[1]
        rbz = seg_b[j, 2] - center[2]
        ax2[j] = rax * right[0] + ray * right[1] + raz * right[2]
        ay2[j] = rax * up[0] + ray * up[1] + raz * up[2]
        bx2[j] = rbx * right[0] + rby * right[1] + rbz * right[2]
        by2[j] = rbx * up[0] + rby * up[1] + rbz * up[2]
        sa = rax * view[0] + ray * view[1] + raz * view[2]
        sb = rbx * view[0] + rby * view[1] + rbz * view[2]
        rmax[j] = radius[j] + (amp[j] if amp[j] > 0.0 else 0.0)
        s_lo[j] = min(sa, sb) - rmax[j]
        s_hi[j] = max(sa, sb) + rmax[j]
    s_lo_g = s_lo.min()
    s_hi_g = s_hi.max()
    depth_span = s_hi_g - s_lo_g

    eps = 1e-5
    for py in range(height):
        y_cam = ((height - 1) * 0.5 - py) * wpp
        for px in range(width):
            x_cam = (px - (width - 1) * 0.5) * wpp
            s0 = 1e300
            s1 = -1e300
            hit_any = False
            for j in range(k):
                vx = bx2[j] - ax2[j]
                vy = by2[j] - ay2[j]
                wx = x_cam - ax2[j]
                wy = y_cam - ay2[j]
                denom = vx * vx + vy * vy
                if denom > 0.0:
                    t = (wx * vx + wy * vy) / denom
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                else:
                    t = 0.0
                dx = wx - t * vx
                dy = wy - t * vy
                d2 = math.sqrt(dx * dx + dy * dy)
                if d2 <= rmax[j]:
                    hit_any = True
                    if s_lo[j] < s0:
                        s0 = s_lo[j]
                    if s_hi[j] > s1:
                        s1 = s_hi[j]
            if not hit_any:
                continue
            span = s1 - s0
            n_steps = int(math.ceil(span / step_h))
            if n_steps < 1:
                n_steps = 1
            ds = span / n_steps
            bx = center[0] + x_cam * right[0] + y_cam * up[0]
            by = center[1] + x_cam * right[1] + y_cam * up[1]
            bz = center[2] + x_cam * right[2] + y_cam * up[2]
            found = False
            s_hit = 0.0
            f_prev = _field_scalar(bx + s0 * view[0], by + s0 * view[1],
                                   bz + s0 * view[2], seg_a, seg_b, radius, amp, freq)
            if f_prev <= 0.0:
                found = True
                s_hit = s0
            else:
                for m in range(1, n_steps + 1):
                    s = s0 + ds * m
                    f = _field_scalar(bx + s * view[0], by + s * view[1],
                                      bz + s * view[2], seg_a, seg_b, radius, amp, freq)
                    if f <= 0.0:
                        lo = s - ds
                        hi = s
                        for _ in range(_N_BISECT):
                            mid = 0.5 * (lo + hi)
                            fm = _field_scalar(bx + mid * view[0], by + mid * view[1],
                                               bz + mid * view[2],
                                               seg_a, seg_b, radius, amp, freq)
                            if fm <= 0.0:
                                hi = mid
                            else:
                                lo = mid
                        s_hit = hi
                        found = True
                        break
            if not found:
                continue
            hx = bx + s_hit * view[0]
            hy = by + s_hit * view[1]
            hz = bz + s_hit * view[2]
            gx = (_field_scalar(hx + eps, hy, hz, seg_a, seg_b, radius, amp, freq)
                  - _field_scalar(hx - eps, hy, hz, seg_a, seg_b, radius, amp, freq))
            gy = (_field_scalar(hx, hy + eps, hz, seg_a, seg_b, radius, amp, freq)
                  - _field_scalar(hx, hy - eps, hz, seg_a, seg_b, radius, amp, freq))
            gz = (_field_scalar(hx, hy, hz + eps, seg_a, seg_b, radius, amp, freq)
                  - _field_scalar(hx, hy, hz - eps, seg_a, seg_b, radius, amp, freq))
            gn = math.sqrt(gx * gx + gy * gy + gz * gz)
            if gn == 0.0:
                gx, gy, gz = 0.0, 0.0, 1.0
                gn = 1.0
            gx /= gn
            gy /= gn
            gz /= gn
            out[py, px, 0] = 1.0
            out[py, px, 1] = (s_hit - s_lo_g) / depth_span
            out[py, px, 2] = gx * right[0] + gy * right[1] + gz * right[2]
            out[py, px, 3] = gx * up[0] + gy * up[1] + gz * up[2]
            out[py, px, 4] = gx * view[0] + gy * view[1] + gz * view[2]
    return out


@njit(cache=True)
def _field_scalar(x, y, z, seg_a, seg_b, radius, amp, freq):
    best = 1e300
    for j in range(seg_a.shape[0]):
        vx = seg_b[j, 0] - seg_a[j, 0]
        vy = seg_b[j, 1] - seg_a[j, 1]
        vz = seg_b[j, 2] - seg_a[j, 2]
        wx = x - seg_a[j, 0]
        wy = y - seg_a[j, 1]
        wz = z - seg_a[j, 2]
        t = (wx * vx + wy * vy + wz * vz) / (vx * vx + vy * vy + vz * vz)
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        dx = wx - t * vx
        dy = wy - t * vy
        dz = wz - t * vz
        d = math.sqrt(dx * dx + dy * dy + dz * dz)
        f = d - (radius[j] + amp[j] * math.sin(TWO_PI * freq * t))
        if f < best:
            best = f
    return best


def render_numpy(width, height, right, up, view, center, wpp,
                 seg_a, seg_b, radius, amp, freq, step_h):
    """Vectorized twin of the ray-march render kernel."""
    k = seg_a.shape[0]
    rel_a = seg_a - center
    rel_b = seg_b - center
    ax2 = rel_a @ right
    ay2 = rel_a @ up
    bx2 = rel_b @ right
    by2 = rel_b @ up
    sa = rel_a @ view
    sb = rel_b @ view
    rmax = radius + np.maximum(amp, 0.0)
    s_lo = np.minimum(sa, sb) - rmax
    s_hi = np.maximum(sa, sb) + rmax
    s_lo_g = s_lo.min()
    s_hi_g = s_hi.max()
    depth_span = s_hi_g - s_lo_g

    xs = (np.arange(width) - (width - 1) * 0.5) * wpp
    ys = ((height - 1) * 0.5 - np.arange(height)) * wpp
    x_cam = np.broadcast_to(xs[None, :], (height, width))
    y_cam = np.broadcast_to(ys[:, None], (height, width))

    # 2D candidate test against each projected capsule
    vx = bx2 - ax2
    vy = by2 - ay2
    denom = vx * vx + vy * vy
    wx = x_cam[:, :, None] - ax2[None, None, :]
    wy = y_cam[:, :, None] - ay2[None, None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        t2 = (wx * vx + wy * vy) / denom
    t2 = np.where(denom > 0.0, t2, 0.0)
    np.clip(t2, 0.0, 1.0, out=t2)
    dx = wx - t2 * vx
    dy = wy - t2 * vy
    cand = np.sqrt(dx * dx + dy * dy) <= rmax[None, None, :]

    out = np.zeros((height, width, 5), dtype=np.float64)
    active = cand.any(axis=2)
    if not active.any():
        return out
    ai, aj = np.nonzero(active)
    cm = cand[ai, aj]  # (A, K)
    s0 = np.where(cm, s_lo[None, :], np.inf).min(axis=1)
    s1 = np.where(cm, s_hi[None, :], -np.inf).max(axis=1)
    span = s1 - s0
    n_steps = np.maximum(np.ceil(span / step_h).astype(np.int64), 1)
    ds = span / n_steps

    base = (center[None, :] + x_cam[ai, aj, None] * right[None, :]
            + y_cam[ai, aj, None] * up[None, :])

    def field_at(s_vals, idx):
        pts = base[idx] + s_vals[:, None] * view[None, :]
        return capsule_field_numpy(pts, seg_a, seg_b, radius, amp, freq)

    a_count = ai.shape[0]
    alive = np.ones(a_count, dtype=bool)
    lo = np.zeros(a_count)
    hi = np.zeros(a_count)
    has_hit = np.zeros(a_count, dtype=bool)

    f0 = field_at(s0, np.arange(a_count))
    inside0 = f0 <= 0.0
    has_hit |= inside0
    lo[inside0] = s0[inside0]
    hi[inside0] = s0[inside0]
    alive &= ~inside0

    max_steps = int(n_steps.max())
    for m in range(1, max_steps + 1):
        consider = alive & (m <= n_steps)
        if not consider.any():
            break
        idx = np.nonzero(consider)[0]
        s = s0[idx] + ds[idx] * m
        f = field_at(s, idx)
        newly = f <= 0.0
        hit_idx = idx[newly]
        lo[hit_idx] = s[newly] - ds[hit_idx]
        hi[hit_idx] = s[newly]
        has_hit[hit_idx] = True
        alive[hit_idx] = False

    hit_list = np.nonzero(has_hit)[0]
    if hit_list.size == 0:
        return out
    blo = lo[hit_list]
    bhi = hi[hit_list]
    for _ in range(_N_BISECT):
        mid = 0.5 * (blo + bhi)
        fm = field_at(mid, hit_list)
        inside = fm <= 0.0
        bhi = np.where(inside, mid, bhi)
        blo = np.where(inside, blo, mid)
    s_hit = bhi

    hits = base[hit_list] + s_hit[:, None] * view[None, :]
    eps = 1e-5
    grad = np.empty((hit_list.size, 3))
    for axis in range(3):
        dpos = np.zeros(3)
        dpos[axis] = eps
        fp = capsule_field_numpy(hits + dpos, seg_a, seg_b, radius, amp, freq)
        fn = capsule_field_numpy(hits - dpos, seg_a, seg_b, radius, amp, freq)
        grad[:, axis] = fp - fn
    gn = np.sqrt((grad * grad).sum(axis=1))
    degenerate = gn == 0.0
    grad[degenerate] = (0.0, 0.0, 1.0)
    gn[degenerate] = 1.0
    grad /= gn[:, None]

    py = ai[hit_list]
    px = aj[hit_list]
    out[py, px, 0] = 1.0
    out[py, px, 1] = (s_hit - s_lo_g) / depth_span
    out[py, px, 2] = grad @ right
    out[py, px, 3] = grad @ up
    out[py, px, 4] = grad @ view
    return out


def render(width, height, right, up, view, center, wpp,
           seg_a, seg_b, radius, amp, freq, step_h):
    """Render silhouette/depth/camera-frame-normal channels, (H, W, 5)."""
    if NUMBA_ENABLED:
        return _render_numba(int(width), int(height), right, up, view, center,
                             float(wpp), seg_a, seg_b, radius, amp,
                             float(freq), float(step_h))
    return render_numpy(int(width), int(height), right, up, view, center,
                        float(wpp), seg_a, seg_b, radius, amp,
                        float(freq), float(step_h))

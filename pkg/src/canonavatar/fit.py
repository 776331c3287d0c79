"""Joint shape/pose fitting from 2D joint observations.

One shape vector is shared across all of a subject's frames by
construction; each frame carries its own pose. The energy is the squared
reprojection error of the skeleton joints under every frame's camera plus
a small quadratic pull of the shape toward its initialization and of the
poses toward zero:

    E(beta, thetas) = sum_f sum_j ||proj_f(p_j(beta, theta_f)) - obs_fj||^2
                      + lambda * (||beta - beta0||^2 + sum_f ||theta_f||^2)

Minimized by gradient descent with Armijo backtracking; the gradient is
the exact chain rule through forward kinematics and the orthographic
projection (checked against central differences in the tests).
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .body import (N_JOINTS, ShapeParams, build_skeleton, forward_kinematics,
                   rotation_from_axis_angle)

N_POSE = 3 * N_JOINTS + 3


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 500
    lr: float = 1e-4
    lambda_reg: float = 1e-4
    tol: float = 1e-8
    armijo_c: float = 1e-4
    shrink: float = 0.5


@dataclass(frozen=True)
class FitProblem:
    """Observed joint projections plus cameras and the initial guess."""

    observations: np.ndarray  # (F, J, 2) pixel coords
    cameras: list             # length F
    beta_init: np.ndarray     # (4,)
    thetas_init: np.ndarray   # (F, 3J+3)

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=np.float64)
        if obs.ndim != 3 or obs.shape[1] != N_JOINTS or obs.shape[2] != 2:
            raise ValueError("observations must be (frames, joints, 2)")
        if obs.shape[0] < 2:
            raise ValueError("joint fitting needs >= 2 frames")
        if len(self.cameras) != obs.shape[0]:
            raise ValueError("camera count must match frame count")
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "beta_init",
                           np.asarray(self.beta_init, dtype=np.float64).reshape(4))
        object.__setattr__(self, "thetas_init",
                           np.asarray(self.thetas_init, dtype=np.float64).reshape(-1, N_POSE))

    @property
    def n_frames(self):
        return self.observations.shape[0]


@dataclass
class FitResult:
    beta: np.ndarray
    thetas: np.ndarray          # (F, 3J+3)
    residuals: list             # RMS pixel error per iteration (incl. initial)
    iterations: int
    per_frame_before: np.ndarray
    per_frame_after: np.ndarray
    beta_true: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Energy and gradient
# ---------------------------------------------------------------------------

def _projection_rows(camera):
    """proj(p) = A @ (p - center) + b in texel coords; returns A (2,3), b (2,)."""
    right, up, _ = camera.basis()
    a = np.stack([right / camera.wpp, -up / camera.wpp])
    b = np.array([(camera.width - 1) * 0.5, (camera.height - 1) * 0.5])
    return a, b - a @ camera.center


_PARENTS = (-1, 0, 1, 1, 3, 1, 5, 0, 0)


def _fk_positions(offsets, theta):
    """Lightweight forward kinematics over a raw (3J+3,) pose vector."""
    rot_vecs = theta[: 3 * N_JOINTS].reshape(N_JOINTS, 3)
    t_root = theta[3 * N_JOINTS:]
    rot_w = np.empty((N_JOINTS, 3, 3))
    pos_w = np.empty((N_JOINTS, 3))
    for j in range(N_JOINTS):
        r_local = rotation_from_axis_angle(rot_vecs[j])
        parent = _PARENTS[j]
        if parent < 0:
            rot_w[j] = r_local
            pos_w[j] = rot_w[j] @ offsets[j] + t_root
        else:
            rot_w[j] = rot_w[parent] @ r_local
            pos_w[j] = rot_w[j] @ offsets[j] + pos_w[parent]
    return rot_w, pos_w


def _ancestors(j):
    chain = []
    while j >= 0:
        chain.append(j)
        j = _PARENTS[j]
    return chain


_CHAINS = tuple(tuple(_ancestors(j)) for j in range(N_JOINTS))


def rotation_derivatives(v):
    """d R(v) / d v_i for axis-angle v; (3, 3, 3), index i first."""
    v = np.asarray(v, dtype=np.float64).reshape(3)
    theta2 = float(v @ v)
    out = np.empty((3, 3, 3))
    if theta2 < 1e-16:
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            out[i] = _skew(e)
        return out
    r = rotation_from_axis_angle(v)
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        w = v[i] * v + np.cross(v, (np.eye(3) - r) @ e)
        out[i] = (_skew(w) / theta2) @ r
    return out


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def fit_energy(beta, thetas, problem: FitProblem, lambda_reg: float) -> float:
    # raw (unclamped) offsets keep the energy smooth if the optimizer wanders
    # slightly outside the valid shape box
    offsets = _raw_offsets(beta)
    total = 0.0
    for f in range(problem.n_frames):
        a, b = _projection_rows(problem.cameras[f])
        _, pos = _fk_positions(offsets, thetas[f])
        proj = pos @ a.T + b
        r = proj - problem.observations[f]
        total += float((r * r).sum())
    d_beta = beta - problem.beta_init
    total += lambda_reg * (float(d_beta @ d_beta) + float((thetas * thetas).sum()))
    return total


def _raw_offsets(beta):
    from .body import _OFFSET_COEFS
    s0, s1, r0, r1 = np.asarray(beta, dtype=np.float64)
    c = _OFFSET_COEFS
    off = np.zeros((N_JOINTS, 3))
    off[:, 0] = s0 * (c[:, 0] + c[:, 1] * s1 + c[:, 2] * r0 + c[:, 3] * r1)
    off[:, 1] = s0 * (c[:, 4] + c[:, 5] * s1)
    return off


def _raw_offset_jacobian(beta):
    from .body import _OFFSET_COEFS
    s0, s1, r0, r1 = np.asarray(beta, dtype=np.float64)
    c = _OFFSET_COEFS
    jac = np.zeros((N_JOINTS, 3, 4))
    jac[:, 0, 0] = c[:, 0] + c[:, 1] * s1 + c[:, 2] * r0 + c[:, 3] * r1
    jac[:, 1, 0] = c[:, 4] + c[:, 5] * s1
    jac[:, 0, 1] = s0 * c[:, 1]
    jac[:, 1, 1] = s0 * c[:, 5]
    jac[:, 0, 2] = s0 * c[:, 2]
    jac[:, 0, 3] = s0 * c[:, 3]
    return jac


def fit_gradient(beta, thetas, problem: FitProblem, lambda_reg: float):
    """Exact gradient of the energy over (beta, all thetas), flattened."""
    beta = np.asarray(beta, dtype=np.float64).reshape(4)
    thetas = np.asarray(thetas, dtype=np.float64).reshape(-1, N_POSE)
    offsets = _raw_offsets(beta)
    off_jac = _raw_offset_jacobian(beta)

    g_beta = 2.0 * lambda_reg * (beta - problem.beta_init)
    g_thetas = 2.0 * lambda_reg * thetas.copy()

    for f in range(problem.n_frames):
        a, b = _projection_rows(problem.cameras[f])
        theta = thetas[f]
        rot_vecs = theta[: 3 * N_JOINTS].reshape(N_JOINTS, 3)
        t_root = theta[3 * N_JOINTS:]
        rot_w, pos_w = _fk_positions(offsets, theta)
        d_rots = [rotation_derivatives(rot_vecs[k]) for k in range(N_JOINTS)]

        proj = pos_w @ a.T + b
        res = proj - problem.observations[f]  # (J, 2)
        g_pos = 2.0 * res @ a  # (J, 3): dE/dp_j

        for j in range(N_JOINTS):
            gp = g_pos[j]
            for k in _CHAINS[j]:
                parent = _PARENTS[k]
                r_par = rot_w[parent] if parent >= 0 else np.eye(3)
                base = pos_w[parent] if parent >= 0 else t_root
                u = rot_w[k].T @ (pos_w[j] - base)
                for i in range(3):
                    dp = r_par @ (d_rots[k][i] @ u)
                    g_thetas[f, 3 * k + i] += float(gp @ dp)
                # beta chain term: R_k^w d off_k / d beta
                g_beta += (gp @ (rot_w[k] @ off_jac[k])).reshape(4)
            g_thetas[f, 3 * N_JOINTS:] += gp
    return np.concatenate([g_beta, g_thetas.ravel()])


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def _data_rms_per_frame(beta, thetas, problem):
    offsets = _raw_offsets(beta)
    out = np.empty(problem.n_frames)
    for f in range(problem.n_frames):
        a, b = _projection_rows(problem.cameras[f])
        _, pos = _fk_positions(offsets, thetas[f])
        r = pos @ a.T + b - problem.observations[f]
        out[f] = math.sqrt(float((r * r).mean()))
    return out


def fit_joint(problem: FitProblem, config: FitConfig = FitConfig(),
              beta_true=None) -> FitResult:
    """Gradient descent with backtracking; energy decreases every step."""
    beta = problem.beta_init.copy()
    thetas = problem.thetas_init.copy()
    lam = config.lambda_reg

    energy = fit_energy(beta, thetas, problem, lam)
    if not np.isfinite(energy):
        raise ValueError("invalid initialization")
    per_frame0 = _data_rms_per_frame(beta, thetas, problem)
    rms = [float(np.sqrt((per_frame0 ** 2).mean()))]

    step = config.lr
    iters = 0
    data0 = energy - lam * (float((beta - problem.beta_init) @ (beta - problem.beta_init))
                            + float((thetas * thetas).sum()))
    if data0 <= 1e-18:  # already a perfect fit; nothing to improve
        return FitResult(beta, thetas, rms, 0, per_frame0, per_frame0,
                         None if beta_true is None else np.asarray(beta_true))

    x = np.concatenate([beta, thetas.ravel()])
    prev_x = None
    prev_grad = None
    for iters in range(1, config.max_iters + 1):
        grad = fit_gradient(x[:4], x[4:].reshape(-1, N_POSE), problem, lam)
        g2 = float(grad @ grad)
        if g2 == 0.0:
            break
        # Barzilai-Borwein trial step, Armijo-safeguarded below
        if prev_grad is not None:
            s = x - prev_x
            y = grad - prev_grad
            sy = float(s @ y)
            if sy > 0.0:
                step = float(s @ s) / sy
            else:
                step *= 2.0
        prev_x = x
        prev_grad = grad
        accepted = False
        while step > 1e-18:
            cand = x - step * grad
            c_energy = fit_energy(cand[:4], cand[4:].reshape(-1, N_POSE), problem, lam)
            if c_energy <= energy - config.armijo_c * step * g2:
                accepted = True
                break
            step *= config.shrink
        if not accepted:
            break
        rel_drop = (energy - c_energy) / max(energy, 1e-300)
        x, energy = cand, c_energy
        rms.append(float(np.sqrt((_data_rms_per_frame(
            x[:4], x[4:].reshape(-1, N_POSE), problem) ** 2).mean())))
        if rel_drop < config.tol:
            break
    beta = x[:4]
    thetas = x[4:].reshape(-1, N_POSE)

    per_frame1 = _data_rms_per_frame(beta, thetas, problem)
    return FitResult(beta, thetas, rms, iters, per_frame0, per_frame1,
                     None if beta_true is None else np.asarray(beta_true))


# ---------------------------------------------------------------------------
# Synthetic problems and reporting
# ---------------------------------------------------------------------------

def make_problem(beta: ShapeParams, poses, cameras, seed: int = 0,
                 noise_beta: float = 0.1, noise_theta: float = 0.1,
                 noise_obs: float = 0.0) -> FitProblem:
    """Observations from ground truth; initialization perturbed by the noise."""
    rng = np.random.default_rng(seed)
    skeleton = build_skeleton(beta)
    obs = []
    thetas = []
    for pose, camera in zip(poses, cameras):
        _, pos = forward_kinematics(skeleton, pose)
        proj = camera.project(pos)
        if noise_obs > 0.0:
            proj = proj + noise_obs * rng.standard_normal(proj.shape)
        obs.append(proj)
        thetas.append(pose.to_vector())
    obs = np.asarray(obs)
    thetas = np.asarray(thetas)

    beta_init = beta.as_array() * (1.0 + rng.uniform(-noise_beta, noise_beta, 4))
    theta_init = thetas + rng.uniform(-noise_theta, noise_theta, thetas.shape)
    # keep rotation magnitudes valid
    rots = theta_init[:, : 3 * N_JOINTS].reshape(len(thetas), N_JOINTS, 3)
    mags = np.linalg.norm(rots, axis=2, keepdims=True)
    scale = np.minimum(1.0, np.pi / np.maximum(mags, 1e-12))
    theta_init[:, : 3 * N_JOINTS] = (rots * scale).reshape(len(thetas), -1)
    return FitProblem(obs, list(cameras), beta_init, theta_init)


def fit_report(result: FitResult) -> dict:
    """Per-frame before/after residuals plus aggregates, JSON-ready."""
    frames = [{"id": i, "before": float(b), "after": float(a)}
              for i, (b, a) in enumerate(zip(result.per_frame_before,
                                             result.per_frame_after))]
    beta_error = None
    if result.beta_true is not None:
        truth = np.asarray(result.beta_true, dtype=np.float64)
        beta_error = float(np.linalg.norm(result.beta - truth) / np.linalg.norm(truth))
    return {
        "frames": frames,
        "beta_error": beta_error,
        "aggregate": {
            "before": float(result.residuals[0]),
            "after": float(result.residuals[-1]),
        },
        "iterations": int(result.iterations),
    }


def fit_report_json(result: FitResult) -> str:
    return json.dumps(fit_report(result), indent=2, sort_keys=True)

"""Differentiable occupancy + skinning predictor, gradients by hand.

One shared trunk serves both heads: per frame, the sampled feature vector
runs through a small per-pixel transform, gets concatenated with the
positionally encoded canonical coordinates and the body-surface normal,
and is embedded by an MLP; frame embeddings are fused by average pooling
or mean-query dot-product attention; two head MLPs emit the occupancy
logit and the skinning logits.

Everything is float64 numpy. The reverse-mode gradients are exact and the
test suite checks every parameter block against central finite differences.
"""

import struct
from dataclasses import dataclass

import numpy as np

CHECKPOINT_MAGIC = b"AVP1"


# ---------------------------------------------------------------------------
# Configuration and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NetConfig:
    pe_frequencies: int = 6
    feature_channels: int = 5
    pixel_width: int = 8
    embed_widths: tuple = (64, 64)
    fusion: str = "attention"  # or "average"
    attention_dim: int = 16
    head_widths: tuple = (64,)
    n_joints: int = 9
    occupancy_loss: str = "bce"  # or "mse"
    lambda_skin: float = 0.5

    def __post_init__(self):
        if self.pe_frequencies < 0:
            raise ValueError("pe_frequencies must be >= 0")
        if self.fusion not in ("average", "attention"):
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.occupancy_loss not in ("bce", "mse"):
            raise ValueError(f"unknown occupancy loss {self.occupancy_loss!r}")
        for w in (self.pixel_width, self.attention_dim, *self.embed_widths,
                  *self.head_widths):
            if w < 1:
                raise ValueError("all widths must be >= 1")
        object.__setattr__(self, "embed_widths", tuple(int(w) for w in self.embed_widths))
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))

    @property
    def pe_dim(self):
        return 3 + 6 * self.pe_frequencies

    @property
    def embed_in_dim(self):
        return self.pixel_width + self.pe_dim + 3

    @property
    def embed_dim(self):
        return self.embed_widths[-1]


def _mlp_layout(prefix, dims):
    entries = []
    for i in range(len(dims) - 1):
        entries.append((f"{prefix}.w{i}", (dims[i], dims[i + 1])))
        entries.append((f"{prefix}.b{i}", (dims[i + 1],)))
    return entries


def param_layout(config: NetConfig):
    """Ordered (name, shape) pairs covering every learnable scalar once."""
    c = config
    entries = []
    entries += _mlp_layout("pixel", (c.feature_channels, c.pixel_width, c.pixel_width))
    entries += _mlp_layout("embed", (c.embed_in_dim, *c.embed_widths))
    if c.fusion == "attention":
        d = c.embed_dim
        entries.append(("attn.wq", (d, c.attention_dim)))
        entries.append(("attn.wk", (d, c.attention_dim)))
        entries.append(("attn.wv", (d, d)))
    entries += _mlp_layout("occ", (c.embed_dim, *c.head_widths, 1))
    entries += _mlp_layout("skin", (c.embed_dim, *c.head_widths, c.n_joints))
    return tuple(entries)


@dataclass
class NetParams:
    """All weights as one flat float64 vector plus a named layout map."""

    vector: np.ndarray
    layout: tuple

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        total = sum(int(np.prod(shape)) for _, shape in self.layout)
        if total != self.vector.size:
            raise ValueError("layout does not cover the parameter vector")
        offsets = {}
        pos = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            offsets[name] = (pos, shape)
            pos += n
        self._offsets = offsets

    def view(self, name):
        pos, shape = self._offsets[name]
        return self.vector[pos: pos + int(np.prod(shape))].reshape(shape)

    def views(self):
        return {name: self.view(name) for name, _ in self.layout}

    def copy(self):
        return NetParams(self.vector.copy(), self.layout)


def init_params(config: NetConfig, seed: int = 0) -> NetParams:
    """He-style seeded initialization, biases zero."""
    layout = param_layout(config)
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in layout:
        if name.endswith(tuple(f"b{i}" for i in range(10))):
            chunks.append(np.zeros(int(np.prod(shape))))
        else:
            fan_in = shape[0]
            std = np.sqrt(2.0 / fan_in) if ".w" in name else np.sqrt(1.0 / fan_in)
            if name.startswith("attn."):
                std = np.sqrt(1.0 / fan_in)
            chunks.append(rng.normal(0.0, std, int(np.prod(shape))))
    return NetParams(np.concatenate(chunks), layout)


def zero_gradients(params: NetParams):
    return NetParams(np.zeros_like(params.vector), params.layout)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def positional_encoding(p, n_frequencies: int) -> np.ndarray:
    """[p, sin(2^l pi p), cos(2^l pi p) for l < L], componentwise."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    p = p.reshape(-1, 3)
    parts = [p]
    for level in range(n_frequencies):
        arg = (2.0 ** level) * np.pi * p
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    out = np.concatenate(parts, axis=1)
    return out[0] if single else out


def bilinear_sample_batch(image, uv) -> np.ndarray:
    """Bilinear lookup at (P, 2) texel coords; zero outside [0,W-1]x[0,H-1]."""
    h, w = image.shape[:2]
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    u = uv[:, 0]
    v = uv[:, 1]
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.clip(u, 0, w - 1)
    vc = np.clip(v, 0, h - 1)
    x0 = np.minimum(np.floor(uc).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(vc).astype(np.int64), h - 2)
    fx = (uc - x0)[:, None]
    fy = (vc - y0)[:, None]
    img = image.reshape(h, w, -1)
    c00 = img[y0, x0]
    c10 = img[y0, x0 + 1]
    c01 = img[y0 + 1, x0]
    c11 = img[y0 + 1, x0 + 1]
    out = (c00 + fx * (c10 - c00)) * (1.0 - fy) + (c01 + fx * (c11 - c01)) * fy
    out[~inside] = 0.0
    return out


def bilinear_sample(image, uv) -> np.ndarray:
    """Single pixel-aligned feature lookup (C-vector)."""
    return bilinear_sample_batch(image, np.asarray(uv).reshape(1, 2))[0]


def bilinear_sample_grad_uv(image, uv):
    """Piecewise gradient of the sampled C-vector w.r.t. (u, v)."""
    h, w = image.shape[:2]
    u, v = float(uv[0]), float(uv[1])
    if not (0 <= u <= w - 1 and 0 <= v <= h - 1):
        c = image.reshape(h, w, -1).shape[2]
        return np.zeros(c), np.zeros(c)
    x0 = min(int(np.floor(u)), w - 2)
    y0 = min(int(np.floor(v)), h - 2)
    fx = u - x0
    fy = v - y0
    img = image.reshape(h, w, -1)
    c00, c10 = img[y0, x0], img[y0, x0 + 1]
    c01, c11 = img[y0 + 1, x0], img[y0 + 1, x0 + 1]
    du = (c10 - c00) * (1.0 - fy) + (c11 - c01) * fy
    dv = (c01 + fx * (c11 - c01)) - (c00 + fx * (c10 - c00))
    return du, dv


def fuse_average(embeddings) -> np.ndarray:
    """Arithmetic mean over the frame axis."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim == 2:
        e = e[None]
    if e.shape[1] == 0:
        raise ValueError("no frames")
    out = e.mean(axis=1)
    return out[0] if np.asarray(embeddings).ndim == 2 else out


def _softmax(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def fuse_attention(embeddings, w_q, w_k, w_v):
    """Mean-query dot-product attention over frames.

    scores_i = (mean_j W_q e_j) . (W_k e_i) / sqrt(d_k); the softmax weights
    mix the value projections W_v e_i.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    single = e.ndim == 2
    if single:
        e = e[None]
    if e.shape[1] == 0:
        raise ValueError("no frames")
    q = e @ w_q
    k = e @ w_k
    v = e @ w_v
    qbar = q.mean(axis=1)
    scores = np.einsum("bna,ba->bn", k, qbar) / np.sqrt(w_q.shape[1])
    weights = _softmax(scores, axis=1)
    fused = np.einsum("bn,bnd->bd", weights, v)
    cache = (e, q, k, v, qbar, weights)
    if single:
        return fused[0], weights[0], cache
    return fused, weights, cache


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PointQuery:
    """One canonical query: position, per-frame features, surface normal."""

    position: np.ndarray        # (3,)
    features: np.ndarray        # (N, C)
    normal: np.ndarray          # (3,)
    warped: np.ndarray | None = None  # (N, 3) posed positions, informational


def _mlp_forward(prefix, x, params, n_layers, final_relu):
    acts = [x]
    for i in range(n_layers):
        z = acts[-1] @ params.view(f"{prefix}.w{i}") + params.view(f"{prefix}.b{i}")
        if i < n_layers - 1 or final_relu:
            z = np.maximum(z, 0.0)
        acts.append(z)
    return acts


def _mlp_backward(prefix, acts, d_out, params, grads, n_layers, final_relu):
    d = d_out
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1 or final_relu:
            d = d * (acts[i + 1] > 0.0)
        grads[f"{prefix}.w{i}"] += acts[i].T @ d
        grads[f"{prefix}.b{i}"] += d.sum(axis=0)
        d = d @ params.view(f"{prefix}.w{i}").T
    return d


def forward_batch(pe, normals, feats, params: NetParams, config: NetConfig):
    """Batched forward pass.

    pe: (B, 3+6L) encoded positions; normals: (B, 3); feats: (B, N, C).
    Returns (occupancy (B,), skinning (B, J), cache for backward).
    """
    b, n, c = feats.shape
    if c != config.feature_channels:
        raise ValueError(f"feature dim {c} != configured {config.feature_channels} (pixel transform)")
    if pe.shape[1] != config.pe_dim:
        raise ValueError(f"encoding dim {pe.shape[1]} != configured {config.pe_dim} (embed input)")
    flat = feats.reshape(b * n, c)
    pix_acts = _mlp_forward("pixel", flat, params, 2, final_relu=False)
    pix_out = pix_acts[-1]

    pe_rep = np.repeat(pe, n, axis=0)
    nrm_rep = np.repeat(normals, n, axis=0)
    x = np.concatenate([pix_out, pe_rep, nrm_rep], axis=1)
    n_embed = len(config.embed_widths)
    embed_acts = _mlp_forward("embed", x, params, n_embed, final_relu=True)
    e = embed_acts[-1].reshape(b, n, config.embed_dim)

    if config.fusion == "attention":
        fused, _, attn_cache = fuse_attention(e, params.view("attn.wq"),
                                              params.view("attn.wk"),
                                              params.view("attn.wv"))
    else:
        fused = e.mean(axis=1)
        attn_cache = None

    n_head = len(config.head_widths) + 1
    occ_acts = _mlp_forward("occ", fused, params, n_head, final_relu=False)
    skin_acts = _mlp_forward("skin", fused, params, n_head, final_relu=False)
    occ_logit = occ_acts[-1][:, 0]
    occ = _sigmoid(occ_logit)
    skin = _softmax(skin_acts[-1], axis=1)

    cache = {
        "shape": (b, n),
        "pix_acts": pix_acts,
        "x": x, "embed_acts": embed_acts, "e": e,
        "attn": attn_cache, "fused": fused,
        "occ_acts": occ_acts, "skin_acts": skin_acts,
        "occ": occ, "skin": skin,
    }
    return occ, skin, cache


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(query: PointQuery, params: NetParams, config: NetConfig):
    """Single query convenience wrapper: (occupancy, skinning simplex)."""
    pe = positional_encoding(query.position, config.pe_frequencies)[None, :]
    nrm = np.asarray(query.normal, dtype=np.float64).reshape(1, 3)
    feats = np.asarray(query.features, dtype=np.float64)[None, :, :]
    occ, skin, _ = forward_batch(pe, nrm, feats, params, config)
    return float(occ[0]), skin[0]


def backward_batch(cache, params: NetParams, config: NetConfig,
                   d_occ_logit, d_skin_logit) -> NetParams:
    """Exact reverse pass; returns gradients aligned with the params layout."""
    b, n = cache["shape"]
    grads = zero_gradients(params)
    gv = grads.views()

    n_head = len(config.head_widths) + 1
    d_fused = _mlp_backward("occ", cache["occ_acts"], d_occ_logit[:, None],
                            params, gv, n_head, final_relu=False)
    d_fused = d_fused + _mlp_backward("skin", cache["skin_acts"], d_skin_logit,
                                      params, gv, n_head, final_relu=False)

    e = cache["e"]
    if config.fusion == "attention":
        _, q, k, v, qbar, weights = cache["attn"]
        w_q = params.view("attn.wq")
        w_k = params.view("attn.wk")
        w_v = params.view("attn.wv")
        sq = np.sqrt(w_q.shape[1])
        d_v = weights[:, :, None] * d_fused[:, None, :]
        d_w = np.einsum("bd,bnd->bn", d_fused, v)
        d_scores = weights * (d_w - (weights * d_w).sum(axis=1, keepdims=True))
        d_qbar = np.einsum("bn,bna->ba", d_scores, k) / sq
        d_k = d_scores[:, :, None] * qbar[:, None, :] / sq
        d_q = np.broadcast_to(d_qbar[:, None, :] / n, q.shape)
        e_flat = e.reshape(b * n, -1)
        gv["attn.wv"] += e_flat.T @ d_v.reshape(b * n, -1)
        gv["attn.wq"] += e_flat.T @ d_q.reshape(b * n, -1)
        gv["attn.wk"] += e_flat.T @ d_k.reshape(b * n, -1)
        d_e = d_v @ w_v.T + d_q @ w_q.T + d_k @ w_k.T
    else:
        d_e = np.broadcast_to(d_fused[:, None, :] / n, e.shape)

    n_embed = len(config.embed_widths)
    d_x = _mlp_backward("embed", cache["embed_acts"], d_e.reshape(b * n, -1),
                        params, gv, n_embed, final_relu=True)

    p = config.pixel_width
    d_pix_out = d_x[:, :p]
    _mlp_backward("pixel", cache["pix_acts"], d_pix_out, params, gv, 2,
                  final_relu=False)
    return grads


# ---------------------------------------------------------------------------
# Loss with online hard example mining
# ---------------------------------------------------------------------------

def loss(occ, skin, occ_labels, skin_labels, ohem_ratio: float,
         lambda_skin: float = 0.5, occupancy_loss: str = "bce"):
    """Per-point BCE (or MSE) + weighted cross-entropy, mined to the top share.

    Returns (total, per_point, kept_indices); kept indices are ascending, and
    ohem_ratio=1 keeps every point so the total is the plain mean in natural
    summation order.
    """
    if not (0.0 < ohem_ratio <= 1.0):
        raise ValueError("ohem ratio must lie in (0, 1]")
    occ = np.asarray(occ, dtype=np.float64)
    eps = 1e-12
    if occupancy_loss == "bce":
        occ_term = -(occ_labels * np.log(np.maximum(occ, eps))
                     + (1.0 - occ_labels) * np.log(np.maximum(1.0 - occ, eps)))
    else:
        occ_term = (occ - occ_labels) ** 2
    ce = -(skin_labels * np.log(np.maximum(skin, eps))).sum(axis=1)
    per_point = occ_term + lambda_skin * ce

    n = len(per_point)
    m = int(np.ceil(ohem_ratio * n))
    if m >= n:
        kept = np.arange(n)
    else:
        order = np.argsort(-per_point, kind="stable")
        kept = np.sort(order[:m])
    total = float(per_point[kept].mean())
    return total, per_point, kept


def loss_logit_gradients(occ, skin, occ_labels, skin_labels, kept,
                         lambda_skin: float = 0.5, occupancy_loss: str = "bce"):
    """d(total)/d(logits); points outside the kept set contribute zero."""
    b = len(occ)
    j = skin.shape[1]
    d_occ = np.zeros(b)
    d_skin = np.zeros((b, j))
    inv_m = 1.0 / len(kept)
    if occupancy_loss == "bce":
        d_occ[kept] = (occ[kept] - occ_labels[kept]) * inv_m
    else:
        s = occ[kept]
        d_occ[kept] = 2.0 * (s - occ_labels[kept]) * s * (1.0 - s) * inv_m
    d_skin[kept] = lambda_skin * (skin[kept] - skin_labels[kept]) * inv_m
    return d_occ, d_skin


def loss_and_gradient(pe, normals, feats, occ_labels, skin_labels,
                      params: NetParams, config: NetConfig, ohem_ratio: float):
    """Full forward + mined loss + exact parameter gradient."""
    occ, skin, cache = forward_batch(pe, normals, feats, params, config)
    total, per_point, kept = loss(occ, skin, occ_labels, skin_labels, ohem_ratio,
                                  config.lambda_skin, config.occupancy_loss)
    d_occ, d_skin = loss_logit_gradients(occ, skin, occ_labels, skin_labels, kept,
                                         config.lambda_skin, config.occupancy_loss)
    grads = backward_batch(cache, params, config, d_occ, d_skin)
    return total, grads, {"occ": occ, "skin": skin, "per_point": per_point, "kept": kept}


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Standard Adam over the flat parameter vector."""

    def __init__(self, n_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, vector, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return vector - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Checkpoint io
# ---------------------------------------------------------------------------

def save_params(path, params: NetParams):
    """AVP1: magic, entry count, per-entry name + scalar count, f64 LE data."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(params.layout)))
        for name, shape in params.layout:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", int(np.prod(shape))))
        fh.write(params.vector.astype("<f8").tobytes())


def load_params(path) -> NetParams:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic in {path}")
        (n_entries,) = struct.unpack("<I", fh.read(4))
        entries = []
        for _ in range(n_entries):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (count,) = struct.unpack("<I", fh.read(4))
            entries.append((name, count))
        total = sum(c for _, c in entries)
        vec = np.frombuffer(fh.read(8 * total), dtype="<f8")
        if vec.size != total:
            raise ValueError(f"truncated checkpoint {path}")
    config = config_from_entries(entries)
    layout = param_layout(config)
    if [(n, int(np.prod(s))) for n, s in layout] != entries:
        raise ValueError("checkpoint layout does not match a known architecture")
    return NetParams(vec.copy(), layout), config


def config_from_entries(entries) -> NetConfig:
    """Recover the architecture from checkpoint layout names and counts."""
    counts = dict(entries)
    pixel_width = counts["pixel.b0"]
    feature_channels = counts["pixel.w0"] // pixel_width
    embed_widths = []
    i = 0
    while f"embed.b{i}" in counts:
        embed_widths.append(counts[f"embed.b{i}"])
        i += 1
    embed_in = counts["embed.w0"] // embed_widths[0]
    pe_frequencies = (embed_in - pixel_width - 3 - 3) // 6
    fusion = "attention" if "attn.wq" in counts else "average"
    attention_dim = counts.get("attn.wq", 16 * embed_widths[-1]) // embed_widths[-1]
    head_widths = []
    i = 0
    while f"occ.b{i}" in counts:
        head_widths.append(counts[f"occ.b{i}"])
        i += 1
    n_joints = counts[f"skin.b{len(head_widths) - 1}"]
    return NetConfig(pe_frequencies=pe_frequencies,
                     feature_channels=feature_channels,
                     pixel_width=pixel_width,
                     embed_widths=tuple(embed_widths),
                     fusion=fusion,
                     attention_dim=attention_dim,
                     head_widths=tuple(head_widths[:-1]),
                     n_joints=n_joints)

"""ResGrouped-MLP regressor written directly in NumPy.

Layout for an input of ``S`` scales x ``F`` features x ``K`` coefficients:

* one encoder per (scale, feature) group: ``K -> H`` projection + SiLU, then a
  residual block ``SiLU(h + BN(W2 SiLU(BN(W1 h))))``;
* per scale, the ``F`` encoder outputs are concatenated and gated by
  ``sigmoid(MLP(x))`` with a bottleneck of ratio ``r``;
* the ``S`` gated scale vectors are concatenated and gated the same way;
* a two-layer head with SiLU maps to one score.

Gradients are derived by hand; see ``backward``.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .diff import PreprocessStats, apply_preprocess, fit_zscore
from .errors import (
    ChecksumError,
    InsufficientBatch,
    InsufficientData,
    ModelStatsMismatch,
    ShapeError,
    UnsupportedVersion,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
VAR_FLOOR = 1e-5
PLCC_EPS = 1e-8

MODEL_MAGIC = b"PCQAMDL\x00"
MODEL_VERSION = 1


@dataclass(frozen=True)
class NetworkDims:
    n_scales: int = 3
    n_features: int = 3
    k: int = 34
    hidden: int = 64
    head: int = 128
    reduction: int = 4

    @property
    def n_groups(self) -> int:
        return self.n_scales * self.n_features

    @property
    def input_dim(self) -> int:
        return self.n_groups * self.k

    @property
    def scale_dim(self) -> int:
        return self.n_features * self.hidden

    @property
    def global_dim(self) -> int:
        return self.n_groups * self.hidden


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 32
    lr0: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 1e-2
    lambda1: float = 1.0
    lambda2: float = 0.5
    margin: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")


@dataclass
class LossBreakdown:
    total: float
    mse: float
    plcc_loss: float
    rank_loss: float


class ModelParams:
    """Trainable tensors in ``weights`` and batch-norm running statistics in ``buffers``."""

    def __init__(self, dims: NetworkDims, weights: dict, buffers: dict, stats_hash: str = ""):
        self.dims = dims
        self.weights = weights
        self.buffers = buffers
        self.stats_hash = stats_hash

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.dims,
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.stats_hash,
        )

    def names(self):
        return sorted(self.weights)


def is_decayed(name: str) -> bool:
    """Only affine weight matrices take weight decay; biases and BN scale/shift do not."""
    return name.split("_")[-1].startswith("w")


def _shapes(d: NetworkDims) -> dict:
    G, S, H = d.n_groups, d.n_scales, d.hidden
    sd, sb = d.scale_dim, d.scale_dim // d.reduction
    gd, gb = d.global_dim, d.global_dim // d.reduction
    return {
        "enc_w0": (G, d.k, H), "enc_b0": (G, H),
        "enc_w1": (G, H, H), "enc_b1": (G, H),
        "bn1_gamma": (G, H), "bn1_beta": (G, H),
        "enc_w2": (G, H, H), "enc_b2": (G, H),
        "bn2_gamma": (G, H), "bn2_beta": (G, H),
        "sa_w1": (S, sd, sb), "sa_b1": (S, sb),
        "sa_w2": (S, sb, sd), "sa_b2": (S, sd),
        "ga_w1": (gd, gb), "ga_b1": (gb,),
        "ga_w2": (gb, gd), "ga_b2": (gd,),
        "head_w1": (gd, d.head), "head_b1": (d.head,),
        "head_w2": (d.head, 1), "head_b2": (1,),
    }


def init_model(seed: int, dims: NetworkDims = NetworkDims()) -> ModelParams:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases, identity batch norm."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in _shapes(dims).items():
        if name.endswith("gamma"):
            weights[name] = np.ones(shape)
        elif is_decayed(name):
            bound = math.sqrt(1.0 / shape[-2])
            weights[name] = rng.uniform(-bound, bound, size=shape)
        else:
            weights[name] = np.zeros(shape)
    G, H = dims.n_groups, dims.hidden
    buffers = {
        "bn1_mean": np.zeros((G, H)), "bn1_var": np.ones((G, H)),
        "bn2_mean": np.zeros((G, H)), "bn2_var": np.ones((G, H)),
    }
    return ModelParams(dims, weights, buffers)


# -- activations -------------------------------------------------------------


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _mT(a):
    return np.swapaxes(a, -1, -2)


# -- forward -----------------------------------------------------------------


def _bn_forward(z, gamma, beta, mean, var, train):
    if train:
        mu = z.mean(axis=1, keepdims=True)
        v = z.var(axis=1, keepdims=True)
    else:
        mu, v = mean[:, None, :], var[:, None, :]
    inv = 1.0 / np.sqrt(v + BN_EPS)
    xhat = (z - mu) * inv
    return gamma[:, None, :] * xhat + beta[:, None, :], (xhat, inv, mu, v)


def _gate_forward(x, w1, b1, w2, b2):
    q = x @ w1 + b1[..., None, :] if w1.ndim == 3 else x @ w1 + b1
    qa = silu(q)
    g = qa @ w2 + b2[..., None, :] if w2.ndim == 3 else qa @ w2 + b2
    s = sigmoid(g)
    return x * s, (x, q, qa, s)


def forward(params: ModelParams, inputs, train: bool = False, update_running: bool = True):
    """Return ``(predictions, cache)``.

    Train mode normalises with batch statistics and, unless ``update_running``
    is false, folds them into the running statistics. Eval mode uses the
    running statistics, so each prediction depends only on its own row.
    """
    d, W = params.dims, params.weights
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != d.input_dim:
        raise ShapeError(f"expected input of width {d.input_dim}, got shape {x.shape}")
    if train and len(x) < 2:
        raise InsufficientBatch("train-mode batch norm needs at least two rows")
    B, S, F, H, G = len(x), d.n_scales, d.n_features, d.hidden, d.n_groups
    buf = params.buffers

    xg = x.reshape(B, G, d.k).transpose(1, 0, 2)
    z0 = xg @ W["enc_w0"] + W["enc_b0"][:, None, :]
    h0 = silu(z0)
    z1 = h0 @ W["enc_w1"] + W["enc_b1"][:, None, :]
    n1, bn1 = _bn_forward(z1, W["bn1_gamma"], W["bn1_beta"], buf["bn1_mean"], buf["bn1_var"], train)
    a1 = silu(n1)
    z2 = a1 @ W["enc_w2"] + W["enc_b2"][:, None, :]
    n2, bn2 = _bn_forward(z2, W["bn2_gamma"], W["bn2_beta"], buf["bn2_mean"], buf["bn2_var"], train)
    r = h0 + n2
    e = silu(r)

    fs = e.reshape(S, F, B, H).transpose(0, 2, 1, 3).reshape(S, B, F * H)
    fs_gated, sgate = _gate_forward(fs, W["sa_w1"], W["sa_b1"], W["sa_w2"], W["sa_b2"])
    gcat = fs_gated.transpose(1, 0, 2).reshape(B, S * F * H)
    g_gated, ggate = _gate_forward(gcat, W["ga_w1"], W["ga_b1"], W["ga_w2"], W["ga_b2"])

    hh = g_gated @ W["head_w1"] + W["head_b1"]
    ha = silu(hh)
    y = (ha @ W["head_w2"] + W["head_b2"])[:, 0]

    if train and update_running:
        for name, (_, _, mu, v) in (("bn1", bn1), ("bn2", bn2)):
            unbiased = v[:, 0, :] * B / (B - 1)
            buf[f"{name}_mean"] = (1 - BN_MOMENTUM) * buf[f"{name}_mean"] + BN_MOMENTUM * mu[:, 0, :]
            buf[f"{name}_var"] = np.maximum(
                (1 - BN_MOMENTUM) * buf[f"{name}_var"] + BN_MOMENTUM * unbiased, VAR_FLOOR
            )

    cache = dict(
        xg=xg, z0=z0, h0=h0, z1=z1, n1=n1, bn1=bn1, a1=a1, z2=z2, bn2=bn2, r=r,
        sgate=sgate, ggate=ggate, g_gated=g_gated, hh=hh, ha=ha, train=train,
    )
    return y, cache


# -- loss --------------------------------------------------------------------


def _plcc_terms(pred, target):
    pc = pred - pred.mean()
    tc = target - target.mean()
    vp, vt = np.mean(pc * pc), np.mean(tc * tc)
    return pc, tc, vp, vt


def hybrid_loss(pred, target, lambda1=1.0, lambda2=0.5, margin=0.05) -> LossBreakdown:
    loss, _ = hybrid_loss_and_grad(pred, target, lambda1, lambda2, margin)
    return loss


def hybrid_loss_and_grad(pred, target, lambda1=1.0, lambda2=0.5, margin=0.05):
    """MSE + lambda1 * (1 - PLCC) + lambda2 * pairwise margin ranking, with d/dpred."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    B = len(p)
    if B < 2 or len(t) != B:
        raise InsufficientBatch("hybrid loss needs at least two (pred, target) pairs")

    mse = float(np.mean((p - t) ** 2))
    grad = 2.0 * (p - t) / B

    pc, tc, vp, vt = _plcc_terms(p, t)
    if vp < PLCC_EPS or vt < PLCC_EPS:
        plcc_loss = 1.0
    else:
        sp, st = math.sqrt(np.sum(pc * pc)), math.sqrt(np.sum(tc * tc))
        rho = float(np.sum(pc * tc) / (sp * st))
        plcc_loss = 1.0 - rho
        grad = grad - lambda1 * (tc / (sp * st) - rho * pc / (sp * sp))

    i, j = np.nonzero(t[:, None] > t[None, :])
    if len(i):
        hinge = margin - (p[i] - p[j])
        active = hinge > 0
        rank_loss = float(np.sum(np.where(active, hinge, 0.0)) / len(i))
        w = active / len(i)
        grad = grad - lambda2 * np.bincount(i, weights=w, minlength=B)
        grad = grad + lambda2 * np.bincount(j, weights=w, minlength=B)
    else:
        rank_loss = 0.0

    total = mse + lambda1 * plcc_loss + lambda2 * rank_loss
    return LossBreakdown(total, mse, plcc_loss, rank_loss), grad


# -- backward ----------------------------------------------------------------


def _bn_backward(dout, gamma, bn):
    xhat, inv, _, _ = bn
    B = dout.shape[1]
    dgamma = np.sum(dout * xhat, axis=1)
    dbeta = np.sum(dout, axis=1)
    dxhat = dout * gamma[:, None, :]
    dz = (inv / B) * (
        B * dxhat
        - np.sum(dxhat, axis=1, keepdims=True)
        - xhat * np.sum(dxhat * xhat, axis=1, keepdims=True)
    )
    return dz, dgamma, dbeta


def _gate_backward(dout, w1, w2, cache):
    x, q, qa, s = cache
    dx = dout * s
    dg = dout * x * s * (1.0 - s)
    dw2 = _mT(qa) @ dg
    db2 = dg.sum(axis=-2)
    dq = (dg @ _mT(w2)) * silu_grad(q)
    dw1 = _mT(x) @ dq
    db1 = dq.sum(axis=-2)
    dx = dx + dq @ _mT(w1)
    return dx, dw1, db1, dw2, db2


def backward(params: ModelParams, cache: dict, dpred) -> dict:
    """Gradients of the loss w.r.t. every weight, given dLoss/dpred from a train-mode forward."""
    if not cache["train"]:
        raise ValueError("backward requires a train-mode forward cache")
    d, W, c = params.dims, params.weights, cache
    S, F, H, G = d.n_scales, d.n_features, d.hidden, d.n_groups
    dy = np.asarray(dpred, dtype=np.float64)[:, None]
    B = len(dy)
    grads = {}

    grads["head_w2"] = c["ha"].T @ dy
    grads["head_b2"] = dy.sum(axis=0)
    dhh = (dy @ W["head_w2"].T) * silu_grad(c["hh"])
    grads["head_w1"] = c["g_gated"].T @ dhh
    grads["head_b1"] = dhh.sum(axis=0)
    dg_gated = dhh @ W["head_w1"].T

    dgcat, grads["ga_w1"], grads["ga_b1"], grads["ga_w2"], grads["ga_b2"] = _gate_backward(
        dg_gated, W["ga_w1"], W["ga_w2"], c["ggate"]
    )
    dfs_gated = dgcat.reshape(B, S, F * H).transpose(1, 0, 2)
    dfs, grads["sa_w1"], grads["sa_b1"], grads["sa_w2"], grads["sa_b2"] = _gate_backward(
        dfs_gated, W["sa_w1"], W["sa_w2"], c["sgate"]
    )
    de = dfs.reshape(S, B, F, H).transpose(0, 2, 1, 3).reshape(G, B, H)

    dr = de * silu_grad(c["r"])
    dz2, grads["bn2_gamma"], grads["bn2_beta"] = _bn_backward(dr, W["bn2_gamma"], c["bn2"])
    grads["enc_w2"] = _mT(c["a1"]) @ dz2
    grads["enc_b2"] = dz2.sum(axis=1)
    dn1 = (dz2 @ _mT(W["enc_w2"])) * silu_grad(c["n1"])
    dz1, grads["bn1_gamma"], grads["bn1_beta"] = _bn_backward(dn1, W["bn1_gamma"], c["bn1"])
    grads["enc_w1"] = _mT(c["h0"]) @ dz1
    grads["enc_b1"] = dz1.sum(axis=1)
    dh0 = dr + dz1 @ _mT(W["enc_w1"])
    dz0 = dh0 * silu_grad(c["z0"])
    grads["enc_w0"] = _mT(c["xg"]) @ dz0
    grads["enc_b0"] = dz0.sum(axis=1)
    return grads


# -- optimisation ------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: ModelParams, grads: dict, state: AdamState, lr: float,
               weight_decay: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """In-place AdamW update with decoupled decay on weight matrices only."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name in params.names():
        theta, g = params.weights[name], grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        if weight_decay and is_decayed(name):
            theta *= 1.0 - lr * weight_decay
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    if config.epochs == 1:
        return config.lr0
    frac = epoch / (config.epochs - 1)
    return config.lr_min + 0.5 * (config.lr0 - config.lr_min) * (1.0 + math.cos(math.pi * frac))


# -- training / inference ----------------------------------------------------


@dataclass
class HistoryRow:
    epoch: int
    lr: float
    total: float
    mse: float
    plcc_loss: float
    rank_loss: float


def train(rows, targets, config: TrainConfig, dims: NetworkDims | None = None,
          init_seed: int | None = None, shuffle_seed: int | None = None):
    """Fit preprocessing statistics and the network on ``rows``.

    Returns ``(model, stats, history)``. ``init_seed`` and ``shuffle_seed``
    default to values derived from ``config.seed``.
    """
    from .seeds import derive_seed

    X = np.asarray(rows, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError("rows must be a matrix with one target per row")
    if len(X) < 2:
        raise InsufficientData("training needs at least two rows")
    if not np.all(np.isfinite(y)):
        raise InsufficientData("targets must be finite")
    if dims is None:
        dims = NetworkDims()
    if X.shape[1] != dims.input_dim:
        raise ShapeError(f"rows have width {X.shape[1]}, network expects {dims.input_dim}")

    stats = fit_zscore(X)
    Z = apply_preprocess(X, stats)
    model = init_model(derive_seed(config.seed, "init") if init_seed is None else init_seed, dims)
    model.stats_hash = stats.digest()
    rng = np.random.default_rng(derive_seed(config.seed, "shuffle") if shuffle_seed is None else shuffle_seed)
    state = AdamState()
    batch = min(config.batch_size, len(X))
    history = []
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config)
        perm = rng.permutation(len(X))
        parts = []
        for start in range(0, len(X), batch):
            idx = perm[start : start + batch]
            if len(idx) < 2:
                continue
            pred, cache = forward(model, Z[idx], train=True)
            loss, dpred = hybrid_loss_and_grad(pred, y[idx], config.lambda1, config.lambda2, config.margin)
            grads = backward(model, cache, dpred)
            adamw_step(model, grads, state, lr, config.weight_decay)
            parts.append((loss, len(idx)))
        n = sum(w for _, w in parts)
        avg = {f: sum(getattr(l, f) * w for l, w in parts) / n for f in ("total", "mse", "plcc_loss", "rank_loss")}
        history.append(HistoryRow(epoch, lr, **avg))
    return model, stats, history


def predict(model: ModelParams, stats: PreprocessStats, v) -> np.ndarray | float:
    """Eval-mode score(s) for one diff vector or a matrix of them."""
    if model.stats_hash and model.stats_hash != stats.digest():
        raise ModelStatsMismatch("preprocessing statistics do not belong to this model")
    x = apply_preprocess(v, stats)
    single = x.ndim == 1
    pred, _ = forward(model, np.atleast_2d(x), train=False)
    return float(pred[0]) if single else pred


# -- persistence -------------------------------------------------------------


def save_model(model: ModelParams, stats: PreprocessStats, path) -> None:
    if stats.dim != model.dims.input_dim:
        raise ShapeError("stats width does not match the network input")
    names = model.names()
    bufs = sorted(model.buffers)
    meta = {
        "dims": asdict(model.dims),
        "weights": [[n, list(model.weights[n].shape)] for n in names],
        "buffers": [[n, list(model.buffers[n].shape)] for n in bufs],
        "stats_hash": stats.digest(),
    }
    header = json.dumps(meta, sort_keys=True).encode()
    payload = b"".join(
        [np.ascontiguousarray(stats.mean, "<f8").tobytes(), np.ascontiguousarray(stats.std, "<f8").tobytes()]
        + [np.ascontiguousarray(model.weights[n], "<f8").tobytes() for n in names]
        + [np.ascontiguousarray(model.buffers[n], "<f8").tobytes() for n in bufs]
    )
    body = MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(header)) + header + payload
    with open(path, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())


def load_model(path, expected_dims: NetworkDims | None = None):
    """Return ``(model, stats)``; raises ChecksumError on corruption or truncation."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MODEL_MAGIC) + 8 + 32 or not blob.startswith(MODEL_MAGIC):
        raise ChecksumError("not a model file or truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("model file checksum mismatch")
    version, hlen = struct.unpack_from("<II", body, len(MODEL_MAGIC))
    if version != MODEL_VERSION:
        raise UnsupportedVersion(f"model file version {version}, expected {MODEL_VERSION}")
    off = len(MODEL_MAGIC) + 8
    meta = json.loads(body[off : off + hlen])
    off += hlen
    dims = NetworkDims(**meta["dims"])
    if expected_dims is not None and dims != expected_dims:
        raise ShapeError(f"model dims {dims} do not match runtime dims {expected_dims}")

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(body, "<f8", count, off).reshape(shape).astype(np.float64)
        off += 8 * count
        return arr

    mean, std = take((dims.input_dim,)), take((dims.input_dim,))
    weights = {n: take(tuple(s)) for n, s in meta["weights"]}
    buffers = {n: take(tuple(s)) for n, s in meta["buffers"]}
    if off != len(body):
        raise ChecksumError("model payload length mismatch")
    stats = PreprocessStats(mean, std)
    if stats.digest() != meta["stats_hash"]:
        raise ModelStatsMismatch("stored statistics do not match the recorded hash")
    return ModelParams(dims, weights, buffers, meta["stats_hash"]), stats

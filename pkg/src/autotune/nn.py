"""Stacked GRU regressor with hand-derived BPTT gradients and Adam."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .seeding import GRADCHECK, INIT, rng_for

GATES = ("z", "r", "h")
LAYER_PARAMS = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
CLIP_NORM = 5.0

CKPT_MAGIC = b"AUTC"
CKPT_VERSION = 1


class DimensionError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    """Backward was called with a cache from a different model state."""


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient; ``checkpoint`` is the last good state, if known."""

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class UndefinedLossError(ValueError):
    pass


class CheckpointError(Exception):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 536
    hidden_sizes: tuple = (128, 128)
    hidden_range: tuple = (32, 512)
    layer_range: tuple = (1, 4)

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        lo, hi = self.layer_range
        if not lo <= len(self.hidden_sizes) <= hi:
            raise ValueError(f"{len(self.hidden_sizes)} layers outside [{lo}, {hi}]")
        lo, hi = self.hidden_range
        for h in self.hidden_sizes:
            if not lo <= h <= hi:
                raise ValueError(f"hidden size {h} outside [{lo}, {hi}]")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")

    @property
    def n_layers(self) -> int:
        return len(self.hidden_sizes)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_cell_forward(x, h_prev, p: dict) -> np.ndarray:
    """One GRU step; ``p`` maps ``W_z ... b_h`` to arrays.

    Works on single vectors or on a leading batch axis.
    """
    x = np.asarray(x)
    h_prev = np.asarray(h_prev)
    hidden, inp = p["W_z"].shape
    if x.shape[-1] != inp or h_prev.shape[-1] != hidden:
        raise DimensionError(f"cell expects input {inp} and hidden {hidden}, got {x.shape} and {h_prev.shape}")
    z = sigmoid(x @ p["W_z"].T + h_prev @ p["U_z"].T + p["b_z"])
    r = sigmoid(x @ p["W_r"].T + h_prev @ p["U_r"].T + p["b_r"])
    cand = np.tanh(x @ p["W_h"].T + (r * h_prev) @ p["U_h"].T + p["b_h"])
    return (1.0 - z) * h_prev + z * cand


class GruModel:
    """Stacked GRU with a linear scalar head.

    Parameters live in ``self.params`` under names like ``"0.W_z"`` and
    ``"w_out"``; :meth:`param_names` gives the fixed serialization order.
    """

    def __init__(self, config: ModelConfig, params: dict | None = None, dtype=np.float64):
        self.config = config
        self.version = 0
        if params is None:
            params = {name: np.zeros(shape, dtype=dtype) for name, shape in self.param_shapes().items()}
        self.params = params
        self._check_shapes()

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        fan_in = self.config.input_dim
        for i, h in enumerate(self.config.hidden_sizes):
            for g in GATES:
                shapes[f"{i}.W_{g}"] = (h, fan_in)
            for g in GATES:
                shapes[f"{i}.U_{g}"] = (h, h)
            for g in GATES:
                shapes[f"{i}.b_{g}"] = (h,)
            fan_in = h
        shapes["w_out"] = (fan_in,)
        shapes["b_out"] = (1,)
        return shapes

    def param_names(self) -> list[str]:
        return list(self.param_shapes())

    def _check_shapes(self):
        for name, shape in self.param_shapes().items():
            if name not in self.params or self.params[name].shape != shape:
                raise DimensionError(f"parameter {name} missing or not of shape {shape}")

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "GruModel":
        """Glorot-uniform weights, zero biases."""
        rng = rng_for(seed, INIT)
        model = cls(config)
        for name, shape in model.param_shapes().items():
            if len(shape) == 2:
                s = np.sqrt(6.0 / (shape[0] + shape[1]))
                model.params[name] = rng.uniform(-s, s, size=shape)
            elif name == "w_out":
                s = np.sqrt(6.0 / (shape[0] + 1))
                model.params[name] = rng.uniform(-s, s, size=shape)
        return model

    def layer(self, i: int) -> dict:
        return {k: self.params[f"{i}.{k}"] for k in LAYER_PARAMS}

    def copy(self) -> "GruModel":
        m = GruModel(self.config, {k: v.copy() for k, v in self.params.items()})
        return m

    def astype(self, dtype) -> "GruModel":
        return GruModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def predict(self, features) -> np.ndarray:
        return forward_sequence(self, features)[0]


@dataclass
class ForwardCache:
    model_version: int
    model_id: int
    inputs: list = field(default_factory=list)
    h_prev: list = field(default_factory=list)
    z: list = field(default_factory=list)
    r: list = field(default_factory=list)
    cand: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    pred: np.ndarray | None = None


def forward_sequence(model: GruModel, features) -> tuple[np.ndarray, ForwardCache]:
    """Run the stack over ``features`` of shape ``(B, T, D)`` from zero state.

    Returns predictions of shape ``(B, T)`` and the activations needed for
    :func:`backward_bptt`.
    """
    x = np.asarray(features)
    if x.ndim != 3 or x.shape[2] != model.config.input_dim:
        raise DimensionError(f"expected (batch, time, {model.config.input_dim}) features, got {x.shape}")
    dtype = model.params["w_out"].dtype
    x = x.astype(dtype, copy=False)
    B, T, _ = x.shape
    cache = ForwardCache(model.version, id(model))
    for i, hidden in enumerate(model.config.hidden_sizes):
        p = model.layer(i)
        flat = x.reshape(B * T, -1)
        xz = (flat @ p["W_z"].T + p["b_z"]).reshape(B, T, hidden)
        xr = (flat @ p["W_r"].T + p["b_r"]).reshape(B, T, hidden)
        xh = (flat @ p["W_h"].T + p["b_h"]).reshape(B, T, hidden)
        h = np.zeros((B, hidden), dtype=dtype)
        hp = np.empty((B, T, hidden), dtype=dtype)
        zs = np.empty_like(hp)
        rs = np.empty_like(hp)
        cs = np.empty_like(hp)
        out = np.empty_like(hp)
        for t in range(T):
            hp[:, t] = h
            z = sigmoid(xz[:, t] + h @ p["U_z"].T)
            r = sigmoid(xr[:, t] + h @ p["U_r"].T)
            c = np.tanh(xh[:, t] + (r * h) @ p["U_h"].T)
            h = (1.0 - z) * h + z * c
            zs[:, t], rs[:, t], cs[:, t], out[:, t] = z, r, c, h
        cache.inputs.append(x)
        cache.h_prev.append(hp)
        cache.z.append(zs)
        cache.r.append(rs)
        cache.cand.append(cs)
        cache.outputs.append(out)
        x = out
    pred = x @ model.params["w_out"] + model.params["b_out"][0]
    cache.pred = pred
    return pred, cache


def _check_mask(pred, target, mask):
    pred = np.asarray(pred)
    target = np.asarray(target)
    mask = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise DimensionError(f"shape mismatch: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise UndefinedLossError("every element is masked; loss is undefined")
    return pred, target, mask, n


def _masked_mean_sq(diff, mask):
    diff = np.where(mask, diff, 0)
    return np.sum(diff * diff) / int(np.count_nonzero(mask))


def mse_loss(pred, target, mask=None) -> float:
    """Mean squared error over unmasked elements."""
    pred, target, mask, n = _check_mask(pred, target, mask)
    diff = np.where(mask, pred - target, 0.0)
    return float(np.sum(diff * diff) / n)


def backward_bptt(cache: ForwardCache, model: GruModel, target, mask=None) -> dict[str, np.ndarray]:
    """Exact gradients of :func:`mse_loss` through the unrolled sequence."""
    if cache.model_version != model.version or cache.model_id != id(model):
        raise StaleCacheError("forward cache does not belong to the current model state")
    pred, target, mask, n = _check_mask(cache.pred, target, mask)
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    dpred = np.where(mask, 2.0 * (pred - target) / n, 0.0)
    top = cache.outputs[-1]
    grads["w_out"] = np.einsum("bt,bth->h", dpred, top)
    grads["b_out"] = np.array([dpred.sum()], dtype=grads["b_out"].dtype)
    d_out = dpred[:, :, None] * model.params["w_out"]

    for i in reversed(range(model.config.n_layers)):
        p = model.layer(i)
        hp, zs, rs, cs = cache.h_prev[i], cache.z[i], cache.r[i], cache.cand[i]
        B, T, H = hp.shape
        da_z = np.empty_like(hp)
        da_r = np.empty_like(hp)
        da_h = np.empty_like(hp)
        dU = {g: np.zeros((H, H), dtype=hp.dtype) for g in GATES}
        dh_next = np.zeros((B, H), dtype=hp.dtype)
        for t in reversed(range(T)):
            dh = d_out[:, t] + dh_next
            z, r, c, h0 = zs[:, t], rs[:, t], cs[:, t], hp[:, t]
            dc = dh * z
            dz = dh * (c - h0)
            dh0 = dh * (1.0 - z)
            ah = dc * (1.0 - c * c)
            d_rh = ah @ p["U_h"]
            dr = d_rh * h0
            dh0 += d_rh * r
            az = dz * z * (1.0 - z)
            ar = dr * r * (1.0 - r)
            dh0 += az @ p["U_z"] + ar @ p["U_r"]
            dU["z"] += az.T @ h0
            dU["r"] += ar.T @ h0
            dU["h"] += ah.T @ (r * h0)
            da_z[:, t], da_r[:, t], da_h[:, t] = az, ar, ah
            dh_next = dh0
        x = cache.inputs[i]
        flat_x = x.reshape(B * T, -1)
        for g, da in zip(GATES, (da_z, da_r, da_h)):
            flat = da.reshape(B * T, H)
            grads[f"{i}.W_{g}"] = flat.T @ flat_x
            grads[f"{i}.U_{g}"] = dU[g]
            grads[f"{i}.b_{g}"] = flat.sum(axis=0)
        if i > 0:
            d_out = (
                da_z.reshape(B * T, H) @ p["W_z"]
                + da_r.reshape(B * T, H) @ p["W_r"]
                + da_h.reshape(B * T, H) @ p["W_h"]
            ).reshape(B, T, -1)
    return grads


def loss_and_grads(model: GruModel, features, target, mask=None):
    pred, cache = forward_sequence(model, features)
    return mse_loss(pred, target, mask), backward_bptt(cache, model, target, mask)


# finite differences run in extended precision where the platform has it, so
# their roundoff stays far below the 1e-8 floor of the relative error
ORACLE_DTYPE = np.longdouble if np.finfo(np.longdouble).eps < np.finfo(np.float64).eps else np.float64


def grad_check(model: GruModel, batch, epsilon: float = 1e-5, n_samples: int = 200,
               seed: int = 0, analytic: dict | None = None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    At least one coordinate from every parameter array is checked, and the
    rest of the ``n_samples`` budget is drawn at random. Relative error is
    ``|a - n| / max(|a|, |n|, 1e-8)``. Analytic gradients are computed in
    double precision; the perturbed losses are evaluated in
    :data:`ORACLE_DTYPE`.
    """
    if model.params["w_out"].dtype != np.float64:
        raise TypeError("gradient checking needs double precision")
    features, target, mask = batch.features, batch.labels, batch.mask
    if analytic is None:
        _, analytic = loss_and_grads(model, features, target, mask)
    rng = np.random.default_rng(seed)
    names = model.param_names()
    picks = [(name, int(rng.integers(model.params[name].size))) for name in names]
    sizes = np.array([model.params[n].size for n in names])
    total = int(sizes.sum())
    extra = max(0, min(n_samples, total) - len(picks))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for flat in rng.choice(total, size=extra, replace=False):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        picks.append((names[k], int(flat - offsets[k])))

    probe = model.astype(ORACLE_DTYPE)
    x = np.asarray(features, dtype=ORACLE_DTYPE)
    y = np.asarray(target, dtype=ORACLE_DTYPE)
    eps = ORACLE_DTYPE(epsilon)

    def loss() -> float:
        pred = forward_sequence(probe, x)[0]
        return _masked_mean_sq(pred - y, mask)

    worst = 0.0
    for name, j in picks:
        arr = probe.params[name].reshape(-1)
        orig = arr[j]
        arr[j] = orig + eps
        up = loss()
        arr[j] = orig - eps
        down = loss()
        arr[j] = orig
        num = float((up - down) / (2 * eps))
        a = float(analytic[name].reshape(-1)[j])
        err = abs(a - num) / max(abs(a), abs(num), 1e-8)
        worst = max(worst, err)
    return worst


def self_check(seed: int = 0, n_layers: int = 2, hidden: int = 8, input_dim: int = 12, seq_len: int = 5,
               batch_size: int = 2, epsilon: float = 1e-5, n_samples: int = 200) -> float:
    """Gradient check of a freshly initialised model on a random batch.

    About a quarter of the frames are masked out. Returns the worst relative
    error.
    """
    rng = rng_for(seed, GRADCHECK)
    config = ModelConfig(input_dim, (hidden,) * n_layers, hidden_range=(1, 1 << 20))
    model = GruModel.init(config, int(rng.integers(1 << 31)))
    mask = rng.random((batch_size, seq_len)) < 0.75
    mask[0, -1] = True
    batch = SimpleNamespace(
        features=rng.uniform(0.0, 1.0, size=(batch_size, seq_len, input_dim)),
        labels=rng.uniform(-1.0, 1.0, size=(batch_size, seq_len)),
        mask=mask,
    )
    return grad_check(model, batch, epsilon, n_samples, seed=int(rng.integers(1 << 31)))


def clip_gradients(grads: dict, max_norm: float = CLIP_NORM) -> float:
    """Scale ``grads`` in place to global norm ``max_norm``; returns the norm before clipping."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if np.isfinite(norm) and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, model: GruModel) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in model.params.items()},
                   {k: np.zeros_like(p) for k, p in model.params.items()})


def adam_step(model: GruModel, grads: dict, state: AdamState, lr: float) -> tuple[GruModel, AdamState]:
    """Bias-corrected Adam update, applied in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
    state.t += 1
    c1 = 1.0 - BETA1 ** state.t
    c2 = 1.0 - BETA2 ** state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        model.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    model.version += 1
    return model, state


@dataclass
class Checkpoint:
    model: GruModel
    adam: AdamState
    train_step: int = 0
    rng_seed: int = 0
    config_hash: str = ""
    convention: str = "correction"


_CONVENTIONS = ("correction", "detune")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    cfg = ckpt.model.config
    parts = [
        CKPT_MAGIC,
        struct.pack("<H", CKPT_VERSION),
        struct.pack("<II", cfg.input_dim, cfg.n_layers),
        struct.pack(f"<{cfg.n_layers}I", *cfg.hidden_sizes),
        struct.pack("<b", _CONVENTIONS.index(ckpt.convention)),
        struct.pack("<Qq", ckpt.train_step, ckpt.rng_seed),
    ]
    h = ckpt.config_hash.encode("ascii")
    parts.append(struct.pack("<H", len(h)) + h)
    parts.append(struct.pack("<Q", ckpt.adam.t))
    names = ckpt.model.param_names()
    for store in (ckpt.model.params, ckpt.adam.m, ckpt.adam.v):
        for name in names:
            parts.append(np.ascontiguousarray(store[name], dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if len(r.data) < 6 or r.data[:4] != CKPT_MAGIC:
        raise IncompatibleCheckpointError(f"{path}: not a checkpoint file")
    r.take(4)
    (version,) = r.unpack("<H")
    if version != CKPT_VERSION:
        raise IncompatibleCheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    input_dim, n_layers = r.unpack("<II")
    if not 1 <= n_layers <= 64:
        raise CorruptCheckpointError(f"{path}: implausible layer count {n_layers}")
    hidden = r.unpack(f"<{n_layers}I")
    (conv,) = r.unpack("<b")
    if conv not in (0, 1):
        raise CorruptCheckpointError(f"{path}: unknown label convention {conv}")
    train_step, seed = r.unpack("<Qq")
    (hlen,) = r.unpack("<H")
    config_hash = r.take(hlen).decode("ascii")
    (adam_t,) = r.unpack("<Q")
    # stored models may use sizes outside the default validation range
    config = ModelConfig(input_dim, hidden, hidden_range=(1, 1 << 20), layer_range=(1, 64))
    shapes = GruModel(config).param_shapes()
    stores = []
    for _ in range(3):
        store = {}
        for name, shape in shapes.items():
            n = int(np.prod(shape))
            store[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        stores.append(store)
    if r.pos != len(r.data):
        raise CorruptCheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    model = GruModel(config, stores[0])
    return Checkpoint(model, AdamState(stores[1], stores[2], adam_t), train_step, seed, config_hash,
                      _CONVENTIONS[conv])

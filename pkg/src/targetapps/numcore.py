"""Dense numeric core: layers with explicit backward passes, losses, optimizers.

Every layer works on a single vector or on a batch with a leading batch axis.
Weights follow the ``(out, in)`` convention, so ``y = x @ W.T + b``.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

log = logging.getLogger(__name__)

CE_EPS = 1e-12

# incremented whenever a log-probability had to be clamped
numeric_warnings: Counter = Counter()


class ParameterStore:
    """Named parameters, each paired with a gradient accumulator of the same shape."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._values:
            raise KeyError(f"parameter {name!r} already defined")
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise ValueError(f"parameter {name!r} has non-finite entries")
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._values.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            if self._values[k].shape != v.shape:
                raise ValueError(f"shape mismatch restoring {k!r}: {v.shape} vs {self._values[k].shape}")
            self._values[k][...] = v

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self._values.values()))


# ---------------------------------------------------------------------------
# initialization


def uniform_init(rng: np.random.Generator, shape, scale: float = 0.05) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


def glorot_init(rng: np.random.Generator, shape) -> np.ndarray:
    fan_out, fan_in = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# layers


def _check_dense(W, b, x):
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ValueError(f"dense shape mismatch: W{W.shape}, b{b.shape}, x{x.shape}")


def dense_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Affine map ``Wx + b`` for a vector or a batch of row vectors."""
    W, b, x = np.asarray(W, float), np.asarray(b, float), np.asarray(x, float)
    _check_dense(W, b, x)
    return x @ W.T + b


def dense_backward(W: np.ndarray, x: np.ndarray, dy: np.ndarray):
    """Return ``(dW, db, dx)`` for upstream gradient ``dy``."""
    if x.ndim == 1:
        return np.outer(dy, x), dy.copy(), W.T @ dy
    return dy.T @ x, dy.sum(axis=0), dy @ W


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, dy):
    return dy * (x > 0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x, axis: int = -1, mask=None):
    """Max-subtracted softmax. Entries where ``mask`` is False get probability 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def softmax_backward(p, dp, axis: int = -1):
    return p * (dp - np.sum(dp * p, axis=axis, keepdims=True))


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None):
    """Inverted dropout. Returns ``(y, mask)``; mask is None when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(mask, dy):
    return dy if mask is None else dy * mask


# ---------------------------------------------------------------------------
# LSTM (gate order: input, forget, candidate, output)


@dataclass
class LSTMCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray


def lstm_cell(params, x_t, h_prev, c_prev):
    """One LSTM step. ``params`` is ``(Wx, Wh, b)`` with Wx ``(4h, d)``, Wh ``(4h, h)``.

    Returns ``(h_t, c_t, cache)``.
    """
    Wx, Wh, b = params
    H = Wh.shape[1]
    if Wx.shape[0] != 4 * H or Wh.shape[0] != 4 * H or b.shape != (4 * H,):
        raise ValueError(f"lstm parameter shapes inconsistent: {Wx.shape}, {Wh.shape}, {b.shape}")
    if x_t.shape[-1] != Wx.shape[1] or h_prev.shape[-1] != H or c_prev.shape != h_prev.shape:
        raise ValueError("lstm input/state shape mismatch")
    z = x_t @ Wx.T + h_prev @ Wh.T + b
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = sigmoid(z[..., 3 * H:])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return h, c, LSTMCache(x_t, h_prev, c_prev, i, f, g, o, c, tanh_c)


def lstm_cell_backward(params, cache: LSTMCache, dh, dc):
    """Backward through one step; returns ``(dWx, dWh, db, dx, dh_prev, dc_prev)``."""
    Wx, Wh, _ = params
    dc = dc + dh * cache.o * (1.0 - cache.tanh_c ** 2)
    do = dh * cache.tanh_c * cache.o * (1.0 - cache.o)
    di = dc * cache.g * cache.i * (1.0 - cache.i)
    df = dc * cache.c_prev * cache.f * (1.0 - cache.f)
    dg = dc * cache.i * (1.0 - cache.g ** 2)
    dz = np.concatenate([di, df, dg, do], axis=-1)
    if dz.ndim == 1:
        dWx, dWh, db = np.outer(dz, cache.x), np.outer(dz, cache.h_prev), dz
    else:
        dWx, dWh, db = dz.T @ cache.x, dz.T @ cache.h_prev, dz.sum(axis=0)
    return dWx, dWh, db, dz @ Wx, dz @ Wh, dc * cache.f


def lstm_forward(params, xs):
    """Run a single-layer LSTM over ``xs`` of shape ``(B, T, d)`` from zero state."""
    B, T, _ = xs.shape
    H = params[1].shape[1]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    caches = []
    for t in range(T):
        h, c, cache = lstm_cell(params, xs[:, t], h, c)
        caches.append(cache)
    return h, caches


def lstm_backward(params, caches, dh_last):
    """Backprop through time from the gradient on the final hidden state."""
    Wx, Wh, b = params
    dWx, dWh, db = np.zeros_like(Wx), np.zeros_like(Wh), np.zeros_like(b)
    dxs = []
    dh, dc = dh_last, np.zeros_like(dh_last)
    for cache in reversed(caches):
        gWx, gWh, gb, dx, dh, dc = lstm_cell_backward(params, cache, dh, dc)
        dWx += gWx
        dWh += gWh
        db += gb
        dxs.append(dx)
    return dWx, dWh, db, np.stack(dxs[::-1], axis=1)


# ---------------------------------------------------------------------------
# losses; each returns the scalar loss and the gradient w.r.t. the predictions


def mse(y, y_hat):
    y, y_hat = np.atleast_1d(np.asarray(y, float)), np.atleast_1d(np.asarray(y_hat, float))
    diff = y_hat - y
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def hinge_pair(y1, y2, y_hat1, y_hat2):
    """Mean of ``max(0, 1 - sign(y1 - y2) * (y_hat1 - y_hat2))`` over the batch."""
    y1, y2 = np.atleast_1d(np.asarray(y1, float)), np.atleast_1d(np.asarray(y2, float))
    y_hat1, y_hat2 = np.atleast_1d(np.asarray(y_hat1, float)), np.atleast_1d(np.asarray(y_hat2, float))
    s = np.sign(y1 - y2)
    margin = 1.0 - s * (y_hat1 - y_hat2)
    active = margin > 0
    n = margin.size
    d1 = np.where(active, -s, 0.0) / n
    return float(np.mean(np.maximum(margin, 0.0))), d1, -d1


def cross_entropy(p, target) -> float:
    """``-ln p[target]`` averaged over a batch; zero probabilities are clamped."""
    p = np.atleast_2d(np.asarray(p, float))
    target = np.atleast_1d(target)
    picked = p[np.arange(len(target)), target]
    clamped = picked < CE_EPS
    if clamped.any():
        numeric_warnings["cross_entropy_clamped"] += int(clamped.sum())
    return float(-np.mean(np.log(np.maximum(picked, CE_EPS))))


def softmax_cross_entropy(logits, target):
    """Fused softmax + cross-entropy. Returns ``(loss, probs, dlogits)``."""
    logits = np.atleast_2d(logits)
    target = np.atleast_1d(target)
    p = softmax(logits)
    loss = cross_entropy(p, target)
    d = p.copy()
    d[np.arange(len(target)), target] -= 1.0
    return loss, p, d / len(target)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    algorithm: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.algorithm!r}")


def optimizer_step(store: ParameterStore, state: OptimizerState, frozen: Iterable[str] = ()) -> ParameterStore:
    """Apply one update in place and zero the gradients.

    Raises FloatingPointError naming the first parameter with a non-finite
    gradient; in that case no parameter is touched.
    """
    frozen = set(frozen)
    for name in store.names():
        if not np.all(np.isfinite(store.grad(name))):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    for name in store.names():
        g = store.grad(name)
        if name in frozen:
            continue
        value = store[name]
        if state.algorithm == "sgd":
            value -= state.lr * g
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        value -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    store.zero_grad()
    return store


# ---------------------------------------------------------------------------
# finite-difference gradient check


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def worst(self) -> str | None:
        return max(self.errors, key=self.errors.get) if self.errors else None

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def failing(self) -> list[str]:
        return [k for k, e in self.errors.items() if e > self.tolerance]


def gradient_check(loss_fn: Callable[[], float], store: ParameterStore, tolerance: float = 1e-4,
                   h: float = 1e-5, names: Iterable[str] | None = None) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn`` must zero the store's gradients, accumulate analytic gradients
    into it and return the loss; it has to be deterministic. The error per
    parameter is ``|g_a - g_n| / max(|g_a| + |g_n|, 1e-12)`` using Frobenius norms.
    """
    store.zero_grad()
    loss_fn()
    names = list(names) if names is not None else store.names()
    analytic = {n: store.grad(n).copy() for n in names}
    errors = {}
    for name in names:
        value = store[name]
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        num_flat = numeric.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            plus = loss_fn()
            flat[idx] = orig - h
            minus = loss_fn()
            flat[idx] = orig
            num_flat[idx] = (plus - minus) / (2 * h)
        diff = np.linalg.norm(analytic[name] - numeric)
        scale = max(np.linalg.norm(analytic[name]) + np.linalg.norm(numeric), 1e-12)
        errors[name] = float(diff / scale)
    store.zero_grad()
    return GradCheckReport(errors, tolerance)


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + little-endian float64 blob in manifest order


def save_checkpoint(path, store: ParameterStore, meta: dict | None = None) -> tuple[Path, Path]:
    path = Path(path)
    manifest_path = path.with_suffix(".json")
    blob_path = path.with_suffix(".bin")
    entries = []
    with open(blob_path, "wb") as fh:
        for name, value in store.items():
            entries.append({"name": name, "shape": list(value.shape)})
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    manifest = {"format": "targetapps-checkpoint/1", "parameters": entries, "meta": meta or {}}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path, blob_path


def load_checkpoint(path) -> tuple[ParameterStore, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    store = ParameterStore()
    offset = 0
    for entry in manifest["parameters"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        if offset + size > raw.size:
            raise ValueError(f"checkpoint blob truncated at parameter {entry['name']!r}")
        store.add(entry["name"], raw[offset:offset + size].reshape(shape))
        offset += size
    if offset != raw.size:
        raise ValueError("checkpoint blob has trailing data")
    return store, manifest["meta"]

"""Small differentiable softmax classifier with exact manual backprop.

Parameters live in a single flat 64-bit vector so that whole-model
arithmetic (averaging, momentum, serialization) is trivial. Forward and
gradient computations are pure functions of (spec, w, inputs).
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

_LOG_EPS = 1e-12
_LN_EPS = 1e-5


class ShapeError(ValueError):
    """Input dimensions do not match the model specification."""


class NumericError(ArithmeticError):
    """A non-finite value appeared during evaluation."""


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    activation: str = "relu"
    normalization: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("need input_dim >= 1 and num_classes >= 2")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden dims must be positive")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.normalization not in ("none", "layer-norm"):
            raise ValueError(f"unsupported normalization {self.normalization!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per affine layer."""
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def param_count(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_dims)


@dataclass(frozen=True)
class ModelState:
    spec: ModelSpec
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        object.__setattr__(self, "w", w)
        if w.shape != (self.spec.param_count,):
            raise ShapeError(
                f"expected {self.spec.param_count} parameters, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise NumericError("non-finite parameter values")


@dataclass(frozen=True)
class Prediction:
    probs: np.ndarray


def init_params(spec: ModelSpec, seed: int) -> ModelState:
    """He-style initialization; identical state for identical seeds."""
    rng = np.random.default_rng(seed)
    parts = []
    for fan_in, fan_out in spec.layer_dims:
        parts.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return ModelState(spec=spec, w=np.concatenate(parts))


def _unpack(spec: ModelSpec, w: np.ndarray):
    layers = []
    off = 0
    for fan_in, fan_out in spec.layer_dims:
        W = w[off:off + fan_in * fan_out].reshape(fan_out, fan_in)
        off += fan_in * fan_out
        b = w[off:off + fan_out]
        off += fan_out
        layers.append((W, b))
    return layers


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_cached(spec: ModelSpec, w: np.ndarray, X: np.ndarray):
    layers = _unpack(spec, w)
    h = X
    caches = []
    for W, b in layers[:-1]:
        z = h @ W.T + b
        if spec.normalization == "layer-norm":
            mu = z.mean(axis=1, keepdims=True)
            var = z.var(axis=1, keepdims=True)
            std = np.sqrt(var + _LN_EPS)
            zh = (z - mu) / std
        else:
            std, zh = None, z
        a = np.maximum(zh, 0.0)
        caches.append((h, zh, std))
        h = a
    W, b = layers[-1]
    logits = h @ W.T + b
    probs = _softmax(logits)
    return probs, h, caches, layers


def forward_batch(m: ModelState, X: np.ndarray) -> np.ndarray:
    """Softmax outputs for a batch, shape (len(X), K)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != m.spec.input_dim:
        raise ShapeError(f"expected inputs of dim {m.spec.input_dim}, got {X.shape}")
    probs, _, _, _ = _forward_cached(m.spec, m.w, X)
    if not np.all(np.isfinite(probs)):
        raise NumericError("non-finite values in forward pass")
    return probs


def forward(m: ModelState, x: np.ndarray) -> Prediction:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (m.spec.input_dim,):
        raise ShapeError(f"expected input of dim {m.spec.input_dim}, got {x.shape}")
    return Prediction(probs=forward_batch(m, x[None, :])[0])


def local_loss(p: Prediction, label: int) -> float:
    """Cross entropy -log p[label], clamped away from log(0)."""
    probs = np.asarray(p.probs, dtype=np.float64)
    if not (0 <= label < probs.shape[0]):
        raise ShapeError(f"label {label} out of range for K={probs.shape[0]}")
    v = probs[label]
    if v < _LOG_EPS:
        warnings.warn(f"probability {v:.3e} clamped to {_LOG_EPS} in local_loss",
                      RuntimeWarning, stacklevel=2)
        v = _LOG_EPS
    return float(-np.log(v))


def batch_local_loss(m: ModelState, X: np.ndarray, labels: np.ndarray) -> float:
    """Summed cross entropy over a batch."""
    probs = forward_batch(m, X)
    labels = np.asarray(labels, dtype=np.int64)
    v = np.clip(probs[np.arange(len(labels)), labels], _LOG_EPS, None)
    return float(-np.log(v).sum())


def _backprop(spec: ModelSpec, w: np.ndarray, X: np.ndarray,
              dlogits: np.ndarray, h_last: np.ndarray, caches, layers) -> np.ndarray:
    grads = [None] * len(layers)
    W, _ = layers[-1]
    grads[-1] = (dlogits.T @ h_last, dlogits.sum(axis=0))
    dh = dlogits @ W
    for li in range(len(layers) - 2, -1, -1):
        h_in, zh, std = caches[li]
        dzh = dh * (zh > 0.0)
        if spec.normalization == "layer-norm":
            # non-affine layer norm backward, per row
            dz = (dzh - dzh.mean(axis=1, keepdims=True)
                  - zh * (dzh * zh).mean(axis=1, keepdims=True)) / std
        else:
            dz = dzh
        W, _ = layers[li]
        grads[li] = (dz.T @ h_in, dz.sum(axis=0))
        dh = dz @ W
    return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])


def _grad_ce(spec: ModelSpec, w: np.ndarray, X: np.ndarray,
             labels: np.ndarray) -> np.ndarray:
    """Unvalidated cross-entropy gradient (hot path for the round loops)."""
    probs, h_last, caches, layers = _forward_cached(spec, w, X)
    dlogits = probs.copy()
    dlogits[np.arange(len(labels)), labels] -= 1.0
    return _backprop(spec, w, X, dlogits, h_last, caches, layers)


def grad_local_loss(m: ModelState, X: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the summed cross-entropy loss over the batch."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] != m.spec.input_dim:
        raise ShapeError(f"expected inputs of dim {m.spec.input_dim}, got {X.shape}")
    if len(X) == 0 or len(labels) != len(X):
        raise ShapeError("batch must be nonempty with one label per input")
    return _grad_ce(m.spec, m.w, X, labels)


def grad_distill_loss(m: ModelState, X: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of 0.5 * sum_x ||f(x; w) - z_x||^2 over the batch.

    Targets are arbitrary K-vectors; they need not lie on the simplex.
    """
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(targets, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != m.spec.input_dim:
        raise ShapeError(f"expected inputs of dim {m.spec.input_dim}, got {X.shape}")
    if len(X) == 0 or Z.shape != (len(X), m.spec.num_classes):
        raise ShapeError(f"targets must be ({len(X)}, {m.spec.num_classes}), got {Z.shape}")
    return _grad_kd(m.spec, m.w, X, Z)


def _grad_kd(spec: ModelSpec, w: np.ndarray, X: np.ndarray,
             Z: np.ndarray) -> np.ndarray:
    """Unvalidated distillation gradient (hot path for the round loops)."""
    probs, h_last, caches, layers = _forward_cached(spec, w, X)
    r = probs - Z
    # chain through the softmax Jacobian: diag(p) r - p (p . r)
    dlogits = probs * (r - (probs * r).sum(axis=1, keepdims=True))
    return _backprop(spec, w, X, dlogits, h_last, caches, layers)


def save_model(m: ModelState, path, seed: int | None = None) -> None:
    """JSON header line followed by the little-endian float64 parameter array."""
    header = {
        "input_dim": m.spec.input_dim,
        "hidden_dims": list(m.spec.hidden_dims),
        "num_classes": m.spec.num_classes,
        "activation": m.spec.activation,
        "normalization": m.spec.normalization,
        "seed": seed,
        "n_params": m.spec.param_count,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode() + b"\n")
        f.write(m.w.astype("<f8").tobytes())


def load_model(path) -> ModelState:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        raw = f.read()
    spec = ModelSpec(
        input_dim=header["input_dim"],
        hidden_dims=tuple(header["hidden_dims"]),
        num_classes=header["num_classes"],
        activation=header["activation"],
        normalization=header["normalization"],
    )
    w = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return ModelState(spec=spec, w=w)

"""Dense building blocks: two-layer MLPs, softmax cross-entropy, Adam and a
central-difference gradient checker.

Everything is float64. Matrices are plain ``numpy.ndarray`` objects; the
helpers below validate shape and finiteness at the boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionError, NumericError


def as_matrix(x, name: str = "matrix", cols: int | None = None) -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float64 array, optionally checking width."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name}: expected a 2-D matrix, got shape {arr.shape}")
    if cols is not None and arr.shape[1] != cols:
        raise DimensionError(f"{name}: expected {cols} columns, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name}: contains NaN or Inf")
    return arr


@dataclass
class Mlp2Params:
    """Weights of ``x -> W2 relu(W1 x + b1) + b2``."""

    W1: np.ndarray  # (hidden, d_in)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (d_out, hidden)
    b2: np.ndarray  # (d_out,)

    def __post_init__(self):
        h, d_in = self.W1.shape
        d_out, h2 = self.W2.shape
        if h2 != h or self.b1.shape != (h,) or self.b2.shape != (d_out,):
            raise DimensionError(
                f"inconsistent MLP shapes: W1 {self.W1.shape}, b1 {self.b1.shape}, "
                f"W2 {self.W2.shape}, b2 {self.b2.shape}"
            )

    @property
    def d_in(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def d_out(self) -> int:
        return self.W2.shape[0]

    @property
    def n_params(self) -> int:
        return mlp2_param_count(self.d_in, self.hidden, self.d_out)

    @classmethod
    def zeros(cls, d_in: int, hidden: int, d_out: int) -> "Mlp2Params":
        return cls(np.zeros((hidden, d_in)), np.zeros(hidden), np.zeros((d_out, hidden)), np.zeros(d_out))


def mlp2_param_count(d_in: int, hidden: int, d_out: int) -> int:
    return hidden * d_in + hidden + d_out * hidden + d_out


@dataclass
class Mlp2Cache:
    X: np.ndarray
    pre: np.ndarray
    act: np.ndarray


def mlp2_forward(params: Mlp2Params, X: np.ndarray) -> tuple[np.ndarray, Mlp2Cache]:
    """Row-wise two-layer ReLU MLP. Returns the output and the cache for backward."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.d_in:
        raise DimensionError(
            f"mlp2_forward: input shape {X.shape} incompatible with W1 shape {params.W1.shape}"
        )
    pre = X @ params.W1.T + params.b1
    act = np.maximum(pre, 0.0)
    out = act @ params.W2.T + params.b2
    return out, Mlp2Cache(X, pre, act)


def mlp2_backward(params: Mlp2Params, cache: Mlp2Cache, d_out: np.ndarray) -> tuple[Mlp2Params, np.ndarray]:
    """Gradients w.r.t. the MLP weights and its input. ReLU'(0) is taken as 0."""
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_out.shape != (cache.X.shape[0], params.d_out):
        raise DimensionError(f"mlp2_backward: upstream shape {d_out.shape} does not match output")
    dW2 = d_out.T @ cache.act
    db2 = d_out.sum(axis=0)
    d_act = d_out @ params.W2
    d_pre = d_act * (cache.pre > 0.0)
    dW1 = d_pre.T @ cache.X
    db1 = d_pre.sum(axis=0)
    dX = d_pre @ params.W1
    return Mlp2Params(dW1, db1, dW2, db2), dX


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label: int) -> tuple[float, np.ndarray]:
    """Loss ``-log softmax(logits)[label]`` and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise DimensionError(f"softmax_cross_entropy: expected a vector, got shape {z.shape}")
    C = z.shape[0]
    if not 0 <= label < C:
        raise IndexError(f"label {label} out of range for {C} classes")
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax_cross_entropy: non-finite logits")
    shifted = z - z.max()
    lse = np.log(np.exp(shifted).sum())
    loss = float(lse - shifted[label])
    grad = np.exp(shifted - lse)
    grad[label] -= 1.0
    return loss, grad


def softmax_cross_entropy_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised form over rows; returns per-row losses and per-row gradients."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    B, C = z.shape
    if labels.shape != (B,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {z.shape}")
    if np.any(labels < 0) or np.any(labels >= C):
        raise IndexError(f"labels out of range for {C} classes")
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax_cross_entropy: non-finite logits")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(B)
    losses = lse - shifted[rows, labels]
    grads = np.exp(shifted - lse[:, None])
    grads[rows, labels] -= 1.0
    return losses, grads


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, n_params: int, lr: float = 1e-4, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(n_params), np.zeros(n_params), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update.

    Returns the new parameter vector; ``state`` is advanced in place. An
    all-zero gradient leaves the parameters untouched (the moments still
    decay and ``t`` still advances).
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DimensionError(
            f"adam_step: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    if not np.any(grads):
        return params.copy()
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def numeric_gradient(loss: Callable[[np.ndarray], float], params: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grad = np.empty_like(params)
    work = params.copy()
    for i in range(params.size):
        orig = work[i]
        work[i] = orig + eps
        f_plus = loss(work)
        work[i] = orig - eps
        f_minus = loss(work)
        work[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"non-finite loss while perturbing coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def finite_diff_check(loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
                      params: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative disagreement between ``loss_fn``'s analytic gradient and
    central differences.

    ``loss_fn(p)`` must return ``(loss, grad)``. The per-coordinate error is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = np.asarray(params, dtype=np.float64)
    loss0, analytic = loss_fn(params.copy())
    if not np.isfinite(loss0):
        raise NumericError("loss is not finite at the base point")
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != params.shape:
        raise DimensionError(f"gradient shape {analytic.shape} != params shape {params.shape}")
    numeric = numeric_gradient(lambda p: loss_fn(p)[0], params, eps)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if params.size else 0.0

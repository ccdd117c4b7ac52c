"""Dense numeric core with hand-written backward passes.

Every layer works on batches: row vectors are stacked along axis 0, so a
single example is just a batch of one.  Shapes follow the ``x @ W`` convention
(``W`` is fan_in x fan_out), which is the transpose-free form of ``W^T x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

COMPUTE_DTYPE = np.float64
STORAGE_DTYPE = np.float32
CE_FLOOR = 1e-12


class FreezeError(RuntimeError):
    """An optimizer update was attempted on a frozen parameter."""


class Parameter:
    """A named weight matrix with its gradient buffer and a trainable flag."""

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True):
        self.name = name
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable

    def __repr__(self):
        flag = "" if self.trainable else ", frozen"
        return f"Parameter({self.name!r}, shape={self.value.shape}{flag})"

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def accumulate(self, g: np.ndarray):
        # Frozen weights keep a zero gradient no matter what flows back.
        if self.trainable:
            self.grad += g

    def freeze(self):
        self.trainable = False
        self.zero_grad()


def glorot(rng: np.random.Generator, shape: tuple[int, ...], dtype=COMPUTE_DTYPE) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def sigmoid(x):
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# --- embedding ---------------------------------------------------------------


def embed_lookup(E: np.ndarray, ids) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= E.shape[0]):
        raise IndexError(f"token id out of range for embedding with {E.shape[0]} rows")
    return E[ids]


def embed_backward(E: Parameter, ids, dout: np.ndarray) -> None:
    if not E.trainable:
        return
    ids = np.asarray(ids).reshape(-1)
    np.add.at(E.grad, ids, dout.reshape(ids.size, -1))


# --- vanilla RNN cell -----------------------------------------------------------


def rnn_cell(x, h_prev, W, U):
    return np.tanh(x @ W + h_prev @ U)


def rnn_cell_backward(dh, x, h_prev, h, W, U):
    """Returns ``(dx, dh_prev, dW, dU)`` for ``h = tanh(x W + h_prev U)``."""
    da = dh * (1.0 - h * h)
    return da @ W.T, da @ U.T, _outer(x, da), _outer(h_prev, da)


def _outer(a, b):
    # Sums over the batch when given stacked rows.
    if a.ndim == 1:
        return np.outer(a, b)
    return a.T @ b


# --- GRU cell -------------------------------------------------------------------


class GruParams(NamedTuple):
    W_z: np.ndarray
    U_z: np.ndarray
    W_r: np.ndarray
    U_r: np.ndarray
    W: np.ndarray
    U: np.ndarray


class GruCache(NamedTuple):
    x: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    h_cand: np.ndarray
    u: np.ndarray  # h_prev @ U, kept for the reset-gate gradient


def gru_cell_forward(x, h_prev, p: GruParams) -> tuple[np.ndarray, GruCache]:
    z = sigmoid(x @ p.W_z + h_prev @ p.U_z)
    r = sigmoid(x @ p.W_r + h_prev @ p.U_r)
    u = h_prev @ p.U
    h_cand = np.tanh(x @ p.W + r * u)
    h = (1.0 - z) * h_prev + z * h_cand
    return h, GruCache(x, h_prev, z, r, h_cand, u)


def gru_cell(x, h_prev, p: GruParams) -> np.ndarray:
    return gru_cell_forward(x, h_prev, p)[0]


def gru_cell_backward(dh, cache: GruCache, p: GruParams):
    """Returns ``(dx, dh_prev, grads)`` with ``grads`` a GruParams of weight gradients."""
    x, h_prev, z, r, hc, u = cache
    dz = dh * (hc - h_prev)
    dhc = dh * z
    dh_prev = dh * (1.0 - z)

    dac = dhc * (1.0 - hc * hc)
    dr = dac * u
    du = dac * r
    daz = dz * z * (1.0 - z)
    dar = dr * r * (1.0 - r)

    dx = dac @ p.W.T + daz @ p.W_z.T + dar @ p.W_r.T
    dh_prev = dh_prev + du @ p.U.T + daz @ p.U_z.T + dar @ p.U_r.T
    grads = GruParams(
        W_z=_outer(x, daz),
        U_z=_outer(h_prev, daz),
        W_r=_outer(x, dar),
        U_r=_outer(h_prev, dar),
        W=_outer(x, dac),
        U=_outer(h_prev, du),
    )
    return dx, dh_prev, grads


# --- attention pooling ----------------------------------------------------------


class AttentionParams(NamedTuple):
    W_a: np.ndarray  # d x attn
    v_a: np.ndarray  # attn


def attention_pool(H: np.ndarray, p: AttentionParams):
    """Content-scored softmax pooling over time.

    ``H`` is ``(T, d)`` or ``(B, T, d)``.  Returns ``(context, weights)`` and
    the cache needed by :func:`attention_backward` as a third element.
    """
    S = np.tanh(H @ p.W_a)
    scores = S @ p.v_a
    a = softmax(scores, axis=-1)
    context = (a[..., None] * H).sum(axis=-2)
    return context, a, (H, S, a)


def attention_backward(dcontext, cache, p: AttentionParams):
    """Returns ``(dH, dW_a, dv_a)``."""
    H, S, a = cache
    dH = a[..., None] * dcontext[..., None, :]
    da = (H * dcontext[..., None, :]).sum(axis=-1)
    dscores = a * (da - (a * da).sum(axis=-1, keepdims=True))
    dv_a = (dscores[..., None] * S).reshape(-1, S.shape[-1]).sum(axis=0)
    dpre = dscores[..., None] * p.v_a * (1.0 - S * S)
    dW_a = H.reshape(-1, H.shape[-1]).T @ dpre.reshape(-1, dpre.shape[-1])
    dH = dH + dpre @ p.W_a.T
    return dH, dW_a, dv_a


# --- output head ------------------------------------------------------------------


def dense_softmax(x, W, b) -> np.ndarray:
    return softmax(x @ W + b)


def cross_entropy(p: np.ndarray, target) -> float:
    """Mean ``-ln p[target]`` over rows, with ``p[target]`` floored at 1e-12."""
    p = np.atleast_2d(p)
    target = np.atleast_1d(np.asarray(target))
    picked = p[np.arange(len(target)), target]
    return float(-np.log(np.maximum(picked, CE_FLOOR)).mean())


def softmax_ce_backward(p: np.ndarray, targets) -> np.ndarray:
    """Gradient of the batch-mean loss w.r.t. the logits: ``(p - onehot) / B``."""
    p = np.atleast_2d(p)
    targets = np.atleast_1d(np.asarray(targets))
    g = p.copy()
    g[np.arange(len(targets)), targets] -= 1.0
    return g / len(targets)


# --- dropout ------------------------------------------------------------------------


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=COMPUTE_DTYPE):
    """Inverted-dropout mask: zeros with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None):
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a seeded generator")
    return x * dropout_mask(np.shape(x), rate, rng, np.asarray(x).dtype)


# --- Adam ----------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, param: Parameter, lr: float = 1e-3) -> "AdamState":
        return cls(np.zeros_like(param.value), np.zeros_like(param.value), lr=lr)


def adam_step(param: Parameter, s: AdamState) -> None:
    if not param.trainable:
        raise FreezeError(f"refusing to update frozen parameter {param.name!r}")
    g = param.grad
    s.t += 1
    s.m *= s.beta1
    s.m += (1.0 - s.beta1) * g
    s.v *= s.beta2
    s.v += (1.0 - s.beta2) * g * g
    m_hat = s.m / (1.0 - s.beta1**s.t)
    v_hat = s.v / (1.0 - s.beta2**s.t)
    param.value -= s.lr * m_hat / (np.sqrt(v_hat) + s.eps)


class Adam:
    """Adam over the trainable subset of a parameter list."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.state = {p.name: AdamState.like(p, lr) for p in self.params}

    def step(self):
        for p in self.params:
            adam_step(p, self.state[p.name])


def clip_global_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


# --- gradient checking -----------------------------------------------------------------


def grad_check(
    f: Callable[[], float],
    param: Parameter,
    eps: float = 1e-5,
    coords: Iterable[tuple[int, ...]] | None = None,
) -> float:
    """Max relative error between ``param.grad`` and central differences of ``f``.

    ``f`` must read ``param.value`` on every call; ``param.grad`` must already
    hold the analytic gradient at the current point.
    """
    if coords is None:
        coords = np.ndindex(*param.value.shape)
    worst = 0.0
    for idx in coords:
        old = param.value[idx]
        param.value[idx] = old + eps
        fp = f()
        param.value[idx] = old - eps
        fm = f()
        param.value[idx] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite loss while probing {param.name}{idx}")
        numeric = (fp - fm) / (2.0 * eps)
        analytic = float(param.grad[idx])
        err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        worst = max(worst, err)
    return worst

"""Dense numerics with hand-written reverse passes.

Activations are plain ``numpy`` arrays, batch first and channels last:
``(B, H, W, C)``.  Every differentiable op comes as a ``*_forward`` returning
``(out, cache)`` and a ``*_backward`` consuming ``(dout, cache)``.  Trainable
state lives in :class:`Parameter`, which carries the gradient slot.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

GROUPS = ("backbone", "prototype", "last_layer")


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class UninitializedStatsError(RuntimeError):
    pass


class MissingGradientError(RuntimeError):
    pass


@dataclass(eq=False)
class Parameter:
    """A trainable array tagged with the optimizer group it belongs to."""

    data: np.ndarray
    group: str
    name: str = ""
    trainable: bool = True
    grad: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"unknown parameter group {self.group!r}")

    @property
    def size(self) -> int:
        return int(self.data.size)

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"{self.name}: grad shape {g.shape} != {self.data.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None


def check_finite(x: np.ndarray, where: str = "") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {where or 'tensor'}")
    return x


# ---------------------------------------------------------------- convolution
#
# Activations are channels-last: (B, H, W, C).  A 3x3 neighbourhood is gathered
# with one fancy index into a zero-padded (B, H*W + 1, C) view; the extra row
# is the padding value.  Kernels keep the (C_out, C_in, 3, 3) convention.


@lru_cache(maxsize=None)
def neighbour_index(h: int, w: int) -> np.ndarray:
    """(H*W, 9) source cell per output cell and 3x3 offset; H*W marks padding."""
    idx = np.full((h * w, 9), h * w, dtype=np.intp)
    for i in range(h):
        for j in range(w):
            for k, (dy, dx) in enumerate((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)):
                y, x = i + dy, j + dx
                if 0 <= y < h and 0 <= x < w:
                    idx[i * w + j, k] = y * w + x
    idx.setflags(write=False)
    return idx


def _gather(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    xp = np.zeros((b, h * w + 1, c), dtype=x.dtype)
    xp[:, :-1] = x.reshape(b, h * w, c)
    # take keeps the result C-contiguous, so the callers' reshapes are free (the
    # method skips the np.take dispatch layer, which matters at batch size 1)
    return xp.take(neighbour_index(h, w).ravel(), axis=1).reshape(b, h * w, 9, c)


def _check_nhwc(x: np.ndarray, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op} expects a (B, H, W, C) array, got shape {x.shape}")
    if x.shape[1] < 1 or x.shape[2] < 1:
        raise DimensionError(f"{op}: empty spatial dims {x.shape[1:3]}")


def conv2d_forward(x: np.ndarray, kernel: np.ndarray):
    """3x3 convolution, stride 1, zero padding 1, no bias."""
    _check_nhwc(x, "conv2d")
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d expects a (O, C, 3, 3) kernel, got {kernel.shape}")
    if kernel.shape[1] != x.shape[3]:
        raise DimensionError(f"conv2d: kernel expects {kernel.shape[1]} channels, input has {x.shape[3]}")
    b, h, w, c = x.shape
    o = kernel.shape[0]
    cols = _gather(x).reshape(b * h * w, 9 * c)
    wmat = kernel.transpose(2, 3, 1, 0).reshape(9 * c, o)
    y = (cols @ wmat).reshape(b, h, w, o)
    return y, (cols, x.shape, kernel, wmat)


def conv2d_backward(dy: np.ndarray, cache):
    cols, xshape, kernel, wmat = cache
    b, h, w, c = xshape
    o = kernel.shape[0]
    dyf = dy.reshape(-1, o)
    dk = (cols.T @ dyf).reshape(3, 3, c, o).transpose(3, 2, 0, 1)
    # stride 1 with symmetric padding: d(input) is a convolution of d(output)
    # with the spatially flipped, channel-transposed kernel
    flipped = kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    dx, _ = conv2d_forward(dy, flipped)
    return dx, np.ascontiguousarray(dk)


def conv1x1_forward(x: np.ndarray, kernel: np.ndarray):
    _check_nhwc(x, "conv1x1")
    if kernel.ndim != 2 or kernel.shape[1] != x.shape[3]:
        raise DimensionError(f"conv1x1: kernel {kernel.shape} vs input {x.shape}")
    b, h, w, c = x.shape
    xf = x.reshape(-1, c)
    y = (xf @ kernel.T).reshape(b, h, w, kernel.shape[0])
    return y, (xf, x.shape, kernel)


def conv1x1_backward(dy: np.ndarray, cache):
    xf, xshape, kernel = cache
    dyf = dy.reshape(-1, kernel.shape[0])
    return (dyf @ kernel).reshape(xshape), dyf.T @ xf


def depthwise_conv3x3_forward(x: np.ndarray, kernel: np.ndarray):
    """One linear 3x3 filter per channel, fully padded, no bias."""
    _check_nhwc(x, "depthwise conv")
    if kernel.ndim != 3 or kernel.shape[1:] != (3, 3) or kernel.shape[0] != x.shape[3]:
        raise DimensionError(f"depthwise: kernel {kernel.shape} vs input {x.shape}")
    b, h, w, c = x.shape
    cols = _gather(x)
    kf = kernel.reshape(c, 9).T  # (9, C)
    y = np.einsum("nkc,kc->nc", cols.reshape(b * h * w, 9, c), kf).reshape(x.shape)
    return y, (cols, x.shape, kernel)


def depthwise_conv3x3_backward(dy: np.ndarray, cache):
    cols, xshape, kernel = cache
    b, h, w, c = xshape
    dyf = dy.reshape(b, h * w, 1, c)
    dk = (cols * dyf).sum(axis=(0, 1)).T.reshape(kernel.shape)
    dx, _ = depthwise_conv3x3_forward(dy, kernel[:, ::-1, ::-1])
    return dx, dk


# ---------------------------------------------------------------- batch norm


@dataclass(eq=False)
class BNState:
    """Running statistics of one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    initialized: bool = False

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BNState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm_forward(x, gamma, beta, state: BNState, train: bool, eps: float = BN_EPS,
                       momentum: float = BN_MOMENTUM):
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: {c} channels vs gamma {gamma.shape}")
    if train:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in train mode needs a batch of at least 2")
        axes = tuple(range(x.ndim - 1))
        mean = x.mean(axis=axes, dtype=np.float64).astype(x.dtype)
        xc = x - mean
        var = (xc * xc).mean(axis=axes, dtype=np.float64).astype(x.dtype)
        n = x.size // c
        unbiased = var * (n / max(n - 1, 1))
        if state.initialized:
            state.mean = ((1 - momentum) * state.mean + momentum * mean).astype(state.mean.dtype)
            state.var = ((1 - momentum) * state.var + momentum * unbiased).astype(state.var.dtype)
        else:
            state.mean = mean.astype(state.mean.dtype)
            state.var = unbiased.astype(state.var.dtype)
            state.initialized = True
        inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        xhat = xc * inv
        y = xhat * gamma + beta
        return y, (xhat, inv, gamma)
    if not state.initialized:
        raise UninitializedStatsError("batch_norm inference before any running stats were recorded")
    scale = (gamma / np.sqrt(state.var + eps)).astype(x.dtype)
    shift = (beta - state.mean * scale).astype(x.dtype)
    return x * scale + shift, (None, scale, None)


def batch_norm_backward(dy, cache):
    xhat, inv, gamma = cache
    if xhat is None:
        # inference mode: a per-channel affine map
        return dy * inv, None, None
    axes = tuple(range(dy.ndim - 1))
    dbeta = dy.sum(axis=axes)
    dgamma = (dy * xhat).sum(axis=axes)
    n = dy.size // dy.shape[-1]
    dxhat = dy * gamma
    dx = (inv / n) * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------- pointwise


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def sigmoid_forward(x):
    # overflow-free logistic, 0.5 * (1 + tanh(x / 2)), computed in place on one buffer
    y = x * 0.5
    np.tanh(y, out=y)
    y += 1.0
    y *= 0.5
    return y, y


def sigmoid_backward(dy, y):
    return dy * y * (1.0 - y)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack along the (last) channel axis: ``a`` first, then ``b``."""
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat: spatial mismatch {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=-1)


def split_channels(dy: np.ndarray, c1: int) -> tuple[np.ndarray, np.ndarray]:
    return dy[..., :c1], dy[..., c1:]


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


# ---------------------------------------------------------------- pooling, head, loss


def global_max_pool_with_arg(m: np.ndarray) -> tuple[float, tuple[int, int]]:
    """Max of a 2-D map and its first row-major location."""
    if m.size == 0:
        raise DimensionError("global max pool over an empty map")
    flat = int(np.argmax(m))  # argmax returns the first occurrence
    loc = np.unravel_index(flat, m.shape)
    return float(m.flat[flat]), (int(loc[0]), int(loc[1]))


def global_max_pool_backward(dvalue: float, shape: tuple[int, int], loc: tuple[int, int]) -> np.ndarray:
    g = np.zeros(shape)
    g[loc] = dvalue
    return g


def linear_forward(x: np.ndarray, weight: np.ndarray):
    """``x @ weight.T`` with no bias; ``x`` is (N,) or (B, N)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[-1]} vs weight {weight.shape}")
    return x @ weight.T, (x, weight)


def linear_backward(dy, cache):
    x, weight = cache
    x2 = np.atleast_2d(x)
    dy2 = np.atleast_2d(dy)
    dw = dy2.T @ x2
    dx = dy @ weight
    return dx, dw


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. ``logits``.

    Accepts a single logit vector with an int label or a (B, K) batch with
    an int array of labels.
    """
    single = logits.ndim == 1
    lg = np.atleast_2d(logits)
    lab = np.atleast_1d(np.asarray(labels))
    k = lg.shape[1]
    if lab.shape[0] != lg.shape[0]:
        raise DimensionError("one label per logit row required")
    if np.any(lab < 0) or np.any(lab >= k):
        raise ValueError(f"label out of range [0, {k})")
    z = lg - lg.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(lg.shape[0])
    loss = float(np.mean(lse - z[rows, lab]))
    grad = softmax(lg)
    grad[rows, lab] -= 1.0
    grad /= lg.shape[0]
    return loss, (grad[0] if single else grad)


# ---------------------------------------------------------------- optimizer


def sgd_step(params: Iterable[Parameter], lr: float | dict[str, float],
             weight_decay: dict[str, float] | None = None, groups: Iterable[str] | None = None) -> None:
    """``p <- p - lr * (grad + 2 * decay[group] * p)``, then clear gradients.

    ``lr`` may be a scalar or a per-group mapping.  Only parameters whose group
    is in ``groups`` (all groups when ``None``) are touched.
    """
    weight_decay = weight_decay or {}
    selected = set(GROUPS if groups is None else groups)
    for p in params:
        if p.group not in selected or not p.trainable:
            continue
        step = lr[p.group] if isinstance(lr, dict) else lr
        decay = weight_decay.get(p.group, 0.0)
        if p.grad is None:
            if decay == 0.0:
                raise MissingGradientError(f"parameter {p.name or p.group} has no gradient")
            g = np.zeros_like(p.data)
        else:
            g = p.grad
        update = g + (2.0 * decay) * p.data if decay else g
        p.data -= (step * update).astype(p.data.dtype)
        p.grad = None


# ---------------------------------------------------------------- verification


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-3,
                     indices: Iterable[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x``, perturbed in place."""
    g = np.zeros(x.shape, dtype=np.float64)
    idx_iter = np.ndindex(*x.shape) if indices is None else indices
    for idx in idx_iter:
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def finite_diff_check(f: Callable[[], float], x: np.ndarray, analytic: np.ndarray,
                      eps: float = 1e-3, mask: np.ndarray | None = None) -> float:
    """Max relative error between ``analytic`` and central differences of ``f``.

    ``mask`` selects which coordinates take part (e.g. to skip ReLU kinks).
    """
    numeric = numeric_gradient(f, x, eps)
    if mask is not None:
        return relative_error(analytic[mask], numeric[mask])
    return relative_error(analytic, numeric)

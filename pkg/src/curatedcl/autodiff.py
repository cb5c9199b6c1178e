"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is define-by-run: every op creates a new :class:`Tensor` that
remembers its parents and a closure mapping the upstream gradient to
gradients for each parent. Each tensor receives a global sequence number at
creation, so sorting the reachable graph by that number recovers insertion
order; ``backward`` walks it in exact reverse.

Only the operations needed by the encoder, projection head and losses are
provided. Broadcasting is limited to adding a row vector to a matrix.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, DimensionError

__all__ = [
    "Tensor",
    "ComputationGraph",
    "tensor",
    "dense",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "abs_",
    "square",
    "huber",
    "sum_",
    "mean",
    "reshape",
    "concat_rows",
    "slice_rows",
    "normalize_rows",
    "logsumexp_rows",
    "gather_cols",
    "conv2d",
    "avg_pool2d",
    "global_avg_pool",
    "batch_norm",
    "grad_check",
]

_counter = itertools.count()

NORM_FLOOR = 1e-12


class Tensor:
    """An n-dimensional float64 array that participates in a graph."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "seq")

    def __init__(self, data, requires_grad=False, *, op="leaf", parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward
        self.seq = next(_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar; keeps loss code readable
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != output shape {self.shape}")

        graph = ComputationGraph.trace(self)
        pending = {self.seq: grad}
        for node in reversed(graph.nodes):
            g = pending.pop(node.seq, None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.seq in pending:
                    pending[parent.seq] = pending[parent.seq] + pg
                else:
                    pending[parent.seq] = pg


@dataclass
class ComputationGraph:
    """Nodes reachable from an output, in insertion order."""

    nodes: list

    @classmethod
    def trace(cls, output: Tensor) -> "ComputationGraph":
        seen = {}
        stack = [output]
        while stack:
            t = stack.pop()
            if t.seq in seen or not t.requires_grad:
                continue
            seen[t.seq] = t
            stack.extend(t.parents)
        return cls(sorted(seen.values(), key=lambda t: t.seq))

    def index(self):
        """Map node sequence number to position; parents always precede children."""
        return {t.seq: i for i, t in enumerate(self.nodes)}


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, req, op=op, parents=parents if req else (), backward=backward if req else None)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner axis mismatch: {a.shape[1]} vs {b.shape[0]}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for a batch of row vectors."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim != 2:
        raise DimensionError(f"dense input must be [batch x in_dim], got shape {x.shape}")
    if weight.ndim != 2 or weight.shape[0] != x.shape[1]:
        raise DimensionError(
            f"dense in_dim axis mismatch: input has {x.shape[1]}, weight has shape {weight.shape}"
        )
    if bias.shape != (weight.shape[1],):
        raise DimensionError(
            f"dense out_dim axis mismatch: weight gives {weight.shape[1]}, bias has shape {bias.shape}"
        )

    def backward(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _result(x.data @ weight.data + bias.data, (x, weight, bias), backward, "dense")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects 2-D input, got {x.shape}")
    return _result(x.data.T, (x,), lambda g: (g.T,), "transpose")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector broadcast over ``a``'s rows."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if a.ndim == 2 and b.shape == (a.shape[1],):
        return _result(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)), "add_row")
    raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at exactly 0 is 0
    # np.maximum keeps NaN visible to the non-finite guards downstream
    return _result(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def huber(x: Tensor, delta: float) -> Tensor:
    """Elementwise Huber penalty: ``0.5 d^2`` if ``|d| < delta`` else ``delta (|d| - 0.5 delta)``."""
    if delta <= 0:
        raise ConfigError(f"huber delta must be positive, got {delta}")
    d = x.data
    quad = np.abs(d) < delta
    out = np.where(quad, 0.5 * d * d, delta * (np.abs(d) - 0.5 * delta))
    slope = np.where(quad, d, delta * np.sign(d))
    return _result(out, (x,), lambda g: (g * slope,), "huber")


# ---------------------------------------------------------------------------
# reductions and reshaping


def sum_(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _result(
        np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean"
    )


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    widths = {t.shape[1:] for t in tensors}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows trailing shape mismatch: {sorted(widths)}")
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), backward, "concat")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _result(x.data[start:stop], (x,), backward, "slice_rows")


def normalize_rows(x: Tensor) -> Tensor:
    """Scale each row to unit L2 norm; norms below 1e-12 are floored."""
    if x.ndim != 2:
        raise DimensionError(f"normalize_rows expects 2-D input, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    floored = norms < NORM_FLOOR
    denom = np.where(floored, NORM_FLOOR, norms)
    y = x.data / denom

    def backward(g):
        proj = np.where(floored, 0.0, (g * y).sum(axis=1, keepdims=True))
        return ((g - y * proj) / denom,)

    return _result(y, (x,), backward, "normalize_rows")


def logsumexp_rows(x: Tensor, exclude_diagonal=False) -> Tensor:
    """Row-wise log-sum-exp, optionally skipping entry (i, i) of each row."""
    if x.ndim != 2:
        raise DimensionError(f"logsumexp_rows expects 2-D input, got {x.shape}")
    d = x.data
    if exclude_diagonal:
        if d.shape[0] > d.shape[1]:
            raise DimensionError(f"diagonal exclusion needs rows <= cols, got {d.shape}")
        d = d.copy()
        idx = np.arange(d.shape[0])
        d[idx, idx] = -np.inf
    m = d.max(axis=1, keepdims=True)
    e = np.exp(d - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    p = e / s

    return _result(out, (x,), lambda g: (p * g[:, None],), "logsumexp_rows")


def gather_cols(x: Tensor, cols) -> Tensor:
    """Pick ``x[i, cols[i]]`` for every row ``i``."""
    cols = np.asarray(cols, dtype=np.int64)
    if x.ndim != 2 or cols.shape != (x.shape[0],):
        raise DimensionError(f"gather_cols needs one column per row: x {x.shape}, cols {cols.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[rows, cols] = g
        return (full,)

    return _result(x.data[rows, cols], (x,), backward, "gather_cols")


# ---------------------------------------------------------------------------
# convolutional pieces


def _im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW batch with an OIHW kernel (no bias)."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise DimensionError(f"conv2d channel axis mismatch: input has {c}, kernel expects {ci}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ConfigError(
            f"conv2d output would be {ho}x{wo} for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)  # [n*ho*wo, c*kh*kw]
    kmat = kernel.data.reshape(o, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        dk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        dx = None
        if x.requires_grad and stride == 1 and padding <= min(kh, kw) - 1:
            # full correlation of g with the flipped, channel-swapped kernel
            ph, pw = kh - 1 - padding, kw - 1 - padding
            gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
            gcols = _im2col(gp, kh, kw, 1, h, w)
            kflip = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * kh * kw)
            dx = (gcols @ kflip.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        elif x.requires_grad:
            dcols = (g2 @ kmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[..., i, j]
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return dx, dk

    return _result(np.ascontiguousarray(out), (x, kernel), backward, "conv2d")


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping average pooling; trailing rows/cols that do not fill a window are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ConfigError(f"avg_pool2d window {size} larger than input {h}x{w}")
    crop = x.data[:, :, :ho * size, :wo * size]
    out = crop.reshape(n, c, ho, size, wo, size).mean(axis=(3, 5))

    def backward(g):
        full = np.zeros(x.shape)
        up = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
        full[:, :, :ho * size, :wo * size] = up
        return (full,)

    return _result(out, (x,), backward, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _result(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    *,
    training: bool = True,
    running_mean=None,
    running_var=None,
    stats_out: dict | None = None,
) -> Tensor:
    """Per-feature standardization followed by an affine map.

    Accepts ``[batch x features]`` or ``[batch x channels x H x W]``; for 4-D
    inputs statistics are pooled over batch and spatial axes. In training mode
    the batch mean and unbiased variance are written to ``stats_out`` (keys
    ``"mean"``, ``"var"``) so the caller decides whether to fold them into the
    running averages. In inference mode ``running_mean``/``running_var`` are used.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim == 2:
        axes, bshape = (0,), (1, -1)
    elif x.ndim == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise DimensionError(f"batch_norm expects 2-D or 4-D input, got {x.shape}")
    features = x.shape[1]
    if gamma.shape != (features,) or beta.shape != (features,):
        raise DimensionError(
            f"batch_norm feature axis mismatch: input has {features}, gamma {gamma.shape}, beta {beta.shape}"
        )
    m = x.data.size // features
    g_ = gamma.data.reshape(bshape)

    if training:
        if x.shape[0] < 2:
            raise ConfigError(f"batch_norm in training mode needs batch >= 2, got {x.shape[0]}")
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std
        if stats_out is not None:
            stats_out["mean"] = mu.reshape(-1)
            stats_out["var"] = var.reshape(-1) * (m / max(m - 1, 1))

        def backward(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * g_
            dx = inv_std * (
                dxhat
                - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
            )
            return dx, dgamma, dbeta

    else:
        if running_mean is None or running_var is None:
            raise ContractError("batch_norm inference mode needs running_mean and running_var")
        mu = np.asarray(running_mean).reshape(bshape)
        inv_std = 1.0 / np.sqrt(np.asarray(running_var).reshape(bshape) + eps)
        xhat = (x.data - mu) * inv_std

        def backward(g):
            return g * g_ * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * g_ + beta.data.reshape(bshape)
    return _result(out, (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------------------
# verification harness


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    tol: float | None = None,
) -> float:
    """Compare analytic gradients with central differences.

    ``fn`` rebuilds the graph from the current contents of ``inputs`` on every
    call. Returns ``max |analytic - numeric| / max(1, |numeric|)`` over every
    entry of every input. If ``tol`` is given and exceeded, ``AssertionError``
    is raised.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ContractError(f"grad_check step must lie in [1e-7, 1e-4], got {eps}")
    out = fn()
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = fn().item()
            flat[k] = orig - eps
            fm = fn().item()
            flat[k] = orig
            numeric = (fp - fm) / (2 * eps)
            err = abs(a.reshape(-1)[k] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    if tol is not None and worst > tol:
        raise AssertionError(f"gradient check failed: max relative error {worst:.3e} > {tol:.1e}")
    return worst

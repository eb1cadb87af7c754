"""Differentiable tensor substrate.

A small reverse-mode autodiff engine over numpy arrays: the forecaster only
needs a fixed set of ops (matmul, elementwise arithmetic, softmax, layer
norm, GELU, token-axis 1-D convolution, reshape/transpose/concat, reductions,
embedding lookup), each implemented as a forward numpy call plus an analytic
backward closure. Storage is float32; reductions and the gradient checker
accumulate in float64.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense float array with an optional reverse-mode gradient buffer.

    `data` is float32 unless the caller passes a float64 array explicitly
    (the gradient checker does, for accurate finite differences). Ops
    propagate numpy's dtype promotion, so a float64 probe flows through a
    float32 parameter stack in double precision.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode pass from a scalar output."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # convenience operators used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result; attach the graph only when a parent needs grad."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _accum(t: Tensor, g: np.ndarray) -> None:
    # First assignment keeps the incoming array (which may alias another
    # tensor's grad); accumulation is out-of-place, and nothing mutates a
    # grad buffer in place, so the aliasing is safe.
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(out_data, (a, b), backward)


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    out_data = x.data * np.asarray(c, dtype=x.data.dtype)

    def backward(g):
        _accum(x, g * c)

    return _make(out_data, (x,), backward)


def gelu(x) -> Tensor:
    """GELU, tanh approximation (matches the derivative used in backward)."""
    x = _as_tensor(x)
    c = math.sqrt(2.0 / math.pi)
    a = 0.044715
    x2 = x.data * x.data
    t = np.tanh(c * (x.data + a * x2 * x.data))
    out_data = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = c * (1.0 + 3.0 * a * x2)
        dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        _accum(x, g * dx)

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading batch axes follow numpy `@` broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, g @ np.swapaxes(b.data, -1, -2))
        _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# softmax / layer norm
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along `axis`, max-subtracted; normalizer summed in float64."""
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    # float64 accumulation for the normalizer; division back in input dtype
    denom = e.sum(axis=axis, dtype=np.float64, keepdims=True).astype(x.data.dtype)
    s = e / denom

    def backward(g):
        inner = (g * s).sum(axis=axis, dtype=np.float64, keepdims=True)
        _accum(x, s * (g - inner.astype(s.dtype)))

    return _make(s, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=-1, dtype=np.float64, keepdims=True)
    var = np.square(x.data.astype(np.float64) - mu).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x.data - mu) * inv).astype(x.data.dtype)
    out_data = xhat * gain.data + bias.data

    def backward(g):
        gy = g * gain.data
        m1 = gy.mean(axis=-1, dtype=np.float64, keepdims=True)
        m2 = (gy * xhat).mean(axis=-1, dtype=np.float64, keepdims=True)
        dx = (gy - m1 - xhat * m2) * inv
        _accum(x, dx.astype(x.data.dtype))
        red = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=red, dtype=np.float64).astype(gain.data.dtype))
        _accum(bias, g.sum(axis=red, dtype=np.float64).astype(bias.data.dtype))

    return _make(out_data, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# token-axis 1-D convolution
# ---------------------------------------------------------------------------

def conv1d(x, kernel, bias) -> Tensor:
    """Same-padded 1-D convolution along the token axis.

    x: (N, C_in) tokens by channels; kernel: (K, C_in, C_out), K odd;
    bias: (C_out,). out[n] = sum_k x_pad[n + k] @ kernel[k] + bias.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.ndim != 2 or kernel.ndim != 3:
        raise ValueError(f"conv1d expects x (N, C_in) and kernel (K, C_in, C_out), got {x.shape}, {kernel.shape}")
    k, c_in, c_out = kernel.shape
    if k % 2 == 0:
        raise ValueError("conv1d kernel size must be odd for same padding")
    if x.shape[1] != c_in or bias.shape != (c_out,):
        raise ValueError("conv1d channel mismatch")
    n = x.shape[0]
    pad = (k - 1) // 2
    xp = np.pad(x.data, ((pad, pad), (0, 0)))
    out_data = bias.data + sum(xp[o : o + n] @ kernel.data[o] for o in range(k))

    def backward(g):
        gk = np.stack([xp[o : o + n].T @ g for o in range(k)])
        _accum(kernel, gk)
        _accum(bias, g.sum(axis=0, dtype=np.float64).astype(bias.data.dtype))
        gxp = np.zeros_like(xp, dtype=g.dtype)
        for o in range(k):
            gxp[o : o + n] += g @ kernel.data[o].T
        _accum(x, gxp[pad : pad + n])

    return _make(out_data, (x, kernel, bias), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data.reshape(tuple(shape))

    def backward(g):
        _accum(x, g.reshape(x.data.shape))

    return _make(out_data, (x,), backward)


def flatten(x) -> Tensor:
    """Row-major flatten to 1-D."""
    return reshape(x, (-1,))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = x.data.transpose(axes)

    def backward(g):
        _accum(x, g.transpose(inv))

    return _make(out_data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(out_data, tuple(tensors), backward)


def split(x, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Inverse of concat along `axis`; sizes must cover the full extent."""
    x = _as_tensor(x)
    if sum(sizes) != x.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not cover extent {x.shape[axis]}")
    outs = []
    lo = 0
    for size in sizes:
        hi = lo + size
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(lo, hi)
        idx = tuple(idx)

        def backward(g, idx=idx):
            full = np.zeros(x.data.shape, dtype=g.dtype)
            full[idx] = g
            _accum(x, full)

        outs.append(_make(x.data[idx].copy(), (x,), backward))
        lo = hi
    return outs


# ---------------------------------------------------------------------------
# reductions (float64 accumulation)
# ---------------------------------------------------------------------------

def tsum(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data.sum(axis=axis, dtype=np.float64).astype(x.data.dtype)

    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return _make(out_data, (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data.mean(axis=axis, dtype=np.float64).astype(x.data.dtype)
    count = x.data.size if axis is None else x.data.shape[axis]

    def backward(g):
        g = g / count
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return _make(out_data, (x,), backward)


def variance(x, axis=None) -> Tensor:
    """Population variance (ddof=0), float64 accumulation."""
    x = _as_tensor(x)
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=axis, keepdims=True)
    centered = x64 - mu
    out_data = np.square(centered).mean(axis=axis).astype(x.data.dtype)
    count = x.data.size if axis is None else x.data.shape[axis]

    def backward(g):
        if axis is None:
            gb = np.broadcast_to(g, x.data.shape)
        else:
            gb = np.broadcast_to(np.expand_dims(g, axis), x.data.shape)
        _accum(x, (2.0 / count) * centered.astype(x.data.dtype) * gb)

    return _make(out_data, (x,), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup: out[i] = table[ids[i]]."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("embedding ids must be 1-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding id out of range [0, {table.shape[0]})")
    out_data = table.data[ids].copy()

    def backward(g):
        if table.requires_grad:
            gt = np.zeros(table.data.shape, dtype=g.dtype)
            np.add.at(gt, ids, g)
            _accum(table, gt)

    return _make(out_data, (table,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    tolerance: float
    passed: bool


def grad_check(
    op: Callable[[Tensor], Tensor],
    input: Tensor,
    eps: float = 1e-4,
    tolerance: float = 1e-3,
    op_name: str = "op",
) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    `op` must map the input tensor to a scalar. The probe runs in float64
    so finite-difference noise stays far below the 1e-3 tolerance regime
    even when the surrounding parameters are float32.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-6, 1e-3]")
    base = input.data.astype(np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    out = op(probe)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValueError("grad_check op must produce a scalar Tensor")
    out.backward()
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad.astype(np.float64)

    fd = np.zeros_like(base)
    flat = base.reshape(-1)
    fd_flat = fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = op(Tensor(base.copy())).item()
        flat[i] = orig - eps
        lo = op(Tensor(base.copy())).item()
        flat[i] = orig
        fd_flat[i] = (hi - lo) / (2.0 * eps)

    diff = np.abs(analytic - fd)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
    rel = np.where(diff < 1e-9, 0.0, diff / denom)
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(op_name, max_rel, tolerance, max_rel <= tolerance)

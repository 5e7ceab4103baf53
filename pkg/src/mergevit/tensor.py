"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a contiguous row-major numpy array (float64 by default,
float32 permitted) and records enough of the computation graph to run
backpropagation. Gradients are verified against ``finite_diff_grad``, the
central-difference oracle at the bottom of this module; the two must agree
for every operation that carries a backward rule.

All operations are pure: inputs are never mutated and the held arrays are
marked read-only at construction.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DomainError, EvaluationError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Score value that underflows to an exact 0.0 after exp(); used for masking.
NEG_FILL = -1.0e30

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _lock(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable dense array plus autodiff bookkeeping.

    ``data`` is the C-contiguous value array, ``grad`` is filled by
    ``backward()`` on every node that requires gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, dtype=np.float64, requires_grad: bool = False):
        arr = np.array(data, dtype=dtype, order="C")
        self.data = _lock(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    @classmethod
    def _wrap(cls, arr: np.ndarray, parents: tuple["Tensor", ...] = (),
              backward: Callable[[], None] | None = None) -> "Tensor":
        """Engine-internal constructor: takes ownership of ``arr`` (no copy)."""
        t = cls.__new__(cls)
        t.data = _lock(np.ascontiguousarray(arr))
        t.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = parents
            t._backward = backward
        else:
            t.requires_grad = False
            t._parents = ()
            t._backward = None
        return t

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff core ---------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar node, accumulating ``grad`` on the graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def _accum(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        out_data = self.data + other.data

        def backward():
            if self.requires_grad:
                self._accum(_reduce_to(out.grad, self.shape))
            if other.requires_grad:
                other._accum(_reduce_to(out.grad, other.shape))

        out = Tensor._wrap(out_data, (self, other), backward)
        return out

    __radd__ = __add__

    def __neg__(self):
        def backward():
            self._accum(-out.grad)

        out = Tensor._wrap(-self.data, (self,), backward)
        return out

    def __sub__(self, other):
        return self + (-_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)
        out_data = self.data * other.data

        def backward():
            if self.requires_grad:
                self._accum(_reduce_to(out.grad * other.data, self.shape))
            if other.requires_grad:
                other._accum(_reduce_to(out.grad * self.data, other.shape))

        out = Tensor._wrap(out_data, (self, other), backward)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other, self.dtype)
        return self * other ** -1.0

    def __pow__(self, exponent: float):
        # Constant exponent only; enough for rsqrt/var in layer norm.
        e = float(exponent)
        out_data = self.data ** e

        def backward():
            self._accum(out.grad * e * self.data ** (e - 1.0))

        out = Tensor._wrap(out_data, (self,), backward)
        return out

    # -- shape manipulation ------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def backward():
            self._accum(out.grad.reshape(self.shape))

        out = Tensor._wrap(out_data, (self,), backward)
        return out

    def transpose(self, axes: Sequence[int]):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out_data = self.data.transpose(axes)

        def backward():
            self._accum(out.grad.transpose(inv))

        out = Tensor._wrap(out_data, (self,), backward)
        return out

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.shape).copy())

        out = Tensor._wrap(np.asarray(out_data), (self,), backward)
        return out

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- matmul ---------------------------------------------------------------

    def matmul(self, other: "Tensor"):
        other = _as_tensor(other, self.dtype)
        if self.ndim < 2 or other.ndim < 2:
            raise ShapeError("matmul operands must have at least 2 dimensions")
        if self.shape[-1] != other.shape[-2]:
            raise ShapeError(
                f"matmul inner dimensions differ: {self.shape} x {other.shape}")
        out_data = np.matmul(self.data, other.data)

        def backward():
            g = out.grad
            if self.requires_grad:
                ga = np.matmul(g, other.data.swapaxes(-1, -2))
                self._accum(_reduce_to(ga, self.shape))
            if other.requires_grad:
                gb = np.matmul(self.data.swapaxes(-1, -2), g)
                other._accum(_reduce_to(gb, other.shape))

        out = Tensor._wrap(out_data, (self, other), backward)
        return out

    __matmul__ = matmul


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- scalar-field helpers ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with shared batch dimensions; inner dims must agree."""
    return a.matmul(b)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stable softmax along the last axis; rows sum to one."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward():
        g = out.grad
        dot = (g * y).sum(axis=-1, keepdims=True)
        x._accum(y * (g - dot))

    out = Tensor._wrap(y, (x,), backward)
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU, x * Phi(x)."""
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    y = x.data * phi

    def backward():
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        x._accum(out.grad * (phi + x.data * pdf))

    out = Tensor._wrap(y, (x,), backward)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise DomainError("layer_norm eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    return xc * inv * gamma + beta


def div_const(x: Tensor, divisor: np.ndarray) -> Tensor:
    """True division by a constant array (single rounding, unlike mul-by-reciprocal)."""
    d = np.asarray(divisor, dtype=x.data.dtype)
    out_data = x.data / d

    def backward():
        x._accum(_reduce_to(out.grad / d, x.shape))

    out = Tensor._wrap(out_data, (x,), backward)
    return out


def masked_fill(x: Tensor, keep: np.ndarray, fill_value: float) -> Tensor:
    """Replace entries where ``keep`` is falsy with ``fill_value`` (constant mask)."""
    keep = np.asarray(keep, dtype=bool)
    out_data = np.where(keep, x.data, fill_value)

    def backward():
        x._accum(np.where(keep, out.grad, 0.0))

    out = Tensor._wrap(out_data, (x,), backward)
    return out


def take_tokens(x: Tensor, idx: np.ndarray, inverse: np.ndarray | None = None) -> Tensor:
    """Gather rows along axis -2: out[..., s, :] = x[..., idx[s], :].

    ``inverse`` (optional, length x.shape[-2], -1 for "unused") marks ``idx``
    as an injective map and enables an assignment-based backward pass instead
    of scatter-add.
    """
    idx = np.asarray(idx, dtype=np.intp)
    out_data = np.take(x.data, idx, axis=-2)

    def backward():
        g = out.grad
        gx = np.zeros(x.shape, dtype=x.data.dtype)
        gx_m = np.moveaxis(gx, -2, 0)
        g_m = np.moveaxis(g, -2, 0)
        if inverse is not None:
            used = inverse >= 0
            gx_m[used] = g_m[inverse[used]]
        else:
            np.add.at(gx_m, idx, g_m)
        x._accum(gx)

    out = Tensor._wrap(out_data, (x,), backward)
    return out


def bilinear_sample(grid: Tensor, coords: Sequence[tuple[float, float]]) -> Tensor:
    """Bilinearly sample a [Gh, Gw, D] grid at (y, x) source-index coordinates.

    Integer coordinates return lattice values exactly. Coordinates may extend
    half a cell beyond the outermost centers and are clamped to the border;
    anything further out raises ``DomainError``.
    """
    gh, gw, _ = grid.shape
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    ys, xs = c[:, 0], c[:, 1]
    if ys.size and (ys.min() < -0.5 or ys.max() > gh - 0.5
                    or xs.min() < -0.5 or xs.max() > gw - 0.5):
        raise DomainError(
            f"sample coordinate outside [-0.5, {gh - 0.5}] x [-0.5, {gw - 0.5}]")
    yc = np.clip(ys, 0.0, gh - 1.0)
    xc = np.clip(xs, 0.0, gw - 1.0)
    y0 = np.floor(yc).astype(np.intp)
    x0 = np.floor(xc).astype(np.intp)
    fy = yc - y0
    fx = xc - x0
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)

    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    flat_idx = [y0 * gw + x0, y0 * gw + x1, y1 * gw + x0, y1 * gw + x1]
    weights = [w00, w01, w10, w11]

    flat = grid.data.reshape(gh * gw, -1)
    out_data = sum(w[:, None] * flat[i] for w, i in zip(weights, flat_idx))

    def backward():
        gflat = np.zeros_like(flat)
        for w, i in zip(weights, flat_idx):
            np.add.at(gflat, i, w[:, None] * out.grad)
        grid._accum(gflat.reshape(grid.shape))

    out = Tensor._wrap(out_data, (grid,), backward)
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits).

    ``logits`` is [C] or [B, C]; ``labels`` an int or an int array. Computed
    via log-sum-exp so huge logits cannot overflow.
    """
    z = logits.data
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
    y = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    n, c = z.shape
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape} does not match batch {n}")
    if y.min() < 0 or y.max() >= c:
        raise DomainError(f"label out of range [0, {c})")
    m = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=-1, keepdims=True)) + m
    losses = lse[:, 0] - z[np.arange(n), y]
    out_data = np.asarray(losses.mean())

    def backward():
        p = np.exp(z - lse)
        p[np.arange(n), y] -= 1.0
        g = out.grad * p / n
        logits._accum(g[0] if squeeze else g)

    out = Tensor._wrap(out_data, (logits,), backward)
    return out


# -- construction helpers ------------------------------------------------------


def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), dtype=dtype, requires_grad=requires_grad)


def constant(data, dtype=np.float64) -> Tensor:
    """Wrap existing array data as a non-differentiable Tensor without copying."""
    return Tensor._wrap(np.asarray(data, dtype=dtype))


def parameter(data, dtype=np.float64) -> Tensor:
    """Leaf tensor that accumulates gradients."""
    return Tensor(data, dtype=dtype, requires_grad=True)


# -- gradient oracle -----------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``: (f(x+he)-f(x-he))/2h.

    The independent oracle for every backward rule in this module; ``f`` must
    be pure and deterministic.
    """
    if h <= 0:
        raise DomainError("finite_diff_grad step must be positive")
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)

    def evaluate(arr: np.ndarray) -> float:
        val = f(Tensor(arr))
        val = val.item() if isinstance(val, Tensor) else float(val)
        if not math.isfinite(val):
            raise EvaluationError("function returned a non-finite value")
        return val

    for idx in np.ndindex(base.shape):
        xp = base.copy()
        xp[idx] += h
        xm = base.copy()
        xm[idx] -= h
        grad[idx] = (evaluate(xp) - evaluate(xm)) / (2.0 * h)
    return Tensor(grad)

"""Dense-tensor arithmetic with reverse-mode differentiation.

Every learned quantity in the package lives in a :class:`DiffTensor`: a numpy
buffer plus an optional gradient buffer and the bookkeeping needed to run a
reverse sweep over the expression graph that produced it. The op set is
deliberately small; anything a module needs is composed from these primitives
so there is exactly one backward rule per primitive to keep correct.

Summation order: reductions delegate to numpy's (pairwise, single-threaded)
summation, so results are deterministic for a fixed build. Backward passes
walk a topologically sorted node list single-threaded.

Tensors are immutable by convention once created; the only sanctioned
in-place mutation is an optimizer update on a leaf's ``data``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DiffTensor",
    "GradCheckReport",
    "tensor",
    "zeros",
    "stack",
    "concat",
    "where",
    "clamp",
    "amax_const",
    "softmax",
    "layer_norm",
    "gelu",
    "mlp_forward",
    "linear",
    "stop_gradient",
    "huber",
    "grad_check",
    "default_dtype",
    "set_default_dtype",
    "precision",
]

# 64-bit is the base contract; the 32-bit toggle exists for cheap training
# runs. Gradient checks force 64-bit regardless (finite differences are
# unreliable at 32-bit).
_DEFAULT_DTYPE = np.float64


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Switch the storage dtype for newly created tensors (float32/float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported storage dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


@contextmanager
def precision(dtype):
    """Temporarily change the default storage dtype."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class DiffTensor:
    """A dense value buffer paired with an optional same-shape gradient.

    Nodes created by an operation remember their parents and a closure that
    pushes the node's gradient one step toward the leaves. ``backward`` runs
    those closures in reverse topological order. A tensor created with
    ``requires_grad=False`` never receives a gradient and contributes zero to
    every upstream gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), _backward=None):
        if dtype is None:
            dtype = _DEFAULT_DTYPE if not isinstance(data, np.ndarray) or data.dtype.kind != "f" else data.dtype
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward: Callable[[], None] | None = _backward

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"DiffTensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.data, requires_grad=False, dtype=self.data.dtype)

    # -- graph plumbing ------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None) -> None:
        """Reverse sweep from this node; gradients land on requires_grad nodes."""
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ValueError("gradient shape mismatch")

        order: list[DiffTensor] = []
        seen: set[int] = {id(self)}
        # iterative post-order; graphs can be deep for long loops
        visiting: list[tuple[DiffTensor, int]] = [(self, 0)]
        while visiting:
            node, pi = visiting.pop()
            parents = node._parents
            if pi < len(parents):
                visiting.append((node, pi + 1))
                p = parents[pi]
                if id(p) not in seen and p.requires_grad:
                    seen.add(id(p))
                    visiting.append((p, 0))
            else:
                order.append(node)

        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic -----------------------------------------------------
    def _coerce(self, other) -> "DiffTensor":
        if isinstance(other, DiffTensor):
            return other
        return DiffTensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        out = DiffTensor(self.data + other.data,
                         requires_grad=self.requires_grad or other.requires_grad,
                         _parents=(self, other))

        def _bwd():
            if self.requires_grad:
                self._accumulate(_unbroadcast(out.grad, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(out.grad, other.shape))

        out._backward = _bwd
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        out = DiffTensor(self.data - other.data,
                         requires_grad=self.requires_grad or other.requires_grad,
                         _parents=(self, other))

        def _bwd():
            if self.requires_grad:
                self._accumulate(_unbroadcast(out.grad, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-out.grad, other.shape))

        out._backward = _bwd
        return out

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        other = self._coerce(other)
        out = DiffTensor(self.data * other.data,
                         requires_grad=self.requires_grad or other.requires_grad,
                         _parents=(self, other))

        def _bwd():
            if self.requires_grad:
                self._accumulate(_unbroadcast(out.grad * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(out.grad * self.data, other.shape))

        out._backward = _bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        out = DiffTensor(self.data / other.data,
                         requires_grad=self.requires_grad or other.requires_grad,
                         _parents=(self, other))

        def _bwd():
            if self.requires_grad:
                self._accumulate(_unbroadcast(out.grad / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-out.grad * self.data / (other.data ** 2), other.shape))

        out._backward = _bwd
        return out

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __neg__(self):
        out = DiffTensor(-self.data, requires_grad=self.requires_grad, _parents=(self,))

        def _bwd():
            if self.requires_grad:
                self._accumulate(-out.grad)

        out._backward = _bwd
        return out

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = DiffTensor(self.data ** p, requires_grad=self.requires_grad, _parents=(self,))

        def _bwd():
            if self.requires_grad:
                self._accumulate(out.grad * p * self.data ** (p - 1))

        out._backward = _bwd
        return out

    def __matmul__(self, other):
        other = self._coerce(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ValueError("matmul operands must be at least 2-D")
        out = DiffTensor(self.data @ other.data,
                         requires_grad=self.requires_grad or other.requires_grad,
                         _parents=(self, other))

        def _bwd():
            g = out.grad
            if self.requires_grad:
                ga = g @ np.swapaxes(other.data, -1, -2)
                self._accumulate(_unbroadcast(ga, self.shape))
            if other.requires_grad:
                gb = np.swapaxes(self.data, -1, -2) @ g
                other._accumulate(_unbroadcast(gb, other.shape))

        out._backward = _bwd
        return out

    # -- elementwise functions -------------------------------------------
    def exp(self):
        out = DiffTensor(np.exp(self.data), requires_grad=self.requires_grad, _parents=(self,))

        def _bwd():
            if self.requires_grad:
                self._accumulate(out.grad * out.data)

        out._backward = _bwd
        return out

    def log(self):
        out = DiffTensor(np.log(self.data), requires_grad=self.requires_grad, _parents=(self,))

        def _bwd():
            if self.requires_grad:
                self._accumulate(out.grad / self.data)

        out._backward = _bwd
        return out

    def sqrt(self):
        out = DiffTensor(np.sqrt(self.data), requires_grad=self.requires_grad, _parents=(self,))

        def _bwd():
            if self.requires_grad:
                self._accumulate(out.grad * 0.5 / out.data)

        out._backward = _bwd
        return out

    def tanh(self):
        out = DiffTensor(np.tanh(self.data), requires_grad=self.requires_grad, _parents=(self,))

        def _bwd():
            if self.requires_grad:
                self._accumulate(out.grad * (1.0 - out.data ** 2))

        out._backward = _bwd
        return out

    def sigmoid(self):
        # stable two-sided formulation
        x = self.data
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        out = DiffTensor(s, requires_grad=self.requires_grad, _parents=(self,))

        def _bwd():
            if self.requires_grad:
                self._accumulate(out.grad * out.data * (1.0 - out.data))

        out._backward = _bwd
        return out

    def softplus(self):
        x = self.data
        out = DiffTensor(np.logaddexp(0.0, x), requires_grad=self.requires_grad, _parents=(self,))

        def _bwd():
            if self.requires_grad:
                sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                               np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
                self._accumulate(out.grad * sig)

        out._backward = _bwd
        return out

    def abs(self):
        """Elementwise absolute value; subgradient at 0 is 0 (np.sign convention)."""
        out = DiffTensor(np.abs(self.data), requires_grad=self.requires_grad, _parents=(self,))

        def _bwd():
            if self.requires_grad:
                self._accumulate(out.grad * np.sign(self.data))

        out._backward = _bwd
        return out

    # -- reductions ------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        out = DiffTensor(out_data, requires_grad=self.requires_grad, _parents=(self,))

        def _bwd():
            if not self.requires_grad:
                return
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape).copy())

        out._backward = _bwd
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else (
            np.prod([self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- shape manipulation -----------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = DiffTensor(self.data.reshape(shape), requires_grad=self.requires_grad, _parents=(self,))

        def _bwd():
            if self.requires_grad:
                self._accumulate(out.grad.reshape(self.shape))

        out._backward = _bwd
        return out

    def transpose(self, axes: Sequence[int]):
        axes = tuple(axes)
        out = DiffTensor(self.data.transpose(axes), requires_grad=self.requires_grad, _parents=(self,))
        inv = tuple(np.argsort(axes))

        def _bwd():
            if self.requires_grad:
                self._accumulate(out.grad.transpose(inv))

        out._backward = _bwd
        return out

    def __getitem__(self, idx):
        out = DiffTensor(self.data[idx], requires_grad=self.requires_grad, _parents=(self,))

        def _bwd():
            if self.requires_grad:
                g = np.zeros_like(self.data)
                np.add.at(g, idx, out.grad)
                self._accumulate(g)

        out._backward = _bwd
        return out

    def take(self, indices, axis: int):
        """Gather along `axis`; backward scatter-adds."""
        indices = np.asarray(indices)
        out = DiffTensor(np.take(self.data, indices, axis=axis),
                         requires_grad=self.requires_grad, _parents=(self,))

        def _bwd():
            if self.requires_grad:
                g = np.zeros_like(self.data)
                sl = [slice(None)] * self.ndim
                sl[axis] = indices
                np.add.at(g, tuple(sl), out.grad)
                self._accumulate(g)

        out._backward = _bwd
        return out

    def pad2d(self, pad: int):
        """Zero-pad the last two dimensions by `pad` on each side."""
        width = [(0, 0)] * (self.ndim - 2) + [(pad, pad), (pad, pad)]
        out = DiffTensor(np.pad(self.data, width), requires_grad=self.requires_grad, _parents=(self,))
        sl = tuple([slice(None)] * (self.ndim - 2) + [slice(pad, -pad or None)] * 2)

        def _bwd():
            if self.requires_grad:
                self._accumulate(out.grad[sl])

        out._backward = _bwd
        return out


# -- constructors ----------------------------------------------------------

def tensor(data, requires_grad: bool = False, dtype=None) -> DiffTensor:
    if dtype is None:
        dtype = _DEFAULT_DTYPE
    return DiffTensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False) -> DiffTensor:
    return DiffTensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


# -- structural ops ----------------------------------------------------------

def stack(tensors: Sequence[DiffTensor], axis: int = 0) -> DiffTensor:
    req = any(t.requires_grad for t in tensors)
    out = DiffTensor(np.stack([t.data for t in tensors], axis=axis),
                     requires_grad=req, _parents=tuple(tensors))

    def _bwd():
        gs = np.split(out.grad, len(tensors), axis=axis)
        for t, g in zip(tensors, gs):
            if t.requires_grad:
                t._accumulate(np.squeeze(g, axis=axis))

    out._backward = _bwd
    return out


def concat(tensors: Sequence[DiffTensor], axis: int = 0) -> DiffTensor:
    req = any(t.requires_grad for t in tensors)
    out = DiffTensor(np.concatenate([t.data for t in tensors], axis=axis),
                     requires_grad=req, _parents=tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bwd():
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * out.ndim
                sl[axis] = slice(a, b)
                t._accumulate(out.grad[tuple(sl)])

    out._backward = _bwd
    return out


def where(mask, a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Select by a constant boolean mask; the mask carries no gradient."""
    mask = np.asarray(mask, dtype=bool)
    if not isinstance(a, DiffTensor):
        a = DiffTensor(np.asarray(a))
    if not isinstance(b, DiffTensor):
        b = DiffTensor(np.asarray(b))
    out = DiffTensor(np.where(mask, a.data, b.data),
                     requires_grad=a.requires_grad or b.requires_grad, _parents=(a, b))

    def _bwd():
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(mask, out.grad, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(mask, 0.0, out.grad), b.shape))

    out._backward = _bwd
    return out


def clamp(x: DiffTensor, lo: float, hi: float) -> DiffTensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside the interval."""
    out = DiffTensor(np.clip(x.data, lo, hi), requires_grad=x.requires_grad, _parents=(x,))
    inside = (x.data > lo) & (x.data < hi)

    def _bwd():
        if x.requires_grad:
            x._accumulate(np.where(inside, out.grad, 0.0))

    out._backward = _bwd
    return out


def amax_const(x: DiffTensor, axis: int, keepdims: bool = True) -> DiffTensor:
    """Max along an axis, detached from the graph (used for softmax stability)."""
    return DiffTensor(x.data.max(axis=axis, keepdims=keepdims))


def sum_ordered(x: DiffTensor, axis: int, keepdims: bool = False) -> DiffTensor:
    """Sum along `axis` in ascending value order.

    The result depends only on the multiset of addends, so permuting the
    axis leaves the output bit-identical.  The backward pass broadcasts
    the upstream gradient, which is order-free anyway.
    """
    out_data = np.sort(x.data, axis=axis).sum(axis=axis, keepdims=keepdims)
    out = DiffTensor(out_data, requires_grad=x.requires_grad, _parents=(x,))

    def _bwd():
        if not x.requires_grad:
            return
        g = out.grad
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape).copy())

    out._backward = _bwd
    return out


# -- named operations ---------------------------------------------------------

def stop_gradient(x: DiffTensor) -> DiffTensor:
    """Identity whose pullback is exactly zero.

    The returned tensor shares no graph history with `x`; its value is the
    same buffer.
    """
    return DiffTensor(x.data, requires_grad=False, dtype=x.data.dtype)


def softmax(logits: DiffTensor, axis: int) -> DiffTensor:
    """Numerically stable softmax along `axis`.

    Raises ValueError on non-finite input, reporting the first offending
    (flat) index.
    """
    if not -logits.ndim <= axis < logits.ndim:
        raise ValueError(f"axis {axis} invalid for shape {logits.shape}")
    bad = ~np.isfinite(logits.data)
    if bad.any():
        idx = int(np.argmax(bad))
        raise ValueError(f"non-finite logit at flat index {idx}")
    shifted = logits - amax_const(logits, axis=axis, keepdims=True)
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x: DiffTensor, gain: DiffTensor, bias: DiffTensor, eps: float = 1e-5) -> DiffTensor:
    """Normalize over the last dimension, then scale by `gain` and shift by `bias`."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / (var + eps).sqrt() * gain + bias


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: DiffTensor) -> DiffTensor:
    """tanh-form GELU approximation."""
    inner = (x + x * x * x * 0.044715) * _GELU_C
    return x * (inner.tanh() + 1.0) * 0.5


def linear(x: DiffTensor, w: DiffTensor, b: DiffTensor | None = None) -> DiffTensor:
    """x @ w (+ b) over the last dimension; x may carry leading batch dims."""
    lead = x.shape[:-1]
    y = x.reshape((-1, x.shape[-1])) @ w
    if b is not None:
        y = y + b
    return y.reshape(lead + (w.shape[-1],))


def mlp_forward(x: DiffTensor, weights: Sequence[tuple[DiffTensor, DiffTensor]]) -> DiffTensor:
    """Apply linear layers with a GELU between consecutive layers.

    `weights` is a list of (W, b) pairs; a single pair is a plain linear map.
    """
    out = x
    for i, (w, b) in enumerate(weights):
        out = linear(out, w, b)
        if i < len(weights) - 1:
            out = gelu(out)
    return out


def huber(residual: DiffTensor, delta: float) -> DiffTensor:
    """Summed Huber penalty: 0.5 r^2 inside |r| <= delta, linear outside."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    a = residual.abs()
    quad = residual * residual * 0.5
    lin = a * delta - (0.5 * delta * delta)
    return where(a.data <= delta, quad, lin).sum()


# -- gradient checking ---------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst_index: int
    passed: bool

    def __str__(self):
        flag = "PASS" if self.passed else "FAIL"
        return (f"[{flag}] max_rel={self.max_rel_error:.3e} "
                f"max_abs={self.max_abs_error:.3e} worst_index={self.worst_index}")


def grad_check(f: Callable[[DiffTensor], DiffTensor], x: DiffTensor,
               h: float = 1e-5, tol: float = 1e-4, abs_tol: float = 1e-8) -> GradCheckReport:
    """Compare the analytic gradient of a scalar-valued `f` at `x` against
    central finite differences, element by element.

    Runs in 64-bit regardless of the current default dtype.
    """
    x0 = np.asarray(x.data, dtype=np.float64)
    with precision(np.float64):
        xt = DiffTensor(x0.copy(), requires_grad=True)
        y = f(xt)
        if y.size != 1:
            raise ValueError("grad_check target must be scalar-valued")
        if not np.isfinite(y.data).all():
            raise ValueError("non-finite function value at x")
        y.backward()
        analytic = xt.grad.copy() if xt.grad is not None else np.zeros_like(x0)

        fd = np.zeros_like(x0)
        flat = x0.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f(DiffTensor(x0.copy())).data
            flat[i] = old - h
            fm = f(DiffTensor(x0.copy())).data
            flat[i] = old
            if not (np.isfinite(fp).all() and np.isfinite(fm).all()):
                raise ValueError(f"non-finite function value while probing index {i}")
            fd_flat[i] = (float(fp) - float(fm)) / (2.0 * h)

    abs_err = np.abs(analytic - fd)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-12)
    rel_err = abs_err / denom
    worst = int(np.argmax(rel_err))
    max_rel = float(rel_err.max()) if rel_err.size else 0.0
    max_abs = float(abs_err.max()) if abs_err.size else 0.0
    passed = (max_rel <= tol) or (max_abs <= abs_tol)
    return GradCheckReport(max_rel_error=max_rel, max_abs_error=max_abs,
                           worst_index=worst, passed=passed)

"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is deliberately small and closed: elementwise arithmetic,
matmul, conv2d, relu, exp/log/sqrt/cos, arccos (guarded), reductions,
reshape/transpose, gather and clip. Every op records a backward closure;
calling ``backward()`` on a scalar replays the graph in reverse
topological order and accumulates gradients into the leaves.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateInputError,
    ShapeMismatchError,
)

# Floor for normalization denominators; inputs below it are rejected.
EPS_NORM = 1e-12

# Cap on |d/dx arccos(x)| near x = +-1, where the true derivative diverges.
_ARCCOS_GRAD_FLOOR = 1e-12


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over axes that were broadcast to reach `grad.shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Immutable-by-convention dense array plus a node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise ValueError("tensor data must be finite (no NaN/Inf)")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev: tuple[Tensor, ...] = ()

    # -- graph plumbing ------------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, prev: tuple["Tensor", ...]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in prev)
        out._prev = prev if out.requires_grad else ()
        out._backward = None
        return out

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into `.grad` of every reachable leaf."""
        if self.data.size != 1:
            raise ContractError(
                f"backward root must be scalar, got shape {self.data.shape}"
            )
        # Iterative postorder; recursion depth would otherwise track the
        # number of unrolled Sinkhorn iterations.
        order: list[Tensor] = []
        visited = {id(self)}
        stack: list[tuple[Tensor, int]] = [(self, 0)]
        while stack:
            node, child_idx = stack.pop()
            if child_idx < len(node._prev):
                stack.append((node, child_idx + 1))
                child = node._prev[child_idx]
                if child.requires_grad and id(child) not in visited:
                    visited.add(id(child))
                    stack.append((child, 0))
            else:
                order.append(node)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- introspection --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        out = Tensor._make(self.data + other.data, (self, other))
        if out.requires_grad:
            def _bw():
                if self.requires_grad:
                    self._accum(_unbroadcast(out.grad, self.data.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(out.grad, other.data.shape))
            out._backward = _bw
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = Tensor._make(-self.data, (self,))
        if out.requires_grad:
            out._backward = lambda: self._accum(-out.grad)
        return out

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        out = Tensor._make(self.data * other.data, (self, other))
        if out.requires_grad:
            def _bw():
                if self.requires_grad:
                    self._accum(_unbroadcast(out.grad * other.data, self.data.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(out.grad * self.data, other.data.shape))
            out._backward = _bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        out = Tensor._make(self.data / other.data, (self, other))
        if out.requires_grad:
            def _bw():
                if self.requires_grad:
                    self._accum(_unbroadcast(out.grad / other.data, self.data.shape))
                if other.requires_grad:
                    g = -out.grad * self.data / (other.data * other.data)
                    other._accum(_unbroadcast(g, other.data.shape))
            out._backward = _bw
        return out

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        exponent = float(exponent)
        out = Tensor._make(self.data ** exponent, (self,))
        if out.requires_grad:
            def _bw():
                self._accum(out.grad * exponent * self.data ** (exponent - 1.0))
            out._backward = _bw
        return out

    # -- linear algebra ---------------------------------------------------

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatchError(
                f"matmul requires 2-D operands with matching inner dims, "
                f"got {a.shape} and {b.shape}"
            )
        out = Tensor._make(a @ b, (self, other))
        if out.requires_grad:
            def _bw():
                if self.requires_grad:
                    self._accum(out.grad @ b.T)
                if other.requires_grad:
                    other._accum(a.T @ out.grad)
            out._backward = _bw
        return out

    @property
    def T(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ShapeMismatchError(f"T expects a 2-D tensor, got {self.data.shape}")
        out = Tensor._make(self.data.T, (self,))
        if out.requires_grad:
            out._backward = lambda: self._accum(out.grad.T)
        return out

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor._make(self.data.reshape(shape), (self,))
        if out.requires_grad:
            out._backward = lambda: self._accum(out.grad.reshape(self.data.shape))
        return out

    def gather(self, indices, axis: int = 0) -> "Tensor":
        """Select rows/entries along `axis`; backward scatter-adds."""
        idx = np.asarray(indices, dtype=np.intp)
        out = Tensor._make(np.take(self.data, idx, axis=axis), (self,))
        if out.requires_grad:
            def _bw():
                g = np.zeros_like(self.data)
                moved = np.moveaxis(g, axis, 0)
                np.add.at(moved, idx, np.moveaxis(out.grad, axis, 0))
                self._accum(g)
            out._backward = _bw
        return out

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            def _bw():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.data.shape).copy())
            out._backward = _bw
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    # -- elementwise nonlinearities --------------------------------------------

    def exp(self) -> "Tensor":
        out = Tensor._make(np.exp(self.data), (self,))
        if out.requires_grad:
            out._backward = lambda: self._accum(out.grad * out.data)
        return out

    def log(self) -> "Tensor":
        if np.any(self.data <= 0.0):
            raise DegenerateInputError("log requires strictly positive entries")
        out = Tensor._make(np.log(self.data), (self,))
        if out.requires_grad:
            out._backward = lambda: self._accum(out.grad / self.data)
        return out

    def sqrt(self) -> "Tensor":
        if np.any(self.data < 0.0):
            raise DegenerateInputError("sqrt requires nonnegative entries")
        out = Tensor._make(np.sqrt(self.data), (self,))
        if out.requires_grad:
            out._backward = lambda: self._accum(out.grad * 0.5 / out.data)
        return out

    def relu(self) -> "Tensor":
        out = Tensor._make(np.maximum(self.data, 0.0), (self,))
        if out.requires_grad:
            mask = self.data > 0.0
            out._backward = lambda: self._accum(out.grad * mask)
        return out

    def cos(self) -> "Tensor":
        out = Tensor._make(np.cos(self.data), (self,))
        if out.requires_grad:
            out._backward = lambda: self._accum(-out.grad * np.sin(self.data))
        return out

    def clip(self, lo: float, hi: float) -> "Tensor":
        out = Tensor._make(np.clip(self.data, lo, hi), (self,))
        if out.requires_grad:
            mask = (self.data >= lo) & (self.data <= hi)
            out._backward = lambda: self._accum(out.grad * mask)
        return out

    def arccos(self) -> "Tensor":
        """arccos with input clamped to [-1, 1] and a capped derivative.

        The true derivative diverges at +-1; the clamp plus the floor on
        1 - x^2 keeps the backward pass finite (margin logits hit the
        boundary whenever an embedding aligns exactly with its class
        weight).
        """
        clamped = np.clip(self.data, -1.0, 1.0)
        out = Tensor._make(np.arccos(clamped), (self,))
        if out.requires_grad:
            denom = np.sqrt(np.maximum(1.0 - clamped * clamped, _ARCCOS_GRAD_FLOOR))
            out._backward = lambda: self._accum(-out.grad / denom)
        return out


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out_extent(extent: int, k: int, stride: int, padding: int) -> int:
    span = extent + 2 * padding - k
    if span < 0:
        raise ConfigurationError(
            f"kernel extent {k} exceeds padded input extent {extent + 2 * padding}"
        )
    if span % stride != 0:
        raise ConfigurationError(
            f"non-integral conv output extent: (({extent}+2*{padding}-{k})/{stride})+1"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            out_h: int, out_w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[
                :, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride
            ]
    return cols.reshape(n, c * kh * kw, out_h * out_w)


def _col2im(cols: np.ndarray, x_shape: tuple[int, ...], kh: int, kw: int,
            stride: int, padding: int, out_h: int, out_w: int) -> np.ndarray:
    n, c, h, w = x_shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    cols = cols.reshape(n, c, kh, kw, out_h, out_w)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] \
                += cols[:, :, i, j]
    if padding:
        return xp[:, :, padding:-padding, padding:-padding]
    return xp


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Strided cross-correlation of `x` with `kernels`.

    `x` is (c_in, h, w) or batched (n, c_in, h, w); `kernels` is
    (c_out, c_in, kh, kw). Output spatial extent is
    (h + 2*padding - kh)/stride + 1, which must be integral.
    """
    x = as_tensor(x)
    kernels = as_tensor(kernels)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d expects (n,c,h,w) input and (co,ci,kh,kw) kernels, "
            f"got {x.data.shape} and {kernels.data.shape}"
        )
    n, c_in, h, w = xd.shape
    c_out, c_in_k, kh, kw = kernels.data.shape
    if c_in != c_in_k:
        raise ShapeMismatchError(
            f"conv2d channel mismatch: input has {c_in}, kernels expect {c_in_k}"
        )
    out_h = _conv_out_extent(h, kh, stride, padding)
    out_w = _conv_out_extent(w, kw, stride, padding)

    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)  # (n, ci*kh*kw, oh*ow)
    wmat = kernels.data.reshape(c_out, -1)
    out_data = np.matmul(wmat, cols).reshape(n, c_out, out_h, out_w)
    if squeeze:
        out_data = out_data[0]

    out = Tensor._make(out_data, (x, kernels))
    if out.requires_grad:
        def _bw():
            g = out.grad[None] if squeeze else out.grad
            g_flat = g.reshape(n, c_out, out_h * out_w)
            if kernels.requires_grad:
                gw = np.einsum("nop,ncp->oc", g_flat, cols).reshape(kernels.data.shape)
                kernels._accum(gw)
            if x.requires_grad:
                gcols = np.matmul(wmat.T, g_flat)
                gx = _col2im(gcols, (n, c_in, h, w), kh, kw, stride, padding,
                             out_h, out_w)
                x._accum(gx[0] if squeeze else gx)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# normalization and cosine geometry
# ---------------------------------------------------------------------------

def l2_normalize(v: Tensor) -> Tensor:
    """Scale a vector to unit L2 norm; rejects near-zero inputs."""
    v = as_tensor(v)
    norm = float(np.linalg.norm(v.data))
    if norm <= EPS_NORM:
        raise DegenerateInputError(f"cannot normalize vector with norm {norm:.3e}")
    return v / (v * v).sum().sqrt()


def normalize_rows(m: Tensor) -> Tensor:
    """L2-normalize each row of a 2-D tensor."""
    m = as_tensor(m)
    norms = np.linalg.norm(m.data, axis=1)
    bad = np.nonzero(norms <= EPS_NORM)[0]
    if bad.size:
        raise DegenerateInputError(f"row {int(bad[0])} has norm {norms[bad[0]]:.3e}")
    return m / (m * m).sum(axis=1, keepdims=True).sqrt()


def normalize_cols(m: Tensor) -> Tensor:
    """L2-normalize each column of a 2-D tensor."""
    m = as_tensor(m)
    norms = np.linalg.norm(m.data, axis=0)
    bad = np.nonzero(norms <= EPS_NORM)[0]
    if bad.size:
        raise DegenerateInputError(f"column {int(bad[0])} has norm {norms[bad[0]]:.3e}")
    return m / (m * m).sum(axis=0, keepdims=True).sqrt()


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """cos of the angle between two vectors, clamped to [-1, 1]."""
    a = l2_normalize(as_tensor(a).reshape(-1))
    b = l2_normalize(as_tensor(b).reshape(-1))
    return (a * b).sum().clip(-1.0, 1.0)


def cosine_distance(a: Tensor, b: Tensor) -> Tensor:
    """1 - cosine_similarity, in [0, 2]."""
    return 1.0 - cosine_similarity(a, b)

"""Small numpy-backed tensor engine with reverse-mode automatic differentiation.

Every differentiable operation builds a node that remembers its parents and a
closure mapping the output gradient to one gradient per parent. Calling
:func:`backward` on a scalar walks the recorded graph in reverse topological
order and accumulates ``grad`` on every leaf that asked for one.

Only what the traffic models need is here: elementwise arithmetic, matmul,
3x3 / 1x1 "same" convolutions, 2x2 average pooling, nearest upsampling,
concatenation, padding/cropping and CSR sparse-dense products.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import NumericError, ShapeError

DTYPES = {"byte": np.uint8, "float32": np.float32, "float64": np.float64}

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.uint8, np.float32, np.float64):
            arr = arr.astype(np.float64)
        if requires_grad and arr.dtype == np.uint8:
            raise ShapeError("byte tensors cannot require gradients")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def backward(self):
        backward(self)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by tensors is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)


class Parameter(Tensor):
    """A named trainable leaf; ``grad`` is always allocated and same-shaped."""

    __slots__ = ("name",)

    def __init__(self, name: str, value, dtype=np.float32):
        super().__init__(np.array(value, dtype=dtype), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _check_float(*tensors: Tensor):
    for t in tensors:
        if t.dtype == np.uint8:
            raise ShapeError("byte tensor passed to a differentiable op; cast to float first")


def _node(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- autodiff


def topological_order(root: Tensor) -> list[Tensor]:
    """Producer-before-consumer ordering of every grad-requiring node under ``root``.

    This list is the recorded tape: replaying it in reverse visits each node
    after all of its consumers.
    """
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g.astype(node.data.dtype, copy=False)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a)
    _check_float(a, b)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), grad_fn, "add")


def neg(a: Tensor) -> Tensor:
    _check_float(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    _check_float(a)
    c = a.dtype.type(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_float(a, b)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)

    return _node(a.data * b.data, (a, b), grad_fn, "mul")


def relu(a: Tensor) -> Tensor:
    _check_float(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def square(a: Tensor) -> Tensor:
    _check_float(a)
    return _node(a.data * a.data, (a,), lambda g: (2 * a.data * g,), "square")


# ---------------------------------------------------------------- reductions / shape


def tsum(a: Tensor, axis=None) -> Tensor:
    _check_float(a)
    shape = a.shape

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis)), (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    _check_float(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn, "concat")


def pad_bottom_right(x: Tensor, ph: int, pw: int) -> Tensor:
    """Zero-pad the last two axes at the high end."""
    if ph == 0 and pw == 0:
        return x
    h, w = x.shape[-2:]
    widths = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    return _node(np.pad(x.data, widths), (x,), lambda g: (g[..., :h, :w].copy(),), "pad")


def crop_top_left(x: Tensor, h: int, w: int) -> Tensor:
    H, W = x.shape[-2:]
    if (h, w) == (H, W):
        return x
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., :h, :w] = g
        return (full,)

    return _node(x.data[..., :h, :w].copy(), (x,), grad_fn, "crop")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_float(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul mismatch {a.shape} @ {b.shape}")
    if b.ndim != 2 or a.ndim < 2:
        raise ShapeError("matmul expects (..., n, k) @ (k, m)")
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
        return ga, gb

    return _node(a.data @ b.data, (a, b), grad_fn, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element."""
    target = _lift(target, pred)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shape mismatch {pred.shape} vs {target.shape}")
    _check_float(pred, target)
    diff = pred.data - target.data
    n = diff.size
    c = pred.dtype.type(2.0 / n)

    def grad_fn(g):
        gp = diff * (c * g)
        return gp, -gp

    return _node(np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred, target), grad_fn, "mse")


# ---------------------------------------------------------------- image ops


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got {x.shape}")
    return x, False


_IM2COL_LIMIT = 1 << 26  # bytes; larger inputs fall back to a per-tap loop


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution (cross-correlation) with an odd square kernel.

    ``x`` is (C_in, H, W) or (B, C_in, H, W); ``w`` is (C_out, C_in, k, k).
    """
    _check_float(x, w)
    xb, squeeze = _as_batched(x)
    B, C, H, W = xb.shape
    O, Ci, kh, kw = w.shape
    if Ci != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Ci}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d needs an odd square kernel, got {kh}x{kw}")
    p = kh // 2
    xd, wd = xb.data, w.data
    dtype = np.result_type(xd, wd)
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    taps = [(i, j) for i in range(kh) for j in range(kw)]
    use_cols = C * kh * kw * B * H * W * dtype.itemsize <= _IM2COL_LIMIT
    parents = (xb, w) if b is None else (xb, w, b)

    if use_cols:
        # rows ordered (c, i, j) to match w.reshape(O, C*k*k); columns ordered (b, h, w)
        cols = np.empty((C, kh, kw, B, H, W), dtype=xd.dtype)
        for i, j in taps:
            cols[:, i, j] = xp[:, :, i:i + H, j:j + W].transpose(1, 0, 2, 3)
        cols = cols.reshape(C * kh * kw, B * H * W)
        w2 = wd.reshape(O, -1)
        out = (w2 @ cols).reshape(O, B, H, W).transpose(1, 0, 2, 3)
        if b is not None:
            out = out + b.data[None, :, None, None]
        out = np.ascontiguousarray(out)

        def grad_fn(g):
            g2 = g.transpose(1, 0, 2, 3).reshape(O, B * H * W)
            gw = (g2 @ cols.T).reshape(wd.shape)
            dcols = (w2.T @ g2).reshape(C, kh, kw, B, H, W)
            gxp = np.zeros_like(xp)
            for i, j in taps:
                gxp[:, :, i:i + H, j:j + W] += dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
            grads = [np.ascontiguousarray(gx), gw]
            if b is not None:
                grads.append(g2.sum(axis=1))
            return tuple(grads)
    else:
        out = np.zeros((B, O, H * W), dtype=dtype)
        for i, j in taps:
            out += np.matmul(wd[:, :, i, j], xp[:, :, i:i + H, j:j + W].reshape(B, C, H * W))
        if b is not None:
            out += b.data[None, :, None]
        out = out.reshape(B, O, H, W)

        def grad_fn(g):
            g2 = g.reshape(B, O, H * W)
            gw = np.zeros_like(wd)
            gxp = np.zeros_like(xp)
            for i, j in taps:
                xs = xp[:, :, i:i + H, j:j + W].reshape(B, C, H * W)
                gw[:, :, i, j] = np.matmul(g2, xs.transpose(0, 2, 1)).sum(axis=0)
                gxp[:, :, i:i + H, j:j + W] += np.matmul(wd[:, :, i, j].T, g2).reshape(B, C, H, W)
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
            grads = [np.ascontiguousarray(gx), gw]
            if b is not None:
                grads.append(g2.sum(axis=(0, 2)))
            return tuple(grads)

    y = _node(out, parents, grad_fn, "conv2d")
    return reshape(y, y.shape[1:]) if squeeze else y


def avg_pool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 mean pooling over the last two axes."""
    _check_float(x)
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {H}x{W}")
    lead = x.shape[:-2]
    blocks = x.data.reshape(lead + (H // 2, 2, W // 2, 2))
    axes = (len(lead) + 1, len(lead) + 3)
    out = blocks.mean(axis=axes)

    def grad_fn(g):
        g4 = np.expand_dims(g, axes) * x.dtype.type(0.25)
        return (np.broadcast_to(g4, blocks.shape).reshape(x.shape).copy(),)

    return _node(out, (x,), grad_fn, "avg_pool2")


def upsample_nearest2(x: Tensor) -> Tensor:
    _check_float(x)
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def grad_fn(g):
        return (g.reshape(lead + (h, 2, w, 2)).sum(axis=(len(lead) + 1, len(lead) + 3)),)

    return _node(out, (x,), grad_fn, "upsample")


# ---------------------------------------------------------------- sparse


@dataclass
class SparseMatrix:
    """CSR matrix: ``row_ptr`` offsets, strictly increasing ``col_idx`` per row."""

    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    _csr: sp.csr_matrix | None = field(default=None, repr=False, compare=False)
    _csr_t: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.row_ptr = np.asarray(self.row_ptr, dtype=np.int64)
        self.col_idx = np.asarray(self.col_idx, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.validate()

    def validate(self):
        rp, ci = self.row_ptr, self.col_idx
        if rp.shape != (self.n_rows + 1,) or rp[0] != 0 or rp[-1] != ci.size:
            raise ShapeError("row_ptr must have n_rows+1 entries from 0 to nnz")
        if np.any(np.diff(rp) < 0):
            raise ShapeError("row_ptr must be monotone")
        if ci.size != self.values.size:
            raise ShapeError("col_idx and values lengths differ")
        if ci.size and (ci.min() < 0 or ci.max() >= self.n_cols):
            raise ShapeError("column index out of range")
        if ci.size > 1:
            rows = np.repeat(np.arange(self.n_rows), np.diff(rp))
            bad = (rows[1:] == rows[:-1]) & (np.diff(ci) <= 0)
            if bad.any():
                raise ShapeError(f"row {rows[1:][bad][0]}: column indices not strictly increasing")

    @property
    def nnz(self) -> int:
        return int(self.col_idx.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @classmethod
    def from_dense(cls, a: np.ndarray) -> "SparseMatrix":
        m = sp.csr_matrix(np.asarray(a, dtype=np.float64))
        m.sort_indices()
        return cls(a.shape[0], a.shape[1], m.indptr, m.indices, m.data)

    @classmethod
    def from_scipy(cls, m) -> "SparseMatrix":
        m = sp.csr_matrix(m)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    def to_scipy(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix((self.values, self.col_idx, self.row_ptr), shape=self.shape)
        return self._csr

    def transposed_scipy(self) -> sp.csr_matrix:
        if self._csr_t is None:
            self._csr_t = self.to_scipy().T.tocsr()
        return self._csr_t

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        for r in range(self.n_rows):
            lo, hi = self.row_ptr[r], self.row_ptr[r + 1]
            out[r, self.col_idx[lo:hi]] = self.values[lo:hi]
        return out

    def row_sums(self) -> np.ndarray:
        rows = np.repeat(np.arange(self.n_rows), np.diff(self.row_ptr))
        return np.bincount(rows, weights=self.values, minlength=self.n_rows)


def spmm(s: SparseMatrix, x: Tensor, weights: Tensor | None = None) -> Tensor:
    """Sparse (M,N) times dense (N,F) or batched (B,N,F).

    ``weights`` optionally supplies the nnz values as a differentiable tensor
    in place of ``s.values``.
    """
    _check_float(x)
    if x.shape[-2] != s.n_cols:
        raise ShapeError(f"spmm: matrix has {s.n_cols} columns, x has {x.shape[-2]} rows")
    batched = x.ndim == 3
    xd = x.data
    x2 = xd.transpose(1, 0, 2).reshape(s.n_cols, -1) if batched else xd
    if weights is None:
        mat, mat_t = s.to_scipy(), s.transposed_scipy()
    else:
        if weights.shape != (s.nnz,):
            raise ShapeError("spmm weights must have one entry per stored value")
        mat = sp.csr_matrix((weights.data, s.col_idx, s.row_ptr), shape=s.shape)
        mat_t = mat.T.tocsr()
    y2 = np.asarray(mat @ x2, dtype=xd.dtype)

    def unflat(a, n):
        return a.reshape(n, xd.shape[0], xd.shape[2]).transpose(1, 0, 2) if batched else a

    rows = np.repeat(np.arange(s.n_rows), np.diff(s.row_ptr))

    def grad_fn(g):
        g2 = g.transpose(1, 0, 2).reshape(s.n_rows, -1) if batched else g
        gx = unflat(np.asarray(mat_t @ g2, dtype=xd.dtype), s.n_cols)
        if weights is None:
            return (gx,)
        gw = np.einsum("kf,kf->k", g2[rows], x2[s.col_idx]).astype(weights.dtype)
        return gx, gw

    parents = (x,) if weights is None else (x, weights)
    return _node(unflat(y2, s.n_rows), parents, grad_fn, "spmm")


# ---------------------------------------------------------------- optimizer


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], m: Sequence[np.ndarray],
              v: Sequence[np.ndarray], lr: float, beta1: float, beta2: float, eps: float, t: int) -> None:
    """Bias-corrected Adam update, applied in place to ``params``, ``m`` and ``v``.

    All gradients are checked for finiteness before anything is modified.
    """
    if t < 1:
        raise ValueError("adam step counter starts at 1")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; Adam step aborted")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, mi, vi in zip(params, grads, m, v):
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * (g * g)
        p -= (lr * (mi / c1) / (np.sqrt(vi / c2) + eps)).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None):
        self.t += 1
        try:
            adam_step([p.data for p in self.params], [p.grad for p in self.params], self.m, self.v,
                      self.lr if lr is None else lr, self.beta1, self.beta2, self.eps, self.t)
        except NumericError:
            self.t -= 1
            raise

"""Minimal reverse-mode automatic differentiation over dense f64 arrays.

Tape-based: every forward op records its parents and a backward closure on
the output node; ``backward()`` replays the tape in reverse topological
order. Only the operator set the retrieval model actually needs is
implemented. Everything is float64; there is no broadcasting beyond
bias-add / scalar cases (generic unbroadcast handles those).
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "concat",
    "conv2d",
    "avg_pool2d",
    "max_pool2d",
    "global_avg_pool",
    "softmax",
    "log_softmax",
    "layer_norm",
    "cross_entropy_logits",
    "l2_distance_matrix",
    "select_pairs",
    "gradcheck",
]

Arrayish = Union["Tensor", np.ndarray, float, int]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, shapes))}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    for _ in range(ndim_extra):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward_fn: Optional[Callable] = None,
                 op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward_fn
        self.op = op

    # ---- basic protocol ----------------------------------------------------
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
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # ---- graph machinery ---------------------------------------------------
    def backward(self):
        """Populate .grad on every requires_grad node reachable from self."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, iter(self._parents))]
        seen.add(id(self))
        # iterative DFS; training graphs exceed the default recursion limit
        while stack:
            node, it = stack[-1]
            advanced = False
            for p in it:
                if id(p) not in seen and p.requires_grad:
                    seen.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                topo.append(node)
                stack.pop()
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # ---- elementwise arithmetic -------------------------------------------
    @staticmethod
    def _lift(x: Arrayish) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))

    def __add__(self, other: Arrayish) -> "Tensor":
        other = self._lift(other)
        out_data = self.data + other.data

        def bwd(g):
            self._accum(_unbroadcast(g, self.shape))
            other._accum(_unbroadcast(g, other.shape))
        return Tensor(out_data, parents=(self, other), backward_fn=bwd, op="add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def bwd(g):
            self._accum(-g)
        return Tensor(-self.data, parents=(self,), backward_fn=bwd, op="neg")

    def __sub__(self, other: Arrayish) -> "Tensor":
        return self + (-self._lift(other))

    def __rsub__(self, other: Arrayish) -> "Tensor":
        return self._lift(other) + (-self)

    def __mul__(self, other: Arrayish) -> "Tensor":
        other = self._lift(other)
        out_data = self.data * other.data

        def bwd(g):
            self._accum(_unbroadcast(g * other.data, self.shape))
            other._accum(_unbroadcast(g * self.data, other.shape))
        return Tensor(out_data, parents=(self, other), backward_fn=bwd, op="mul")

    __rmul__ = __mul__

    def __truediv__(self, other: Arrayish) -> "Tensor":
        other = self._lift(other)
        out_data = self.data / other.data

        def bwd(g):
            self._accum(_unbroadcast(g / other.data, self.shape))
            other._accum(_unbroadcast(-g * self.data / other.data ** 2, other.shape))
        return Tensor(out_data, parents=(self, other), backward_fn=bwd, op="div")

    def __rtruediv__(self, other: Arrayish) -> "Tensor":
        return self._lift(other) / self

    def __pow__(self, p: float) -> "Tensor":
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data ** p

        def bwd(g):
            self._accum(g * p * self.data ** (p - 1))
        return Tensor(out_data, parents=(self,), backward_fn=bwd, op="pow")

    # ---- elementwise nonlinearities ---------------------------------------
    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def bwd(g):
            self._accum(g * out_data)
        return Tensor(out_data, parents=(self,), backward_fn=bwd, op="exp")

    def log(self) -> "Tensor":
        def bwd(g):
            self._accum(g / self.data)
        return Tensor(np.log(self.data), parents=(self,), backward_fn=bwd, op="log")

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)

        def bwd(g):
            self._accum(g * 0.5 / out_data)
        return Tensor(out_data, parents=(self,), backward_fn=bwd, op="sqrt")

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)

        def bwd(g):
            self._accum(g * (1.0 - out_data ** 2))
        return Tensor(out_data, parents=(self,), backward_fn=bwd, op="tanh")

    def sigmoid(self) -> "Tensor":
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def bwd(g):
            self._accum(g * out_data * (1.0 - out_data))
        return Tensor(out_data, parents=(self,), backward_fn=bwd, op="sigmoid")

    def softplus(self) -> "Tensor":
        # log(1+e^x), numerically stable
        out_data = np.logaddexp(0.0, self.data)

        def bwd(g):
            self._accum(g / (1.0 + np.exp(-self.data)))
        return Tensor(out_data, parents=(self,), backward_fn=bwd, op="softplus")

    def relu(self) -> "Tensor":
        mask = self.data > 0

        def bwd(g):
            self._accum(g * mask)
        return Tensor(self.data * mask, parents=(self,), backward_fn=bwd, op="relu")

    def gelu(self) -> "Tensor":
        # exact erf form: 0.5*x*(1+erf(x/sqrt(2)))
        inv_sqrt2 = 1.0 / math.sqrt(2.0)
        e = erf(self.data * inv_sqrt2)
        out_data = 0.5 * self.data * (1.0 + e)

        def bwd(g):
            pdf = np.exp(-0.5 * self.data ** 2) / math.sqrt(2.0 * math.pi)
            self._accum(g * (0.5 * (1.0 + e) + self.data * pdf))
        return Tensor(out_data, parents=(self,), backward_fn=bwd, op="gelu")

    # ---- reductions --------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.shape))
            else:
                gg = g
                if not keepdims:
                    gg = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(gg, self.shape))
        return Tensor(out_data, parents=(self,), backward_fn=bwd, op="sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.shape[a] for a in axis]))
        else:
            n = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ---- shape ops ---------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        out_data = self.data.reshape(shape)

        def bwd(g):
            self._accum(g.reshape(orig))
        return Tensor(out_data, parents=(self,), backward_fn=bwd, op="reshape")

    def flatten(self) -> "Tensor":
        return self.reshape(self.size)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(range(self.ndim))[::-1]
        inv = np.argsort(axes)

        def bwd(g):
            self._accum(g.transpose(inv))
        return Tensor(self.data.transpose(axes), parents=(self,), backward_fn=bwd, op="transpose")

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, idx) -> "Tensor":
        out_data = self.data[idx]

        def bwd(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accum(full)
        return Tensor(out_data, parents=(self,), backward_fn=bwd, op="slice")

    # ---- linear algebra ----------------------------------------------------
    def matmul(self, other: "Tensor") -> "Tensor":
        other = self._lift(other)
        if self.ndim < 2 or other.ndim < 2 or self.shape[-1] != other.shape[-2]:
            raise ShapeError("matmul", self.shape, other.shape)
        out_data = self.data @ other.data

        def bwd(g):
            a, b = self.data, other.data
            self._accum(_unbroadcast(g @ np.swapaxes(b, -1, -2), self.shape))
            other._accum(_unbroadcast(np.swapaxes(a, -1, -2) @ g, other.shape))
        return Tensor(out_data, parents=(self, other), backward_fn=bwd, op="matmul")

    __matmul__ = matmul


# ---- free functions --------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accum(g[tuple(sl)])
    return Tensor(out_data, parents=tuple(tensors), backward_fn=bwd, op="concat")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(cols: np.ndarray, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros((n, c, hp, wp), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad:hp - pad, pad:wp - pad]
    return xp


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), NCHW layout."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(o, -1)
    out_data = np.einsum("ok,nkp->nop", wmat, cols, optimize=True).reshape(n, o, oh, ow)
    if b is not None:
        out_data = out_data + b.data.reshape(1, o, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gmat = g.reshape(n, o, oh * ow)
        w._accum(np.einsum("nop,nkp->ok", gmat, cols, optimize=True).reshape(w.shape))
        dcols = np.einsum("ok,nop->nkp", wmat, gmat, optimize=True)
        x._accum(_col2im(dcols, x.shape, kh, kw, stride, pad))
        if b is not None:
            b._accum(g.sum(axis=(0, 2, 3)))
    return Tensor(out_data, parents=parents, backward_fn=bwd, op="conv2d")


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError("avg_pool2d", x.shape, (k, k))
    oh, ow = h // k, w // k
    blocks = x.data.reshape(n, c, oh, k, ow, k)
    out_data = blocks.mean(axis=(3, 5))

    def bwd(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] / (k * k), (n, c, oh, k, ow, k))
        x._accum(gx.reshape(n, c, h, w))
    return Tensor(out_data, parents=(x,), backward_fn=bwd, op="avg_pool2d")


def max_pool2d(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError("max_pool2d", x.shape, (k, k))
    oh, ow = h // k, w // k
    blocks = x.data.reshape(n, c, oh, k, ow, k)
    out_data = blocks.max(axis=(3, 5))
    mask = blocks == out_data[:, :, :, None, :, None]
    # split ties evenly so the gradient stays consistent with the forward max
    mask = mask / mask.sum(axis=(3, 5), keepdims=True)

    def bwd(g):
        x._accum((mask * g[:, :, :, None, :, None]).reshape(n, c, h, w))
    return Tensor(out_data, parents=(x,), backward_fn=bwd, op="max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) mean over spatial dims."""
    n, c, h, w = x.shape
    out_data = x.data.mean(axis=(2, 3))

    def bwd(g):
        x._accum(np.broadcast_to(g[:, :, None, None] / (h * w), x.shape))
    return Tensor(out_data, parents=(x,), backward_fn=bwd, op="global_avg_pool")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # shift by the rowwise max (constant; softmax is shift-invariant)
    shift = x.data.max(axis=axis, keepdims=True)
    e = (x - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = x.data.max(axis=axis, keepdims=True)
    z = x - shift
    return z - z.exp().sum(axis=axis, keepdims=True).log()


def layer_norm(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    return xc / (var + eps).sqrt()


def cross_entropy_logits(logits: Tensor, labels: np.ndarray,
                         smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed cross-entropy over an (N,K) logit matrix."""
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError("cross_entropy_logits", logits.shape, labels.shape)
    target = np.full((n, k), smoothing / k)
    target[np.arange(n), labels] += 1.0 - smoothing
    logp = log_softmax(logits, axis=1)
    return -(logp * Tensor(target)).sum() * (1.0 / n)


def l2_distance_matrix(f: Tensor) -> Tensor:
    """Pairwise Euclidean distances between rows of an (N,D) matrix."""
    if f.ndim != 2:
        raise ShapeError("l2_distance_matrix", f.shape)
    fd = f.data
    sq = (fd ** 2).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * fd @ fd.T, 0.0)
    np.fill_diagonal(d2, 0.0)  # exact zeros; cancellation leaves ~1e-16 residue
    out_data = np.sqrt(d2)

    def bwd(g):
        # d sq_ij contributes 2(f_i - f_j) to row i and the negation to row j
        s = g / (2.0 * np.maximum(out_data, 1e-12))
        s = np.where(out_data == 0.0, 0.0, s)
        s2 = s + s.T
        f._accum(2.0 * (s2.sum(axis=1)[:, None] * fd - s2 @ fd))
    return Tensor(out_data, parents=(f,), backward_fn=bwd, op="l2_distance_matrix")


def select_pairs(m: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather m[rows[i], cols[i]] as a vector, differentiably."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out_data = m.data[rows, cols]

    def bwd(g):
        full = np.zeros_like(m.data)
        np.add.at(full, (rows, cols), g)
        m._accum(full)
    return Tensor(out_data, parents=(m,), backward_fn=bwd, op="select_pairs")


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
              sample: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between analytic gradient and central differences.

    Relative error per coordinate is |a - n| / (|a| + |n| + 1e-12).
    `sample` limits the check to that many randomly chosen coordinates.
    """
    x = Tensor(x.data.copy(), requires_grad=True)
    out = f(x)
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    idxs = np.arange(flat.size)
    if sample is not None and sample < flat.size:
        rng = rng or np.random.default_rng(0)
        idxs = rng.choice(flat.size, size=sample, replace=False)
    max_err = 0.0
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(x.data.copy())).item()
        flat[i] = orig - eps
        lo = f(Tensor(x.data.copy())).item()
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
        max_err = max(max_err, err)
    return max_err

"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps a float64 ndarray plus a vector-Jacobian-product closure.
Calling backward() on a scalar walks the graph in reverse topological order
and accumulates gradients into every tensor with requires_grad set. The op
set is exactly what the decoders, renderer, and temporal model need; no
general-purpose framework features beyond that.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.special import expit


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to the given shape, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("value", "grad", "parents", "vjp", "requires_grad")

    # keep numpy from elementwise-broadcasting into object arrays; reflected
    # operators on Tensor handle ndarray operands instead
    __array_ufunc__ = None

    def __init__(self, value, requires_grad=False, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.vjp = vjp
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in self.parents
        )

    # -- graph plumbing ----------------------------------------------------

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=np.float64)
        if self.grad is None:
            self.grad = g.copy() if g.base is not None or g.shape == () else g
            self.grad = np.array(self.grad, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self, seed=None) -> None:
        if seed is None:
            if self.value.size != 1:
                raise ValueError("backward() without seed needs a scalar tensor")
            seed = np.ones_like(self.value)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accum(np.broadcast_to(seed, self.value.shape))
        for node in reversed(order):
            if node.vjp is not None and node.grad is not None:
                node.vjp(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value + other.value, parents=(self, other))
        def vjp(g):
            self._accum(_unbroadcast(g, self.value.shape))
            other._accum(_unbroadcast(g, other.value.shape))
        out.vjp = vjp
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.value, parents=(self,))
        out.vjp = lambda g: self._accum(-g)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value * other.value, parents=(self, other))
        def vjp(g):
            self._accum(_unbroadcast(g * other.value, self.value.shape))
            other._accum(_unbroadcast(g * self.value, other.value.shape))
        out.vjp = vjp
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value / other.value, parents=(self, other))
        def vjp(g):
            self._accum(_unbroadcast(g / other.value, self.value.shape))
            other._accum(
                _unbroadcast(-g * self.value / other.value**2, other.value.shape)
            )
        out.vjp = vjp
        return out

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        out = Tensor(self.value**exponent, parents=(self,))
        out.vjp = lambda g: self._accum(g * exponent * self.value ** (exponent - 1))
        return out

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.value, other.value
        if a.ndim > 2 or b.ndim > 2:
            raise ValueError("matmul supports 1D/2D operands only")
        out = Tensor(a @ b, parents=(self, other))
        def vjp(g):
            if a.ndim == 1 and b.ndim == 1:  # dot product
                self._accum(g * b)
                other._accum(g * a)
            elif a.ndim == 1:  # (n,) @ (n,m)
                self._accum(b @ g)
                other._accum(np.outer(a, g))
            elif b.ndim == 1:  # (n,m) @ (m,)
                self._accum(np.outer(g, b))
                other._accum(a.T @ g)
            else:
                self._accum(g @ b.T)
                other._accum(a.T @ g)
        out.vjp = vjp
        return out

    def __getitem__(self, idx):
        out = Tensor(self.value[idx], parents=(self,))
        def vjp(g):
            full = np.zeros_like(self.value)
            if _is_advanced_index(idx):
                np.add.at(full, idx, g)
            else:
                full[idx] += g
            self._accum(full)
        out.vjp = vjp
        return out

    # -- pointwise nonlinearities ---------------------------------------------

    def exp(self):
        val = np.exp(self.value)
        out = Tensor(val, parents=(self,))
        out.vjp = lambda g: self._accum(g * val)
        return out

    def log(self):
        out = Tensor(np.log(self.value), parents=(self,))
        out.vjp = lambda g: self._accum(g / self.value)
        return out

    def sigmoid(self):
        val = expit(self.value)
        out = Tensor(val, parents=(self,))
        out.vjp = lambda g: self._accum(g * val * (1.0 - val))
        return out

    def softplus(self):
        out = Tensor(np.logaddexp(0.0, self.value), parents=(self,))
        out.vjp = lambda g: self._accum(g * expit(self.value))
        return out

    def leaky_relu(self, slope=0.2):
        pos = self.value >= 0
        out = Tensor(np.where(pos, self.value, slope * self.value), parents=(self,))
        out.vjp = lambda g: self._accum(g * np.where(pos, 1.0, slope))
        return out

    def abs(self):
        out = Tensor(np.abs(self.value), parents=(self,))
        out.vjp = lambda g: self._accum(g * np.sign(self.value))
        return out

    def clip(self, lo, hi):
        inside = (self.value >= lo) & (self.value <= hi)
        out = Tensor(np.clip(self.value, lo, hi), parents=(self,))
        out.vjp = lambda g: self._accum(g * inside)
        return out

    # -- reductions and shape ops ----------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.value.sum(axis=axis, keepdims=keepdims), parents=(self,))
        def vjp(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.value.shape))
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.value.shape))
        out.vjp = vjp
        return out

    def mean(self, axis=None, keepdims=False):
        count = self.value.size if axis is None else np.prod(
            [self.value.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.value.reshape(shape), parents=(self,))
        out.vjp = lambda g: self._accum(g.reshape(self.value.shape))
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.value.ndim)))
        inverse = np.argsort(axes)
        out = Tensor(self.value.transpose(axes), parents=(self,))
        out.vjp = lambda g: self._accum(g.transpose(inverse))
        return out


def _is_advanced_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(it, (np.ndarray, list)) for it in items)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.value for t in tensors], axis=axis), parents=tensors)
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    def vjp(g):
        for t, s, e in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(s, e)
            t._accum(g[tuple(sl)])
    out.vjp = vjp
    return out


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = Tensor(np.where(cond, a.value, b.value), parents=(a, b))
    def vjp(g):
        a._accum(_unbroadcast(g * cond, a.value.shape))
        b._accum(_unbroadcast(g * ~cond, b.value.shape))
    out.vjp = vjp
    return out


def sparse_matmul(matrix: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times a dense (N,) or (N,C) tensor."""
    x = as_tensor(x)
    matrix = matrix.tocsr()
    out = Tensor(matrix @ x.value, parents=(x,))
    out.vjp = lambda g: x._accum(matrix.T @ g)
    return out


def custom_op(value: np.ndarray, parents, vjp) -> Tensor:
    """Escape hatch for ops whose forward runs outside this module.

    vjp receives the output gradient and must accumulate into the parents
    itself (they are Tensors; use parent._accum).
    """
    return Tensor(value, parents=tuple(parents), vjp=vjp)


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None,
                     stride: int = 2, pad: int = 1) -> Tensor:
    """Transposed 2D convolution, NCHW without batch: x (Cin,H,W),
    w (Cin,Cout,K,K) -> (Cout, (H-1)*s + K - 2p, ...)."""
    x, w = as_tensor(x), as_tensor(w)
    cin, h, wd = x.value.shape
    cin_w, cout, k, _ = w.value.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: {cin} vs {cin_w}")
    out_h = (h - 1) * stride + k - 2 * pad
    out_w = (wd - 1) * stride + k - 2 * pad
    canvas = np.zeros((cout, out_h + 2 * pad, out_w + 2 * pad))
    for di in range(k):
        for dj in range(k):
            contrib = np.einsum("chw,co->ohw", x.value, w.value[:, :, di, dj])
            canvas[:, di : di + stride * h : stride, dj : dj + stride * wd : stride] += contrib
    val = canvas[:, pad : pad + out_h, pad : pad + out_w]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        val = val + b.value[:, None, None]
        parents.append(b)
    out = Tensor(val, parents=parents)

    def vjp(g):
        gpad = np.zeros((cout, out_h + 2 * pad, out_w + 2 * pad))
        gpad[:, pad : pad + out_h, pad : pad + out_w] = g
        gx = np.zeros_like(x.value)
        gw = np.zeros_like(w.value)
        for di in range(k):
            for dj in range(k):
                window = gpad[:, di : di + stride * h : stride, dj : dj + stride * wd : stride]
                gx += np.einsum("ohw,co->chw", window, w.value[:, :, di, dj])
                gw[:, :, di, dj] = np.einsum("chw,ohw->co", x.value, window)
        x._accum(gx)
        w._accum(gw)
        if b is not None:
            b._accum(g.sum(axis=(1, 2)))

    out.vjp = vjp
    return out


def causal_conv1d(x: Tensor, w: Tensor, b: Tensor | None = None,
                  dilation: int = 1) -> Tensor:
    """Left-padded dilated 1D convolution: x (Cin,T), w (Cout,Cin,K) -> (Cout,T).

    Output at time t sees inputs t, t-dilation, ..., t-(K-1)*dilation only.
    """
    x, w = as_tensor(x), as_tensor(w)
    cin, t = x.value.shape
    cout, cin_w, k = w.value.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: {cin} vs {cin_w}")
    lpad = (k - 1) * dilation
    xpad = np.concatenate([np.zeros((cin, lpad)), x.value], axis=1)
    stacked = np.stack([xpad[:, i * dilation : i * dilation + t] for i in range(k)])
    val = np.einsum("kct,ock->ot", stacked, w.value)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        val = val + b.value[:, None]
        parents.append(b)
    out = Tensor(val, parents=parents)

    def vjp(g):
        gw = np.einsum("kct,ot->ock", stacked, g)
        gxpad = np.zeros_like(xpad)
        for i in range(k):
            gxpad[:, i * dilation : i * dilation + t] += np.einsum(
                "ock,ot->ct", w.value[:, :, i : i + 1], g
            )
        x._accum(gxpad[:, lpad:])
        w._accum(gw)
        if b is not None:
            b._accum(g.sum(axis=1))

    out.vjp = vjp
    return out


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Average pooling on (C,H,W) with stride = kernel = k (H, W divisible)."""
    c, h, w = x.shape
    if h % k or w % k:
        raise ValueError("spatial dims must be divisible by the pool size")
    return (
        x.reshape(c, h // k, k, w // k, k).mean(axis=4).mean(axis=2)
    )


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adaptive-moment descent with optional decoupled weight decay.

    With weight_decay 0 (default) a parameter that never receives a gradient
    is left bit-identical.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params.values()) if isinstance(params, dict) else list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1**self.t)
            vhat = self.v[i] / (1 - self.b2**self.t)
            update = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.value
            p.value = p.value - self.lr * update

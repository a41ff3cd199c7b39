"""Small reverse-mode automatic differentiation engine on numpy arrays.

Every primitive records its operands and an adjoint rule on the output
tensor. ``backward`` walks the reachable graph in strict reverse creation
order (tensor ids are monotone, so this is reverse execution order) and
accumulates adjoints additively.

Precision follows the operand dtype: float64 for verification runs, float32
for training.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-8

_next_id = itertools.count()
_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward = None
        self._id = next(_next_id)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __float__(self):
        return self.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _lift(a, b):
    """Wrap python scalars / arrays so they match the tensor operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Create the output tensor of a primitive.

    ``backward(g)`` must return one adjoint (or None) per parent.
    """
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by '{op}'")
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data)
    out.op = op
    if needs:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def detach(t: Tensor) -> Tensor:
    """Value-identical tensor with no link to ``t``'s history."""
    out = Tensor(t.data)
    out.op = "detach"
    return out


def _topo(root: Tensor) -> list[Tensor]:
    seen = {id(root): root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in _topo(loss):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    return make_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    return make_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    return make_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return make_op(out, (a, b), bw, "div")


def scale(a: Tensor, s: float) -> Tensor:
    return make_op(a.data * s, (a,), lambda g: (g * s,), "scale")


def square(a: Tensor) -> Tensor:
    return make_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a: Tensor, eps: float = EPS) -> Tensor:
    """sqrt(a + eps); eps keeps the derivative finite at zero."""
    out = np.sqrt(a.data + eps)
    return make_op(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def abs_smooth(a: Tensor, eps: float = EPS) -> Tensor:
    """sqrt(a**2 + eps**2)."""
    out = np.sqrt(a.data * a.data + eps * eps)
    return make_op(out, (a,), lambda g: (g * a.data / out,), "abs")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    pos = a.data >= 0
    out = np.where(pos, a.data, slope * a.data)
    return make_op(out, (a,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(tsum(a, axes, keepdims), 1.0 / n)


def inner(a: Tensor, b: Tensor, axis=-1) -> Tensor:
    return tsum(mul(a, b), axis)


def norm(a: Tensor, axis=-1, eps: float = EPS) -> Tensor:
    """Euclidean norm sqrt(sum(a**2) + eps**2)."""
    return sqrt(tsum(square(a), axis), eps * eps)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (a,), bw, "softmax")


def layer_norm(a: Tensor, axis=-1, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance normalization over ``axis`` (no affine part)."""
    axes = _norm_axis(axis, a.ndim)
    mu = a.data.mean(axis=axes, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return make_op(xhat, (a,), bw, "layer_norm")


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g) if _fancy(idx) else out.__setitem__(idx, g)
        return (out,)

    return make_op(np.array(a.data[idx]), (a,), bw, "slice")


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_op(a.data @ b.data, (a, b), bw, "matmul")


def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def conv2d_raw(x: np.ndarray, w: np.ndarray, stride, padding) -> np.ndarray:
    """Cross-correlation of x [B,C,H,W] with w [O,C,kh,kw]."""
    (sh, sw), (ph, pw) = stride, padding
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ValueError(f"conv2d channel mismatch: input {C}, kernel {Cw}")
    Ho, Wo = _conv_out(H, kh, sh, ph), _conv_out(W, kw, sw, pw)
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d input {H}x{W} too small for kernel {kh}x{kw}")
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((B, O, Ho * Wo), dtype=np.result_type(x, w))
    for p in range(kh):
        for q in range(kw):
            patch = xp[:, :, p:p + sh * (Ho - 1) + 1:sh, q:q + sw * (Wo - 1) + 1:sw]
            out += w[:, :, p, q] @ patch.reshape(B, C, Ho * Wo)
    return out.reshape(B, O, Ho, Wo)


def conv2d_input_grad(g: np.ndarray, w: np.ndarray, in_shape, stride, padding) -> np.ndarray:
    """Adjoint of conv2d_raw with respect to its input."""
    (sh, sw), (ph, pw) = stride, padding
    B, C, H, W = in_shape
    O, _, kh, kw = w.shape
    _, _, Ho, Wo = g.shape
    gx = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=np.result_type(g, w))
    g2 = g.reshape(B, O, Ho * Wo)
    for p in range(kh):
        for q in range(kw):
            contrib = (w[:, :, p, q].T @ g2).reshape(B, C, Ho, Wo)
            gx[:, :, p:p + sh * (Ho - 1) + 1:sh, q:q + sw * (Wo - 1) + 1:sw] += contrib
    return gx[:, :, ph:ph + H, pw:pw + W]


def conv2d_weight_grad(x: np.ndarray, g: np.ndarray, w_shape, stride, padding) -> np.ndarray:
    (sh, sw), (ph, pw) = stride, padding
    B, C = x.shape[:2]
    O, _, kh, kw = w_shape
    _, _, Ho, Wo = g.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    gw = np.zeros(w_shape, dtype=np.result_type(x, g))
    g2 = g.reshape(B, O, Ho * Wo)
    for p in range(kh):
        for q in range(kw):
            patch = xp[:, :, p:p + sh * (Ho - 1) + 1:sh, q:q + sw * (Wo - 1) + 1:sw]
            gw[:, :, p, q] = np.tensordot(g2, patch.reshape(B, C, Ho * Wo), axes=([0, 2], [0, 2]))
    return gw


def conv2d(x: Tensor, w: Tensor, stride=(1, 1), padding=(0, 0)) -> Tensor:
    stride, padding = tuple(stride), tuple(padding)
    out = conv2d_raw(x.data, w.data, stride, padding)

    def bw(g):
        gx = conv2d_input_grad(g, w.data, x.shape, stride, padding) if x.requires_grad else None
        gw = conv2d_weight_grad(x.data, g, w.shape, stride, padding) if w.requires_grad else None
        return gx, gw

    return make_op(out, (x, w), bw, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, stride=(1, 1), padding=(0, 0), output_size=None) -> Tensor:
    """Transposed convolution: the exact adjoint of ``conv2d`` with the same w.

    x is [B,O,Hi,Wi], w is [O,C,kh,kw]; output is [B,C,H,W]. ``output_size``
    (H, W) picks among the sizes that conv2d maps onto (Hi, Wi); the default
    is the smallest.
    """
    stride, padding = tuple(stride), tuple(padding)
    B, O, Hi, Wi = x.shape
    Ow, C, kh, kw = w.shape
    if O != Ow:
        raise ValueError(f"conv_transpose2d channel mismatch: input {O}, kernel {Ow}")
    if output_size is None:
        output_size = ((Hi - 1) * stride[0] - 2 * padding[0] + kh,
                       (Wi - 1) * stride[1] - 2 * padding[1] + kw)
    H, W = output_size
    if (_conv_out(H, kh, stride[0], padding[0]), _conv_out(W, kw, stride[1], padding[1])) != (Hi, Wi):
        raise ValueError(f"output_size {output_size} incompatible with input {Hi}x{Wi}")
    in_shape = (B, C, H, W)
    out = conv2d_input_grad(x.data, w.data, in_shape, stride, padding)

    def bw(g):
        gx = conv2d_raw(g, w.data, stride, padding) if x.requires_grad else None
        gw = conv2d_weight_grad(g, x.data, w.shape, stride, padding) if w.requires_grad else None
        return gx, gw

    return make_op(out, (x, w), bw, "conv_transpose2d")


# ---------------------------------------------------------------- checking


def numeric_grad(f: Callable[[], float], t: Tensor, rel_step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``t``.

    Step per coordinate is rel_step * max(1, |theta|).
    """
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = rel_step * max(1.0, abs(orig))
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise; 0 where both vanish."""
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    diff = np.abs(analytic - numeric)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, diff / np.where(den > 0, den, 1.0), 0.0)

"""Minimal N-dimensional tensor with reverse-mode automatic differentiation.

Every operation records its parents and a closure mapping the output gradient
to one gradient per parent.  :func:`backward` walks the recorded graph in
reverse topological order.  Values are float64 throughout.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# element-wise binary ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _record(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D", "rank")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}", "inner")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(ad @ bd, (a, b), backward)


# element-wise unary -----------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return _record(np.where(mask, xd, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0.0, xd)
    return _record(out, (x,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * xd)),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    mask = (xd >= lo) & (xd <= hi)
    return _record(np.clip(xd, lo, hi), (x,), lambda g: (g * mask,))


# reductions and shape ---------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _record(np.asarray(out, dtype=np.float64), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = math.prod(x.shape[a] for a in axes)
    return mul(tsum(x, axes, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} into {shape}", "size") from exc
    return _record(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record(x.data[index], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis):
            raise ShapeError(
                f"concat shapes disagree off axis {axis}: {[u.shape for u in tensors]}",
                "concat")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# softmax family ---------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray, axis: int = 1) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``.

    ``labels`` has the logits' shape with ``axis`` removed.
    """
    n_classes = logits.shape[axis]
    labels = np.asarray(labels)
    onehot = np.moveaxis(np.eye(n_classes)[labels], -1, axis)
    ll = tsum(log_softmax(logits, axis) * onehot, axis=axis)
    return mul(mean(ll), -1.0)


# convolution ------------------------------------------------------------------

def _check_conv(x_shape, w_shape, groups):
    if len(x_shape) != 4:
        raise ShapeError(f"conv input must be NCHW, got {x_shape}", "rank")
    if len(w_shape) != 4:
        raise ShapeError(f"conv kernel must be 4-D, got {w_shape}", "rank")
    if x_shape[1] % groups:
        raise ShapeError(
            f"input channels {x_shape[1]} not divisible by groups {groups}", "input channels")


def _out_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _im2col(x, kh, kw, stride, padding, groups):
    """Columns (N, G, C/G * kh * kw, Ho * Wo) of the padded input."""
    n, c, h, wd = x.shape
    ho, wo = _out_size(h, kh, stride, padding), _out_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{wd}", "spatial")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cg = c // groups
    cols = win.reshape(n, groups, cg, ho, wo, kh, kw).transpose(0, 1, 2, 5, 6, 3, 4)
    return np.ascontiguousarray(cols).reshape(n, groups, cg * kh * kw, ho * wo), ho, wo


def _conv_forward(x, w, stride, padding, groups, cols=None):
    n = x.shape[0]
    o, cg, kh, kw = w.shape
    if cols is None:
        cols, ho, wo = _im2col(x, kh, kw, stride, padding, groups)
    else:
        ho, wo = _out_size(x.shape[2], kh, stride, padding), _out_size(x.shape[3], kw, stride, padding)
    wg = w.reshape(groups, o // groups, cg * kh * kw)
    return (wg @ cols).reshape(n, o, ho, wo)


def _conv_backward_input(gout, w, x_shape, stride, padding, groups):
    n, c, h, wd = x_shape
    o, cg, kh, kw = w.shape
    g = groups
    ho, wo = gout.shape[2], gout.shape[3]
    hp, wp = h + 2 * padding, wd + 2 * padding
    # rows/cols past the last window never receive gradient but must exist
    hp = max(hp, stride * (ho - 1) + kh)
    wp = max(wp, stride * (wo - 1) + kw)
    wg = w.reshape(g, o // g, cg * kh * kw)
    dcols = np.swapaxes(wg, -1, -2) @ gout.reshape(n, g, o // g, ho * wo)
    dcols = dcols.reshape(n, g * cg, kh, kw, ho, wo)
    dxp = np.zeros((n, c, hp, wp))
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, :, i, j]
    return dxp[:, :, padding:padding + h, padding:padding + wd]


def _conv_backward_weight(gout, x, w_shape, stride, padding, groups, cols=None):
    n = x.shape[0]
    o, cg, kh, kw = w_shape
    g = groups
    ho, wo = gout.shape[2], gout.shape[3]
    if cols is None:
        cols, _, _ = _im2col(x, kh, kw, stride, padding, groups)
    gg = gout.reshape(n, g, o // g, ho * wo)
    dw = (gg @ np.swapaxes(cols, -1, -2)).sum(axis=0)
    return dw.reshape(o, cg, kh, kw)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0, groups: int = 1,
           bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIHW kernel."""
    _check_conv(x.shape, w.shape, groups)
    if w.shape[0] % groups:
        raise ShapeError(
            f"output channels {w.shape[0]} not divisible by groups {groups}", "output channels")
    if w.shape[1] != x.shape[1] // groups:
        raise ShapeError(
            f"kernel expects {w.shape[1]} input channels per group, input provides "
            f"{x.shape[1] // groups}", "input channels")
    xd, wd = x.data, w.data
    cols, _, _ = _im2col(xd, wd.shape[2], wd.shape[3], stride, padding, groups)
    out = _conv_forward(xd, wd, stride, padding, groups, cols)

    def backward(g):
        gx = _conv_backward_input(g, wd, xd.shape, stride, padding, groups) if x.requires_grad else None
        return gx, _conv_backward_weight(g, xd, wd.shape, stride, padding, groups, cols)

    y = _record(out, (x, w), backward)
    if bias is not None:
        y = add(y, reshape(bias, (1, -1, 1, 1)))
    return y


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
                     output_padding: int = 0, groups: int = 1,
                     bias: Tensor | None = None) -> Tensor:
    """Transposed convolution; ``w`` has shape (C_in, C_out / groups, kH, kW).

    Implemented as the adjoint of :func:`conv2d`, so output size is
    ``(H - 1) * stride - 2 * padding + kH + output_padding``.
    """
    _check_conv(x.shape, w.shape, groups)
    if w.shape[0] != x.shape[1]:
        raise ShapeError(
            f"kernel expects {w.shape[0]} input channels, input provides {x.shape[1]}",
            "input channels")
    n, cin, h, wd_ = x.shape
    _, cog, kh, kw = w.shape
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (wd_ - 1) * stride - 2 * padding + kw + output_padding
    y_shape = (n, cog * groups, ho, wo)
    xd, wd = x.data, w.data
    out = _conv_backward_input(xd, wd, y_shape, stride, padding, groups)

    def backward(g):
        cols, _, _ = _im2col(g, kh, kw, stride, padding, groups)
        gx = _conv_forward(g, wd, stride, padding, groups, cols) if x.requires_grad else None
        return gx, _conv_backward_weight(xd, g, wd.shape, stride, padding, groups, cols)

    y = _record(np.ascontiguousarray(out), (x, w), backward)
    if bias is not None:
        y = add(y, reshape(bias, (1, -1, 1, 1)))
    return y


# resampling -------------------------------------------------------------------

def interp_matrix(n_in: int, n_out: int, mode: str) -> np.ndarray:
    """Dense (n_out, n_in) resampling matrix along one axis.

    ``bilinear`` uses half-pixel centres with edge clamping, ``nearest`` picks
    the source pixel containing each output centre, ``area`` averages over
    equal (possibly fractional) tiles of the source axis.
    """
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    if mode == "bilinear":
        c = (rows + 0.5) * n_in / n_out - 0.5
        c = np.clip(c, 0.0, n_in - 1)
        i0 = np.floor(c).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        t = c - i0
        np.add.at(m, (rows, i0), 1.0 - t)
        np.add.at(m, (rows, i1), t)
    elif mode == "nearest":
        src = np.minimum(((rows + 0.5) * n_in / n_out).astype(np.intp), n_in - 1)
        m[rows, src] = 1.0
    elif mode == "area":
        scale = n_in / n_out
        for r in rows:
            lo, hi = r * scale, (r + 1) * scale
            for s in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_in)):
                overlap = min(hi, s + 1) - max(lo, s)
                if overlap > 0:
                    m[r, s] = overlap / scale
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    return m


def resize(x: Tensor, size: tuple[int, int], mode: str = "bilinear") -> Tensor:
    """Resize the last two axes of ``x`` to ``size`` with a separable operator."""
    h, w = x.shape[-2:]
    oh, ow = size
    if (oh, ow) == (h, w):
        return x
    ry = interp_matrix(h, oh, mode)
    rx = interp_matrix(w, ow, mode)
    out = ry @ x.data @ rx.T

    def backward(g):
        return (ry.T @ g @ rx,)

    return _record(out, (x,), backward)


# graph traversal --------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Sets ``.grad`` on every reachable leaf with ``requires_grad`` and returns a
    map ``id(tensor) -> gradient``.  Tensors listed in ``params`` that the loss
    does not reach receive a zero gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}", "loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[int, np.ndarray] = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                node.grad = np.array(g, dtype=np.float64).reshape(node.shape)
                result[id(node)] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is not None:
        for p in params:
            if id(p) not in result:
                p.grad = np.zeros_like(p.data)
                result[id(p)] = p.grad
    return result


def grad_check(forward: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               max_coords: int | None = None, seed: int = 0, atol: float = 0.0) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``, taken as
    zero when ``|a - n| <= atol`` (the round-off floor of the difference
    quotient for large losses).  With ``max_coords`` set, each input
    contributes at most that many randomly chosen coordinates (deterministic
    in ``seed``).
    """
    saved = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = forward(*inputs)
    backward(loss, inputs)
    analytic = [t.grad.copy() for t in inputs]
    for t, flag in zip(inputs, saved):
        t.requires_grad = flag
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            t.data = np.ascontiguousarray(t.data)   # so the flat view aliases the data
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, max_coords, replace=False)
            for k in coords:
                orig = flat[k]
                flat[k] = orig + eps
                fp = forward(*inputs).item()
                flat[k] = orig - eps
                fm = forward(*inputs).item()
                flat[k] = orig
                num = (fp - fm) / (2 * eps)
                ana = a.reshape(-1)[k]
                gap = abs(ana - num)
                err = 0.0 if gap <= atol else gap / max(1e-8, abs(ana) + abs(num))
                worst = max(worst, err)
    return worst


def xavier_uniform(shape: Sequence[int], rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    """Uniform in +/- gain * sqrt(6 / (fan_in + fan_out))."""
    shape = tuple(shape)
    receptive = math.prod(shape[2:]) if len(shape) > 2 else 1
    fan_out = shape[0] * receptive
    fan_in = (shape[1] if len(shape) > 1 else shape[0]) * receptive
    bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)

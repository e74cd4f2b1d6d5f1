"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every op records a node holding its parents and a closure that maps the
output gradient to parent gradients. ``backward`` walks the recorded graph
once and then consumes it; a second call on the same loss raises.

Reductions that compute a variance divide by ``n`` (population variance)
everywhere in this package.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True
_node_ids = itertools.count()


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    # identity hashing is relied on by backward()'s gradient map
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.node_id: int | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def backward(self) -> dict[Tensor, np.ndarray]:
        return backward(self)

    # operator sugar
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

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def var(self, axis=None, keepdims=False):
        return var(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.node_id = next(_node_ids)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every grad-enabled leaf.

    Returns a map from each reached leaf tensor to the gradient contributed
    by this pass. The recorded graph is released afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward: graph already consumed by a previous backward pass")
    if not loss.requires_grad:
        raise GraphError("backward: loss does not depend on any grad-enabled tensor")

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                leaf_grads[node] = g
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._backward = None
        node._parents = ()
        node._consumed = True
    return leaf_grads


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a.data, b.data)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a.data, b.data)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bw)


def power(a: Tensor, p: float) -> Tensor:
    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return _record(a.data**p, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        return (g * 0.5 / out,)

    return _record(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _record(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(g):
        return (g / a.data,)

    return _record(np.log(a.data), (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _record(np.where(mask, a.data, 0.0), (a,), bw)


_SQRT_HALF = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))

    def bw(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return _record(x * cdf, (a,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand_reduced(g: np.ndarray, axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    if keepdims:
        return g
    for ax in axes:
        g = np.expand_dims(g, ax)
    return g


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        return (np.broadcast_to(_expand_reduced(g, axes, keepdims), a.shape).copy(),)

    return _record(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1

    def bw(g):
        return (np.broadcast_to(_expand_reduced(g, axes, keepdims) / n, a.shape).copy(),)

    return _record(a.data.mean(axis=axes, keepdims=keepdims), (a,), bw)


def var(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divide by n)."""
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    centered = a.data - a.data.mean(axis=axes, keepdims=True)

    def bw(g):
        return (_expand_reduced(g, axes, keepdims) * (2.0 / n) * centered,)

    out = (centered**2).mean(axis=axes, keepdims=keepdims)
    return _record(out, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), bw)


def mse_loss(pred: Tensor, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        gd = g * (2.0 / n) * diff
        return gd, -gd

    return _record(np.array((diff**2).mean()), (pred, target), bw)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None

    def bw(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _record(a.data.transpose(axes), (a,), bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None

    def bw(g):
        return (_unbroadcast(g, a.shape),)

    return _record(out, (a,), bw)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in parts)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tensors, bw)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Per-batch row gather: ``out[n, j] = a[n, index[n, j]]`` for ``a`` of shape [N, L, ...]."""
    index = np.asarray(index)
    if index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_rows: index shape {index.shape} incompatible with {a.shape}")
    expand = index.reshape(index.shape + (1,) * (a.ndim - 2))
    out = np.take_along_axis(a.data, expand, axis=1)

    def bw(g):
        full = np.zeros_like(a.data)
        batch = np.arange(a.shape[0])[:, None]
        np.add.at(full, (batch, index), g)
        return (full,)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record(out.reshape(lead + (weight.shape[0],)), parents, bw)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Normalise over one axis with a per-feature affine; weight/bias have that axis' length."""
    axis = axis % x.ndim
    c = x.shape[axis]
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: affine shapes {weight.shape}/{bias.shape} vs feature axis size {c}")
    bshape = [1] * x.ndim
    bshape[axis] = c
    w = weight.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * rstd
    other = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        gw = (g * xhat).sum(axis=other) if weight.requires_grad else None
        gb = g.sum(axis=other) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * w
            gx = rstd * (
                gh - gh.mean(axis=axis, keepdims=True) - xhat * (gh * xhat).mean(axis=axis, keepdims=True)
            )
        return gx, gw, gb

    out = xhat * w + bias.data.reshape(bshape)
    return _record(out, (x, weight, bias), bw)


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, groups: int = 1) -> Tensor:
    """3D cross-correlation.

    x: [N, C_in, T, H, W]; weight: [C_out, C_in / groups, kT, kH, kW].
    Non-overlapping kernels (stride == kernel, no padding) reduce to a single
    matmul; depthwise kernels accumulate elementwise per offset; everything
    else accumulates one batched matmul per kernel offset.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d: expected 5-d input and kernel, got {x.shape} and {weight.shape}")
    n, cin, t, h, w = x.shape
    cout, cin_g, kt, kh, kw = weight.shape
    if cin % groups or cout % groups or cin_g * groups != cin:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with kernel {weight.shape} (groups={groups})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv3d: bias {bias.shape} does not match kernel {weight.shape}")
    st, sh, sw = _triple(stride)
    pt, ph, pw = _triple(padding)
    to = (t + 2 * pt - kt) // st + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if to < 1 or ho < 1 or wo < 1:
        raise ShapeError(f"conv3d: kernel {weight.shape} larger than padded input {x.shape}")

    parents = (x, weight) if bias is None else (x, weight, bias)
    if groups == 1 and (st, sh, sw) == (kt, kh, kw) and not (pt or ph or pw):
        out, bw_core = _conv3d_patchify(x, weight, (to, ho, wo))
    elif groups == cin == cout and cin_g == 1:
        out, bw_core = _conv3d_depthwise(x, weight, (to, ho, wo), (st, sh, sw), (pt, ph, pw))
    else:
        out, bw_core = _conv3d_grouped(x, weight, (to, ho, wo), (st, sh, sw), (pt, ph, pw), groups)
    if bias is not None:
        out += bias.data[None, :, None, None, None]

    def bw(g):
        gx, gw = bw_core(g)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return _record(out, parents, bw)


def _conv3d_patchify(x: Tensor, weight: Tensor, out_size):
    # stride == kernel, no padding: the conv is one matmul over non-overlapping blocks
    n, cin = x.shape[:2]
    cout, _, kt, kh, kw = weight.shape
    to, ho, wo = out_size
    xc = x.data[:, :, : to * kt, : ho * kh, : wo * kw]
    cols = xc.reshape(n, cin, to, kt, ho, kh, wo, kw).transpose(0, 2, 4, 6, 1, 3, 5, 7)
    cols = cols.reshape(n * to * ho * wo, cin * kt * kh * kw)
    w2 = weight.data.reshape(cout, -1)
    out = (cols @ w2.T).reshape(n, to, ho, wo, cout).transpose(0, 4, 1, 2, 3)

    def bw_core(g):
        g2 = g.transpose(0, 2, 3, 4, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(n, to, ho, wo, cin, kt, kh, kw).transpose(0, 4, 1, 5, 2, 6, 3, 7)
            gx = np.zeros_like(x.data)
            gx[:, :, : to * kt, : ho * kh, : wo * kw] = gcols.reshape(xc.shape)
        return gx, gw

    return np.ascontiguousarray(out), bw_core


def _strided_window(arr, a, b, c, out_size, stride):
    to, ho, wo = out_size
    st, sh, sw = stride
    return arr[:, :, a : a + st * to : st, b : b + sh * ho : sh, c : c + sw * wo : sw]


def _pad5(arr, pad):
    pt, ph, pw = pad
    if not (pt or ph or pw):
        return arr
    return np.pad(arr, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))


def _unpad5(arr, pad, size):
    pt, ph, pw = pad
    t, h, w = size
    return arr[:, :, pt : pt + t, ph : ph + h, pw : pw + w]


def _conv3d_depthwise(x: Tensor, weight: Tensor, out_size, stride, pad):
    xp = _pad5(x.data, pad)
    offsets = list(itertools.product(*(range(k) for k in weight.shape[2:])))
    wd = weight.data[:, 0]
    out = np.zeros((x.shape[0], x.shape[1], *out_size))
    for a, b, c in offsets:
        out += _strided_window(xp, a, b, c, out_size, stride) * wd[:, a, b, c][None, :, None, None, None]

    def bw_core(g):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(weight.data) if weight.requires_grad else None
        for a, b, c in offsets:
            if gw is not None:
                win = _strided_window(xp, a, b, c, out_size, stride)
                gw[:, 0, a, b, c] = np.einsum("nctij,nctij->c", g, win)
            if gx is not None:
                _strided_window(gx, a, b, c, out_size, stride)[...] += g * wd[:, a, b, c][None, :, None, None, None]
        if gx is not None:
            gx = _unpad5(gx, pad, x.shape[2:])
        return gx, gw

    return out, bw_core


def _conv3d_grouped(x: Tensor, weight: Tensor, out_size, stride, pad, groups: int):
    n, cin = x.shape[:2]
    cout, cin_g, kt, kh, kw = weight.shape
    cout_g = cout // groups
    p = int(np.prod(out_size))
    xp = _pad5(x.data, pad)
    offsets = list(itertools.product(range(kt), range(kh), range(kw)))
    wg = weight.data.reshape(groups, cout_g, cin_g, kt, kh, kw)
    out = np.zeros((n, groups, cout_g, p))
    for a, b, c in offsets:
        xs = _strided_window(xp, a, b, c, out_size, stride).reshape(n, groups, cin_g, p)
        out += wg[:, :, :, a, b, c] @ xs
    out = out.reshape(n, cout, *out_size)

    def bw_core(g):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(weight.data) if weight.requires_grad else None
        gg = g.reshape(n, groups, cout_g, p)
        gwg = gw.reshape(groups, cout_g, cin_g, kt, kh, kw) if gw is not None else None
        for a, b, c in offsets:
            if gwg is not None:
                xs = _strided_window(xp, a, b, c, out_size, stride).reshape(n, groups, cin_g, p)
                gwg[:, :, :, a, b, c] = (gg @ np.swapaxes(xs, -1, -2)).sum(axis=0)
            if gx is not None:
                gxs = np.swapaxes(wg[:, :, :, a, b, c], -1, -2) @ gg
                _strided_window(gx, a, b, c, out_size, stride)[...] += gxs.reshape(n, cin, *out_size)
        if gx is not None:
            gx = _unpad5(gx, pad, x.shape[2:])
        return gx, gw

    return out, bw_core


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient of scalar ``f`` at ``x`` and central differences."""
    if h <= 0:
        raise ValueError("grad_check: step h must be positive")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    if out.requires_grad:
        backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    with no_grad():
        for i in range(base.size):
            xp = base.copy()
            xp.flat[i] += h
            fp = f(Tensor(xp)).item()
            xp.flat[i] -= 2 * h
            fm = f(Tensor(xp)).item()
            numeric.flat[i] = (fp - fm) / (2 * h)
    return _rel_error(analytic, numeric)


def grad_check_params(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> dict[str, float]:
    """Like :func:`grad_check` but perturbs parameter tensors in place.

    Returns max relative error per parameter (keyed by name or position).
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    if loss.size != 1:
        raise ShapeError(f"grad_check_params: loss must be scalar, got shape {loss.shape}")
    backward(loss)
    report = {}
    with no_grad():
        for k, p in enumerate(params):
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            numeric = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_fn().item()
                flat[i] = orig - h
                fm = loss_fn().item()
                flat[i] = orig
                numeric.flat[i] = (fp - fm) / (2 * h)
            report[p.name or f"param{k}"] = _rel_error(analytic, numeric)
    return report

"""Small reverse-mode autodiff engine over a closed set of numpy primitives.

Every primitive is a forward function returning ``(output, backward)`` where
``backward`` maps the output cotangent to one cotangent per input.  Outputs of
primitives whose inputs track gradients carry a :class:`Node`; a
:class:`Tape` is the topologically ordered list of those nodes reachable from
a root and can be replayed or differentiated.
"""
from __future__ import annotations

import inspect
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_OPS: dict[str, Callable] = {}


class NonFiniteError(ValueError):
    """A checked primitive produced inf or nan."""


class Node:
    __slots__ = ("op", "inputs", "attrs", "backward", "output")

    def __init__(self, op, inputs, attrs, backward, output):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.backward = backward
        self.output = output


class Tensor:
    """n-d array of float64 values with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _check: bool = True):
        arr = np.array(data, dtype=DTYPE) if _check else data
        if _check and not np.all(np.isfinite(arr)):
            raise ValueError("non-finite values in tensor data")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node: Node | None = None

    # -- basic properties -------------------------------------------------
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

    def detach(self) -> Tensor:
        return Tensor(self.data, _check=False)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def is_leaf(self) -> bool:
        return self._node is None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, exponent):
        return pow(self, exponent)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Tape:
    """Ordered record of the primitive applications that produced a root."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
        order: list[Node] = []
        seen: set[int] = set()
        if root._node is None:
            return cls(order)
        stack = [(root._node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for t in node.inputs:
                if t._node is not None and id(t._node) not in seen:
                    stack.append((t._node, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        out, seen = [], set()
        for node in self.nodes:
            for t in node.inputs:
                if t._node is None and t.requires_grad and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out

    def replay(self) -> None:
        """Recompute every recorded output in order from current input data."""
        for node in self.nodes:
            fwd = _OPS[node.op]
            out, bw = fwd(*[t.data for t in node.inputs], **node.attrs)
            node.output.data = np.asarray(out, dtype=DTYPE)
            node.backward = bw

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        grads: dict[int, np.ndarray] = {
            id(root): np.ones_like(root.data) if seed is None else np.asarray(seed, DTYPE)
        }
        if root._node is None:
            if root.requires_grad:
                root.grad = root.grad + grads[id(root)]
            return
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    gi = _unbroadcast(gi, t.shape)
                if t._node is None:
                    t.grad = t.grad + gi
                else:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if root._node is None and not root.requires_grad:
        raise ValueError("root is not on a tape (no input tracks gradients)")
    Tape.from_root(root).backward(root)


# ---------------------------------------------------------------------------
# primitive plumbing
# ---------------------------------------------------------------------------

def primitive(name: str, n_in: int | None = 1, check_finite: bool = False):
    """Register ``fwd`` as a primitive taking ``n_in`` tensor inputs.

    ``n_in=None`` makes every positional argument a tensor input.  Remaining
    positional arguments bind, in order, to the keyword attributes of ``fwd``.
    """
    def register(fwd):
        _OPS[name] = fwd
        attr_names = list(inspect.signature(fwd).parameters)[n_in or 0:]

        def apply(*inputs, **attrs):
            if n_in is not None and len(inputs) > n_in:
                for key, val in zip(attr_names, inputs[n_in:]):
                    attrs[key] = val
                inputs = inputs[:n_in]
            tensors = tuple(as_tensor(x) for x in inputs)
            out, bw = fwd(*[t.data for t in tensors], **attrs)
            out = np.asarray(out, dtype=DTYPE)
            if check_finite and not np.all(np.isfinite(out)):
                raise NonFiniteError(f"{name}: non-finite result for input shapes {[t.shape for t in tensors]}")
            res = Tensor(out, _check=False)
            if any(t.requires_grad for t in tensors):
                res.requires_grad = True
                res._node = Node(name, tensors, attrs, bw, res)
            return res

        apply.__name__ = name
        apply.__doc__ = fwd.__doc__
        return apply

    return register


def forward_op(name: str, *inputs, **attrs) -> Tensor:
    """Apply the primitive called ``name`` (see :data:`PRIMITIVES`)."""
    try:
        fn = PRIMITIVES[name]
    except KeyError:
        raise ValueError(f"unknown primitive {name!r}") from None
    return fn(*inputs, **attrs)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


@primitive("add", n_in=2)
def add(a, b):
    _check_broadcast("add", a, b)
    return a + b, lambda g: (g, g)


@primitive("sub", n_in=2)
def sub(a, b):
    _check_broadcast("sub", a, b)
    return a - b, lambda g: (g, -g)


@primitive("mul", n_in=2)
def mul(a, b):
    _check_broadcast("mul", a, b)
    return a * b, lambda g: (g * b, g * a)


@primitive("div", n_in=2, check_finite=True)
def div(a, b):
    _check_broadcast("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a / b

    def bw(g):
        gb = g / b
        return gb, -gb * out

    return out, bw


@primitive("neg")
def neg(a):
    return -a, lambda g: (-g,)


@primitive("pow", n_in=2, check_finite=True)
def pow(a, b):
    """``a ** b``; ``b`` may be a scalar or a tensor.  d/db is 0 where a == 0."""
    _check_broadcast("pow", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(a, b)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = g * b * np.power(a, b - 1.0)
            ga = np.where(np.isfinite(ga), ga, 0.0)
            pos = a > 0
            gb = g * out * np.log(np.where(pos, a, 1.0))
            gb = np.where(pos, gb, 0.0)
        return ga, gb

    return out, bw


@primitive("exp", check_finite=True)
def exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


@primitive("log", check_finite=True)
def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a)
    return out, lambda g: (g / a,)


@primitive("sqrt", check_finite=True)
def sqrt(a):
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a)

    def bw(g):
        with np.errstate(divide="ignore"):
            return (np.where(out > 0, 0.5 * g / np.where(out > 0, out, 1.0), 0.0),)

    return out, bw


@primitive("abs")
def abs(a):
    return np.abs(a), lambda g: (g * np.sign(a),)


@primitive("relu")
def relu(a):
    return np.maximum(a, 0.0), lambda g: (g * (a > 0),)


@primitive("tanh")
def tanh(a):
    out = np.tanh(a)
    return out, lambda g: (g * (1.0 - out * out),)


@primitive("sin")
def sin(a):
    return np.sin(a), lambda g: (g * np.cos(a),)


@primitive("cos")
def cos(a):
    return np.cos(a), lambda g: (-g * np.sin(a),)


def _sigmoid(x):
    # split form avoids overflow warnings for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@primitive("soft_clamp")
def soft_clamp(a, lo=0.0, hi=1.0):
    """Map the real line smoothly onto (lo, hi): ``lo + (hi - lo) * sigmoid(a)``."""
    s = _sigmoid(np.asarray(a, DTYPE))
    out = lo + (hi - lo) * s
    return out, lambda g: (g * (hi - lo) * s * (1.0 - s),)


def sigmoid(a):
    return soft_clamp(a, lo=0.0, hi=1.0)


def inverse_soft_clamp(value, lo, hi, eps: float = 1e-12):
    """Unconstrained preimage of ``value`` under :func:`soft_clamp` (numpy)."""
    value, lo, hi = (np.asarray(v, DTYPE) for v in (value, lo, hi))
    span = hi - lo
    t = np.where(span > 0, (value - lo) / np.where(span > 0, span, 1.0), 0.5)
    t = np.clip(t, eps, 1.0 - eps)
    return np.log(t) - np.log1p(-t)


@primitive("clip")
def clip(a, lo=0.0, hi=1.0):
    """Hard clamp; gradient passes only where the value is strictly inside."""
    out = np.clip(a, lo, hi)
    return out, lambda g: (g * ((a >= lo) & (a <= hi)),)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@primitive("sum")
def sum(a, axis=None, keepdims=False):
    out = a.sum(axis=axis, keepdims=keepdims)
    axes = _norm_axis(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, bw


@primitive("mean")
def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.sum(axis=axis, keepdims=keepdims) / n

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return out, bw


@primitive("reshape")
def reshape(a, shape):
    return a.reshape(shape), lambda g: (g.reshape(a.shape),)


@primitive("transpose")
def transpose(a, axes=None):
    out = np.transpose(a, axes)
    inv = None if axes is None else np.argsort(axes)
    return out, lambda g: (np.transpose(g, inv),)


@primitive("broadcast_to")
def broadcast_to(a, shape):
    try:
        out = np.broadcast_to(a, shape).copy()
    except ValueError:
        raise ValueError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return out, lambda g: (_unbroadcast(g, a.shape),)


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


@primitive("getitem")
def getitem(a, index):
    out = a[index]
    basic = _is_basic_index(index)

    def bw(g):
        ga = np.zeros_like(a)
        if basic:
            ga[index] += g
        else:
            np.add.at(ga, index, g)
        return (ga,)

    return np.array(out, copy=True), bw


@primitive("take")
def take(a, indices, axis=0):
    """Gather along ``axis`` with an integer index array (scatter-add backward)."""
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a, indices, axis=axis)

    def bw(g):
        ga = np.zeros_like(a)
        gm = np.moveaxis(g, axis, 0).reshape(indices.size, -1)
        flat = np.moveaxis(ga, axis, 0).reshape(a.shape[axis], -1)
        idx = indices.reshape(-1)
        for c in range(flat.shape[1]):
            flat[:, c] = np.bincount(idx, weights=gm[:, c], minlength=a.shape[axis])
        return (np.moveaxis(flat.reshape(np.moveaxis(ga, axis, 0).shape), 0, axis),)

    return out, bw


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return _concat(*tensors, axis=axis)


@primitive("concat", n_in=None)
def _concat(*arrays, axis=0):
    out = np.concatenate(arrays, axis=axis)
    splits = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return out, lambda g: tuple(np.split(g, splits, axis=axis))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    return _stack(*tensors, axis=axis)


@primitive("stack", n_in=None)
def _stack(*arrays, axis=0):
    out = np.stack(arrays, axis=axis)
    n = len(arrays)
    return out, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n))


# ---------------------------------------------------------------------------
# linear algebra and image primitives
# ---------------------------------------------------------------------------


@primitive("matmul", n_in=2)
def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a @ b

    def bw(g):
        return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g

    return out, bw


def _pad(x, ph, pw, mode):
    if ph == 0 and pw == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    np_mode = {"circular": "wrap", "replicate": "edge", "zeros": "constant"}[mode]
    return np.pad(x, width, mode=np_mode)


def _fold_axis(gp, pad, n, mode, axis):
    """Fold the gradient of a padded axis back onto the original extent."""
    gp = np.moveaxis(gp, axis, 0)
    out = gp[pad:pad + n].copy()
    lo, hi = gp[:pad], gp[pad + n:]
    if mode == "replicate":
        out[0] += lo.sum(axis=0)
        out[-1] += hi.sum(axis=0)
    elif mode == "circular":
        lo_idx = (np.arange(pad) - pad) % n
        hi_idx = np.arange(pad) % n
        np.add.at(out, lo_idx, lo)
        np.add.at(out, hi_idx, hi)
    return np.moveaxis(out, 0, axis)


def _unpad_grad(gp, ph, pw, mode, shape):
    H, W = shape[-2:]
    if ph:
        gp = _fold_axis(gp, ph, H, mode, -2)
    if pw:
        gp = _fold_axis(gp, pw, W, mode, -1)
    return gp


@primitive("conv2d", n_in=2)
def conv2d(x, w, padding="zeros"):
    """Cross-correlation of channel-major images with a kernel bank.

    ``x`` is (C, H, W) or (N, C, H, W); ``w`` is (O, C, kh, kw) with odd kh, kw.
    ``padding`` is one of ``zeros``, ``replicate``, ``circular`` (output keeps
    H, W) or ``valid``.
    """
    if x.ndim not in (3, 4) or w.ndim != 4 or w.shape[1] != x.shape[-3]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    O, C, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd, got {(kh, kw)}")
    batched = x.ndim == 4
    xb = x if batched else x[None]
    if padding == "valid":
        ph = pw = 0
        mode = "zeros"
    else:
        ph, pw, mode = kh // 2, kw // 2, padding
    xp = _pad(xb, ph, pw, mode)
    N, _, Hp, Wp = xp.shape
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    if Ho <= 0 or Wo <= 0:
        raise ValueError(f"conv2d: kernel {(kh, kw)} larger than input {x.shape}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # im2col: one BLAS contraction over (C, kh, kw)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def bw(g):
        gb = g if batched else g[None]
        gw = np.tensordot(gb, win, axes=([0, 2, 3], [0, 2, 3]))
        # full correlation of the cotangent with the flipped kernel
        gpad = np.pad(gb, [(0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)])
        gwin = np.lib.stride_tricks.sliding_window_view(gpad, (kh, kw), axis=(2, 3))
        gxp = np.tensordot(gwin, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
        gxp = gxp.transpose(0, 3, 1, 2)
        gx = _unpad_grad(gxp, ph, pw, mode, xb.shape)
        return (gx if batched else gx[0]), gw

    return (out if batched else out[0]), bw


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic bilinear interpolation matrix (pixel-centre alignment)."""
    m = np.zeros((n_out, n_in), DTYPE)
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = pos - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - f)
    np.add.at(m, (rows, i1), f)
    return m


@primitive("bilinear_resize")
def bilinear_resize(x, size):
    """Resize the trailing (H, W) axes to ``size`` with bilinear weights."""
    h, w = size
    ry = _interp_matrix(h, x.shape[-2])
    rx = _interp_matrix(w, x.shape[-1])
    out = ry @ x @ rx.T
    return out, lambda g: (ry.T @ g @ rx,)


@primitive("pixel_unshuffle")
def pixel_unshuffle(x, factor):
    """(C, H, W) -> (C * r * r, H / r, W / r) space-to-depth rearrangement."""
    r = int(factor)
    C, H, W = x.shape
    if H % r or W % r:
        raise ValueError(f"pixel_unshuffle: {(H, W)} not divisible by {r}")
    out = x.reshape(C, H // r, r, W // r, r).transpose(0, 2, 4, 1, 3).reshape(C * r * r, H // r, W // r)

    def bw(g):
        return (g.reshape(C, r, r, H // r, W // r).transpose(0, 3, 1, 4, 2).reshape(C, H, W),)

    return out, bw


def _weights(x, weights):
    if weights is None:
        return np.ones(x.shape[-2:], DTYPE)
    w = np.asarray(weights, DTYPE)
    if w.shape != x.shape[-2:]:
        raise ValueError(f"weights shape {w.shape} does not match image {x.shape}")
    return w


@primitive("spatial_mean")
def spatial_mean(x, weights=None):
    """Per-channel (weighted) mean over the trailing two axes."""
    w = _weights(x, weights)
    tot = w.sum()
    if tot <= 0:
        raise ValueError("spatial_mean: weights sum to zero")
    out = (x * w).sum(axis=(-2, -1)) / tot
    return out, lambda g: (g[..., None, None] * w / tot,)


@primitive("spatial_variance")
def spatial_variance(x, weights=None):
    """Per-channel (weighted, population) variance over the trailing two axes."""
    w = _weights(x, weights)
    tot = w.sum()
    if tot <= 0:
        raise ValueError("spatial_variance: weights sum to zero")
    mu = (x * w).sum(axis=(-2, -1), keepdims=True) / tot
    d = x - mu
    out = (w * d * d).sum(axis=(-2, -1)) / tot
    return out, lambda g: (g[..., None, None] * 2.0 * w * d / tot,)


@primitive("gram")
def gram(f):
    """Gram descriptor ``F F^T / (H W)`` of a (C, H, W) feature stack."""
    C = f.shape[0]
    hw = int(np.prod(f.shape[1:]))
    f2 = f.reshape(C, hw)
    out = f2 @ f2.T / hw

    def bw(g):
        return (((g + g.T) @ f2 / hw).reshape(f.shape),)

    return out, bw


@primitive("sample_bilinear", n_in=3)
def sample_bilinear(img, u, v, wrap=True):
    """Sample a (C, H, W) image at texture coordinates ``u, v`` in [0, 1].

    ``u`` runs along columns, ``v`` along rows (v = 0 is the first row).
    Returns (C, N).  Differentiable w.r.t. texels and coordinates.
    """
    C, H, W = img.shape
    u = np.asarray(u, DTYPE).reshape(-1)
    v = np.asarray(v, DTYPE).reshape(-1)
    if u.shape != v.shape:
        raise ValueError(f"sample_bilinear: u {u.shape} and v {v.shape} differ")
    x = u * W - 0.5
    y = v * H - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    if wrap:
        xa, xb = x0 % W, (x0 + 1) % W
        ya, yb = y0 % H, (y0 + 1) % H
    else:
        xa, xb = np.clip(x0, 0, W - 1), np.clip(x0 + 1, 0, W - 1)
        ya, yb = np.clip(y0, 0, H - 1), np.clip(y0 + 1, 0, H - 1)
    flat = img.reshape(C, H * W)
    i00, i01, i10, i11 = ya * W + xa, ya * W + xb, yb * W + xa, yb * W + xb
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    t00, t01, t10, t11 = flat[:, i00], flat[:, i01], flat[:, i10], flat[:, i11]
    out = t00 * w00 + t01 * w01 + t10 * w10 + t11 * w11

    def bw(g):
        gi = np.zeros((C, H * W), DTYPE)
        idx = np.concatenate([i00, i01, i10, i11])
        wts = np.concatenate([w00, w01, w10, w11])
        for c in range(C):
            gi[c] = np.bincount(idx, weights=np.tile(g[c], 4) * wts, minlength=H * W)
        dfx = (t01 - t00) * (1 - fy) + (t11 - t10) * fy
        dfy = (t10 - t00) * (1 - fx) + (t11 - t01) * fx
        gu = (g * dfx).sum(axis=0) * W
        gv = (g * dfy).sum(axis=0) * H
        return gi.reshape(C, H, W), gu, gv

    return out, bw


PRIMITIVES: dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "pow": pow,
    "exp": exp, "log": log, "sqrt": sqrt, "abs": abs, "relu": relu, "tanh": tanh,
    "sin": sin, "cos": cos, "soft_clamp": soft_clamp, "clip": clip,
    "sum": sum, "mean": mean, "reshape": reshape, "transpose": transpose,
    "broadcast_to": broadcast_to, "getitem": getitem, "take": take,
    "concat": concat, "stack": stack, "matmul": matmul, "conv2d": conv2d,
    "bilinear_resize": bilinear_resize, "pixel_unshuffle": pixel_unshuffle,
    "spatial_mean": spatial_mean, "spatial_variance": spatial_variance,
    "gram": gram, "sample_bilinear": sample_bilinear,
}


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------


def box_downsample(x: Tensor, factor: int) -> Tensor:
    """Average non-overlapping ``factor`` x ``factor`` blocks of a (C, H, W) image."""
    C, H, W = x.shape
    y = pixel_unshuffle(x, factor)
    return mean(reshape(y, (C, factor * factor, H // factor, W // factor)), axis=1)


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return a - relu(a - b)


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return b + relu(a - b)

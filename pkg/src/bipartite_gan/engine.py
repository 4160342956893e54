"""Dense tensors over numpy with reverse-mode differentiation.

Forward values are numpy arrays, float32 by default with float64 available
for high-precision verification. Every differentiable op records its inputs
and a vector-Jacobian closure; the closures are themselves written in terms
of tensor ops, so a backward pass built with ``create_graph=True`` can be
differentiated again (second-order terms, e.g. gradient penalties, come out
right). Execution is eager, single-threaded numpy, and bit-deterministic:
the same graph built from the same values produces identical bytes.

Multiply-accumulate counts of matmul-shaped work (including convolution via
im2col) can be captured with ``count_macs()`` and attributed to named scopes
with ``mac_scope(tag)``.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_mode = [True]
_debug_checks = [False]
_mac_stack: list["MacCounter"] = []
_mac_tag = ["other"]


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-op non-finite guards (kept off in hot loops)."""
    _debug_checks[0] = bool(enabled)


@contextmanager
def no_grad():
    _grad_mode.append(False)
    try:
        yield
    finally:
        _grad_mode.pop()


@contextmanager
def _grad_enabled(flag: bool):
    _grad_mode.append(bool(flag))
    try:
        yield
    finally:
        _grad_mode.pop()


class MacCounter:
    """Accumulates multiply-accumulate counts, split by scope tag."""

    def __init__(self):
        self.by_tag: dict[str, int] = {}

    def add(self, n: int, tag: str) -> None:
        self.by_tag[tag] = self.by_tag.get(tag, 0) + n

    @property
    def total(self) -> int:
        return sum(self.by_tag.values())

    def get(self, tag: str) -> int:
        return self.by_tag.get(tag, 0)


@contextmanager
def count_macs():
    counter = MacCounter()
    _mac_stack.append(counter)
    try:
        yield counter
    finally:
        _mac_stack.pop()


@contextmanager
def mac_scope(tag: str):
    _mac_tag.append(tag)
    try:
        yield
    finally:
        _mac_tag.pop()


def _add_macs(n: int) -> None:
    if _mac_stack:
        tag = _mac_tag[-1]
        for counter in _mac_stack:
            counter.add(n, tag)


class Tensor:
    """A numpy array plus optional differentiation-graph bookkeeping.

    Tensors are hashable by identity; gradient maps are keyed by the tensor
    object itself. Only tensors with ``requires_grad`` participate in graph
    traversal, so constant inputs are never walked as graph parents.
    """

    __slots__ = ("data", "requires_grad", "_inputs", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._inputs: tuple[Tensor, ...] = ()
        self._vjp = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{grad}, op={self._op})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def astype(self, dtype):
        return astype(self, dtype)


GradMap = dict  # Tensor -> Tensor; absent key means zero gradient


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def param(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE))


def ones(shape, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or DEFAULT_DTYPE))


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    if _debug_checks[0] and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out._op = op
    if _grad_mode[-1] and any(p.requires_grad for p in inputs):
        out.requires_grad = True
        out._inputs = inputs
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._inputs = ()
        out._vjp = None
    return out


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axes, keepdims=True)
    return g


# -- arithmetic -----------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)

    def vjp(g, need):
        ga = _unbroadcast(g, a.shape) if need[0] else None
        gb = _unbroadcast(g, b.shape) if need[1] else None
        return ga, gb

    return _result(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)

    def vjp(g, need):
        ga = _unbroadcast(g, a.shape) if need[0] else None
        gb = _unbroadcast(neg(g), b.shape) if need[1] else None
        return ga, gb

    return _result(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)

    def vjp(g, need):
        ga = _unbroadcast(mul(g, b), a.shape) if need[0] else None
        gb = _unbroadcast(mul(g, a), b.shape) if need[1] else None
        return ga, gb

    return _result(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = _result(a.data / b.data, (a, b), None, "div")

    def vjp(g, need):
        ga = _unbroadcast(div(g, b), a.shape) if need[0] else None
        gb = _unbroadcast(neg(div(mul(g, out), b)), b.shape) if need[1] else None
        return ga, gb

    out._vjp = vjp if out.requires_grad else None
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g, need):
        return (neg(g),)

    return _result(-a.data, (a,), vjp, "neg")


def exp(a: Tensor) -> Tensor:
    out = _result(np.exp(a.data), (a,), None, "exp")

    def vjp(g, need):
        return (mul(g, out),)

    out._vjp = vjp if out.requires_grad else None
    return out


def log(a: Tensor) -> Tensor:
    def vjp(g, need):
        return (div(g, a),)

    return _result(np.log(a.data), (a,), vjp, "log")


def sqrt(a: Tensor) -> Tensor:
    """Element-wise square root with a zero subgradient at exactly zero."""
    out = _result(np.sqrt(a.data), (a,), None, "sqrt")

    def vjp(g, need):
        zero = out.data == 0.0
        if zero.any():
            # Guarded path: derivative forced to 0 where the output is 0,
            # full graph (double-differentiable) elsewhere.
            coeff = Tensor(np.where(zero, 0.0, 0.5).astype(out.data.dtype))
            denom = add(out, Tensor(zero.astype(out.data.dtype)))
            return (div(mul(g, coeff), denom),)
        return (div(mul(g, 0.5), out),)

    out._vjp = vjp if out.requires_grad else None
    return out


def tanh(a: Tensor) -> Tensor:
    out = _result(np.tanh(a.data), (a,), None, "tanh")

    def vjp(g, need):
        return (mul(g, sub(1.0, mul(out, out))),)

    out._vjp = vjp if out.requires_grad else None
    return out


def sigmoid(a: Tensor) -> Tensor:
    # exp(-logaddexp(0, -x)) is overflow-safe on both tails.
    data = np.exp(-np.logaddexp(0.0, -a.data)).astype(a.data.dtype)
    out = _result(data, (a,), None, "sigmoid")

    def vjp(g, need):
        return (mul(g, mul(out, sub(1.0, out))),)

    out._vjp = vjp if out.requires_grad else None
    return out


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably for large |x|."""
    data = np.logaddexp(0.0, a.data).astype(a.data.dtype)

    def vjp(g, need):
        return (mul(g, sigmoid(a)),)

    return _result(data, (a,), vjp, "softplus")


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    """x for x >= 0, alpha * x otherwise (subgradient alpha at exactly 0)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {alpha}")
    # max(x, alpha * x) equals the piecewise form for 0 < alpha < 1 and is a
    # single ufunc pass; the sign mask is only materialized on backward.
    data = np.maximum(a.data, a.data * a.data.dtype.type(alpha))

    def vjp(g, need):
        slope = Tensor(np.where(a.data > 0, 1.0, alpha).astype(a.data.dtype))
        return (mul(g, slope),)

    return _result(data, (a,), vjp, "leaky_relu")


# -- shape ops ------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def vjp(g, need):
        return (reshape(g, a.shape),)

    return _result(a.data.reshape(shape), (a,), vjp, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))

    def vjp(g, need):
        return (transpose(g, inv),)

    # view, not copy: consumers that need contiguity copy on demand
    return _result(a.data.transpose(axes), (a,), vjp, "transpose")


def astype(a: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)

    def vjp(g, need):
        return (astype(g, a.data.dtype),)

    return _result(a.data.astype(dtype), (a,), vjp, "astype")


def getitem(a: Tensor, idx) -> Tensor:
    data = np.ascontiguousarray(a.data[idx])

    def vjp(g, need):
        return (_scatter(g, idx, a.shape),)

    return _result(data, (a,), vjp, "getitem")


def _scatter(g: Tensor, idx, shape) -> Tensor:
    buf = np.zeros(shape, dtype=g.data.dtype)
    if _has_array_index(idx):
        # Repeated indices must accumulate; plain assignment would keep only
        # the last contribution.
        np.add.at(buf, idx, g.data)
    else:
        buf[idx] = g.data

    def vjp(gg, need):
        return (getitem(gg, idx),)

    return _result(buf, (g,), vjp, "scatter")


def _has_array_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g, need):
        grads = []
        for i, p in enumerate(parts):
            if not need[i]:
                grads.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(getitem(g, tuple(sl)))
        return tuple(grads)

    return _result(data, tuple(parts), vjp, "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def vjp(g, need):
        return (_unbroadcast(g, a.shape),)

    return _result(np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,), vjp, "broadcast")


# -- reductions -----------------------------------------------------------


def _keepdims_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    kshape = _keepdims_shape(a.shape, axis)

    def vjp(g, need):
        return (broadcast_to(reshape(g, kshape), a.shape),)

    return _result(np.asarray(data), (a,), vjp, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    total = a.size if axis is None else int(
        np.prod([a.shape[ax % a.ndim] for ax in ((axis,) if isinstance(axis, int) else axis)])
    )
    return mul(tsum(a, axis, keepdims), 1.0 / total)


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.max(axis=axis, keepdims=keepdims)
    kshape = _keepdims_shape(a.shape, axis)

    def vjp(g, need):
        full = np.broadcast_to(data.reshape(kshape), a.shape)
        mask = (a.data == full).astype(a.data.dtype)
        mask /= mask.sum(axis=axis, keepdims=True)  # ties share the gradient
        return (mul(broadcast_to(reshape(g, kshape), a.shape), Tensor(mask)),)

    return _result(np.asarray(data), (a,), vjp, "max")


# -- matmul and convolution ------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul expects rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    if b.shape[-1] == 1:
        # BLAS routes single-column products to gemv, whose per-row results
        # depend on the row's position in the matrix; einsum reduces each row
        # independently, keeping results invariant to batch order.
        data = np.einsum("...nk,...ko->...no", a.data, b.data)
    else:
        data = a.data @ b.data
    if _mac_stack:
        batch = int(np.prod(data.shape[:-2], dtype=np.int64)) if data.ndim > 2 else 1
        _add_macs(batch * a.shape[-2] * a.shape[-1] * b.shape[-1])

    def _swap(t):
        axes = list(range(t.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(t, axes)

    def vjp(g, need):
        ga = _unbroadcast(matmul(g, _swap(b)), a.shape) if need[0] else None
        gb = _unbroadcast(matmul(_swap(a), g), b.shape) if need[1] else None
        return ga, gb

    return _result(data, (a, b), vjp, "matmul")


def unfold3x3(a: Tensor) -> Tensor:
    """im2col for 3x3 windows, stride 1, zero pad 1: [N,C,H,W] -> [N,H,W,C,3,3]."""
    n, c, h, w = a.shape
    padded = np.pad(a.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    data = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))

    def vjp(g, need):
        return (fold3x3(g),)

    return _result(data, (a,), vjp, "unfold3x3")


def fold3x3(a: Tensor) -> Tensor:
    """Adjoint of unfold3x3: scatter-add windows back, [N,H,W,C,3,3] -> [N,C,H,W]."""
    n, h, w, c, _, _ = a.shape
    cols = a.data.transpose(0, 3, 1, 2, 4, 5)  # [N,C,H,W,3,3]
    buf = np.zeros((n, c, h + 2, w + 2), dtype=a.data.dtype)
    for ky in range(3):
        for kx in range(3):
            buf[:, :, ky : ky + h, kx : kx + w] += cols[:, :, :, :, ky, kx]
    data = np.ascontiguousarray(buf[:, :, 1 : 1 + h, 1 : 1 + w])

    def vjp(g, need):
        return (unfold3x3(g),)

    return _result(data, (a,), vjp, "fold3x3")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """2-D cross-correlation, 3x3 kernel, stride 1, zero padding 1.

    Args:
        x: input feature map [N, C, H, W].
        w: kernels [O, C, 3, 3].
        b: optional bias [O].

    Returns:
        Feature map [N, O, H, W].
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects x[N,C,H,W] and w[O,C,3,3], got {x.shape}, {w.shape}")
    if w.shape[2:] != (3, 3):
        raise ValueError(f"conv2d supports 3x3 kernels only, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: x has {x.shape[1]}, w expects {w.shape[1]}")
    n, c, h, wd = x.shape
    o = w.shape[0]
    cols = reshape(unfold3x3(x), (n * h * wd, c * 9))
    wmat = transpose(reshape(w, (o, c * 9)), (1, 0))
    out = matmul(cols, wmat)  # [N*H*W, O]
    out = transpose(reshape(out, (n, h, wd, o)), (0, 3, 1, 2))
    if b is not None:
        out = add(out, reshape(b, (1, o, 1, 1)))
    return out


# -- bilinear resizing ------------------------------------------------------


def _up2_indices(h: int):
    o = np.arange(2 * h)
    i = o // 2
    side = np.where(o % 2 == 0, np.maximum(i - 1, 0), np.minimum(i + 1, h - 1))
    return i, side


def _up2_data(x: np.ndarray) -> np.ndarray:
    # Half-pixel bilinear doubling along the last two axes, edges clamped.
    for ax in (-2, -1):
        h = x.shape[ax]
        main, side = _up2_indices(h)
        x = 0.75 * np.take(x, main, axis=ax) + 0.25 * np.take(x, side, axis=ax)
    return x


def _up2_adj_1d(g: np.ndarray) -> np.ndarray:
    # Adjoint of the 1-D doubling along the last axis; g[..., 2H] -> [..., H].
    even, odd = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (even + odd)
    out[..., :-1] += 0.25 * even[..., 1:]
    out[..., 1:] += 0.25 * odd[..., :-1]
    out[..., 0] += 0.25 * even[..., 0]
    out[..., -1] += 0.25 * odd[..., -1]
    return out


def _up2_adj_data(g: np.ndarray) -> np.ndarray:
    g = _up2_adj_1d(g)
    g = np.moveaxis(_up2_adj_1d(np.moveaxis(g, -2, -1)), -1, -2)
    return np.ascontiguousarray(g)


def bilinear_up2(a: Tensor) -> Tensor:
    """Double the last two axes with half-pixel bilinear interpolation."""
    data = _up2_data(a.data).astype(a.data.dtype)

    def vjp(g, need):
        return (_up2_adjoint(g),)

    return _result(data, (a,), vjp, "bilinear_up2")


def _up2_adjoint(a: Tensor) -> Tensor:
    data = _up2_adj_data(a.data).astype(a.data.dtype)

    def vjp(g, need):
        return (bilinear_up2(g),)

    return _result(data, (a,), vjp, "bilinear_up2_adj")


def bilinear_down2(a: Tensor) -> Tensor:
    """Halve the last two axes; half-pixel bilinear here is the exact 2x2 box mean."""
    h, w = a.shape[-2], a.shape[-1]
    if h % 2 or w % 2:
        raise ValueError(f"bilinear_down2 needs even spatial extents, got {a.shape}")
    shp = a.shape[:-2] + (h // 2, 2, w // 2, 2)
    data = a.data.reshape(shp).mean(axis=(-3, -1))

    def vjp(g, need):
        return (_down2_adjoint(g),)

    return _result(data, (a,), vjp, "bilinear_down2")


def _down2_adjoint(a: Tensor) -> Tensor:
    data = np.repeat(np.repeat(a.data, 2, axis=-2), 2, axis=-1) * a.data.dtype.type(0.25)

    def vjp(g, need):
        return (bilinear_down2(g),)

    return _result(data, (a,), vjp, "bilinear_down2_adj")


def resize_bilinear(a: Tensor, factor) -> Tensor:
    """Resize the last two axes by a factor of 2 or 1/2 (half-pixel convention)."""
    if factor == 2:
        return bilinear_up2(a)
    if factor == 0.5:
        return bilinear_down2(a)
    raise ValueError(f"resize_bilinear supports factors 2 and 0.5, got {factor!r}")


# -- normalization and softmax ----------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along an axis, max-subtracted, reductions accumulated in float64.

    The float64 accumulation makes the (rounded) float32 result invariant to
    permutations along the reduced axis, which the attention layers rely on.
    """
    x = astype(a, np.float64) if a.data.dtype != np.float64 else a
    shifted = sub(x, tmax(x, axis, keepdims=True).detach())
    e = exp(shifted)
    out = div(e, tsum(e, axis, keepdims=True))
    return astype(out, a.data.dtype) if a.data.dtype != np.float64 else out


def channel_norm(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize the last axis to zero mean, unit variance: (x - mu) / sqrt(var + eps)."""
    mu = tmean(a, -1, keepdims=True)
    centered = sub(a, mu)
    var = tmean(mul(centered, centered), -1, keepdims=True)
    return div(centered, sqrt(add(var, eps)))


# -- backward ----------------------------------------------------------------


def backward(loss: Tensor, wrt=None, create_graph: bool = False) -> GradMap:
    """Reverse-mode differentiation of a scalar loss.

    Args:
        loss: scalar tensor (size 1).
        wrt: optional iterable of tensors; propagation is pruned to the
            subgraph that reaches them and only their gradients are returned.
        create_graph: record the backward computation so the returned
            gradients can themselves be differentiated.

    Returns:
        GradMap from tensor to gradient. Absent keys mean zero gradient.
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._inputs:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    if wrt is not None:
        wrt = list(wrt)
        wrt_ids = {id(t) for t in wrt}
        reaches: dict[int, bool] = {}
        for node in topo:  # parents precede consumers
            reaches[id(node)] = id(node) in wrt_ids or any(
                reaches.get(id(p), False) for p in node._inputs if p.requires_grad
            )
    else:
        wrt_ids = None
        reaches = None

    grads: dict[int, Tensor] = {id(loss): Tensor(np.ones_like(loss.data))}
    by_id: dict[int, Tensor] = {}
    with _grad_enabled(create_graph):
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if wrt_ids is not None and id(node) in wrt_ids:
                by_id[id(node)] = g
                # A wrt target can still sit on the path to another target.
                others = wrt_ids - {id(node)}
                if not node._vjp or not any(
                    reaches.get(id(p), False) or id(p) in others
                    for p in node._inputs
                    if p.requires_grad
                ):
                    continue
            if node._vjp is None:
                if wrt_ids is None:
                    by_id[id(node)] = g
                continue
            need = tuple(
                p.requires_grad and (reaches is None or reaches.get(id(p), False))
                for p in node._inputs
            )
            if not any(need):
                continue
            parent_grads = node._vjp(g, need)
            for p, pg in zip(node._inputs, parent_grads):
                if pg is None:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)

    if wrt is not None:
        return {t: by_id[id(t)] for t in wrt if id(t) in by_id}
    # Map ids back to leaf tensors reachable from the loss.
    leaves = {id(n): n for n in topo if n._vjp is None}
    return {leaves[i]: g for i, g in by_id.items() if i in leaves}

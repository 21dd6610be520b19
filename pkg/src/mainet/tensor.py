"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op records one node on the calling thread's active
:class:`GradTape`.  ``Tensor.backward`` walks that tape in reverse execution
order, so each recorded op is visited exactly once.

Layout is row-major (C order) throughout.  Ops that take images use
``(C, H, W)`` or batched ``(N, C, H, W)`` index order; sequence ops use
``(..., L, D)``.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are incompatible with the op."""


class ConfigurationError(ValueError):
    """Op parameters describe an impossible or invalid computation."""


class ContractError(ValueError):
    """A caller broke an op's documented contract."""


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: "Tensor", parents: tuple["Tensor", ...], backward: Backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class GradTape:
    """Ordered record of executed ops and their backward closures."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consistent = True

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], backward: Backward | None) -> None:
        if backward is None:
            raise ContractError("refusing to record an op without a backward rule")
        self.nodes.append(_Node(out, parents, backward))

    def clear(self) -> None:
        self.nodes.clear()
        self.consistent = True

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def _state():
    if not hasattr(_local, "tapes"):
        _local.tapes = [GradTape()]
        _local.grad_enabled = True
    return _local


def current_tape() -> GradTape:
    return _state().tapes[-1]


@contextlib.contextmanager
def tape():
    """Run a block against a fresh tape (restores the previous one on exit)."""
    st = _state()
    t = GradTape()
    st.tapes.append(t)
    try:
        yield t
    finally:
        st.tapes.pop()


@contextlib.contextmanager
def no_grad():
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def grad_enabled() -> bool:
    return _state().grad_enabled


class Tensor:
    """A float64 array that optionally tracks gradients.

    Values are treated as immutable; the only sanctioned mutation is
    :meth:`assign_`, used by optimizers between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    # -- basic protocol ------------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    def assign_(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise DimensionError(f"assign_ shape {value.shape} != {self.data.shape}")
        self.data = _as_f64(value)

    def zero_grad(self) -> None:
        self.grad = None

    # -- differentiation -------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None, tape_: GradTape | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every grad-requiring leaf.

        The tape is cleared afterwards.
        """
        t = tape_ if tape_ is not None else current_tape()
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        leaves: dict[int, Tensor] = {}
        produced = {id(n.out) for n in t.nodes}
        for node in reversed(t.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if key not in produced:
                    leaves[key] = p
        if id(self) not in produced and self.requires_grad:
            leaves[id(self)] = self
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        t.clear()

    # -- operator sugar --------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr if arr.flags.c_contiguous else arr.copy(order="C")


def _raise_item(shape):
    raise ContractError(f"item() needs a single element, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Backward) -> Tensor:
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        current_tape().record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    x = as_tensor(x)
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), back)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) over the last axis (no affine part)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    y = (x.data - mu) * inv

    def back(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True) - y * (g * y).mean(axis=-1, keepdims=True)),)

    return _make(y, (x,), back)


# -- shape ---------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(x.data[idx]), (x,), back)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat of an empty list")
    nd = xs[0].ndim
    ax = axis % nd if nd else 0
    for x in xs[1:]:
        if x.ndim != nd or any(x.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(f"concat axis {axis}: incompatible shapes {[t.shape for t in xs]}")
    sizes = [x.shape[ax] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=ax), tuple(xs),
                 lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise DimensionError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([x.data for x in xs], axis=axis)
    ax = axis % out.ndim
    return _make(out, tuple(xs),
                 lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(xs))))


# -- reductions ------------------------------------------------------------------

def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def prod(x, axis: int) -> Tensor:
    """Product along one axis (gradient via exclusive products, zero-safe)."""
    x = as_tensor(x)
    ax = axis % x.ndim
    d = np.moveaxis(x.data, ax, -1)
    out = d.prod(axis=-1)

    def back(g):
        n = d.shape[-1]
        left = np.ones_like(d)
        right = np.ones_like(d)
        for i in range(1, n):
            left[..., i] = left[..., i - 1] * d[..., i - 1]
            right[..., n - 1 - i] = right[..., n - i] * d[..., n - i]
        return (np.moveaxis(left * right * g[..., None], -1, ax),)

    return _make(out, (x,), back)


def global_avg_pool(x) -> Tensor:
    """Mean over the two trailing spatial axes: (..., C, H, W) -> (..., C)."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise DimensionError(f"global_avg_pool expects (..., C, H, W), got {x.shape}")
    return mean(x, axis=(-2, -1))


# -- linear algebra --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """C[i][j] = sum_t A[i][t] B[t][j]; leading axes broadcast like numpy."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(out, (a, b), back)


def linear(x, W, b=None) -> Tensor:
    """x @ W + b with W stored (in_features, out_features)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {W.shape[0]}")
    y = matmul(x.reshape(-1, x.shape[-1]), W).reshape(*x.shape[:-1], W.shape[1])
    return y if b is None else add(y, b)


# -- convolution -----------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, kernel, stride: int = 1, padding: int = 0, dilation: int = 1,
           depthwise: bool = False, bias=None) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    ``x`` is (C_in, H, W) or (N, C_in, H, W).  A dense kernel is
    (C_out, C_in, k, k); a depthwise kernel is (C, 1, k, k) and maps each
    channel independently.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape} / kernel {kernel.shape} have wrong rank")
    n, c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if depthwise:
        if ci != 1 or co != c:
            raise DimensionError(f"depthwise conv2d: kernel {kernel.shape} incompatible with {c} channels")
    elif ci != c:
        raise DimensionError(f"conv2d: kernel expects {ci} input channels, input has {c}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ConfigurationError("conv2d: stride/dilation must be >= 1 and padding >= 0")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ConfigurationError(
            f"conv2d: non-positive output size {ho}x{wo} (H={h}, W={w}, k={kh}, "
            f"s={stride}, p={padding}, d={dilation})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    K = kernel.data
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1

    def tap(u, v):
        return (slice(None), slice(None),
                slice(u * dilation, u * dilation + span_h, stride),
                slice(v * dilation, v * dilation + span_w, stride))

    if depthwise:
        # (n, c, ho, wo, kh, kw) strided view of every receptive field
        win = sliding_window_view(xp, (dilation * (kh - 1) + 1, dilation * (kw - 1) + 1), axis=(2, 3))
        win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
        out = np.einsum("nchwuv,cuv->nchw", win, K[:, 0])
    else:
        cols = np.empty((n, ho, wo, c, kh, kw))
        for u in range(kh):
            for v in range(kw):
                cols[..., u, v] = xp[tap(u, v)].transpose(0, 2, 3, 1)
        out = (cols.reshape(n * ho * wo, -1) @ K.reshape(co, -1).T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)

    def back(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        if depthwise:
            gk = np.einsum("nchw,nchwuv->cuv", g, win)[:, None]
            if gxp is not None:
                for u in range(kh):
                    for v in range(kw):
                        gxp[tap(u, v)] += g * K[:, 0, u, v][None, :, None, None]
        else:
            g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
            gk = (g2.T @ cols.reshape(n * ho * wo, -1)).reshape(K.shape)
            if gxp is not None:
                gcols = (g2 @ K.reshape(co, -1)).reshape(n, ho, wo, c, kh, kw)
                for u in range(kh):
                    for v in range(kw):
                        gxp[tap(u, v)] += gcols[..., u, v].transpose(0, 3, 1, 2)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gk)

    y = _make(out, (x, kernel), back)
    if bias is not None:
        y = add(y, reshape(as_tensor(bias), (-1, 1, 1)))
    return reshape(y, y.shape[1:]) if squeeze else y


def embed_kernel(kernel, size: int, dilation: int = 1) -> Tensor:
    """Place a (C, 1, k, k) kernel, dilated, centred on a (C, 1, size, size) grid.

    Tap (u, v) lands at offset (dilation*u, dilation*v) from the top-left of
    the centred footprint; every other cell is zero.
    """
    kernel = as_tensor(kernel)
    k = kernel.shape[-1]
    span = dilation * (k - 1) + 1
    if span > size or (size - span) % 2:
        raise ConfigurationError(f"kernel {k} with dilation {dilation} spans {span}, does not centre in {size}")
    off = (size - span) // 2
    idx = (Ellipsis, slice(off, off + span, dilation), slice(off, off + span, dilation))
    out = np.zeros(kernel.shape[:-2] + (size, size))
    out[idx] = kernel.data
    return _make(out, (kernel,), lambda g: (np.ascontiguousarray(g[idx]),))


# -- verification ---------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    Error per element is |analytic - cd| / max(|analytic|, |cd|, 1e-12).
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ContractError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    with tape() as t:
        y = f(xt)
        if not isinstance(y, Tensor) or y.size != 1:
            raise ContractError(f"grad_check needs a scalar-valued f, got shape {getattr(y, 'shape', None)}")
        if y.requires_grad:
            y.backward(tape_=t)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xp[i] += eps
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            xp[i] -= 2 * eps
            fm = f(Tensor(xp.reshape(x0.shape))).item()
            flat[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0


# -- serialization ---------------------------------------------------------------

def serialize(x) -> bytes:
    """Rank and shape as little-endian uint32, then float64 LE payload."""
    arr = as_tensor(x).data
    head = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def deserialize(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Inverse of :func:`serialize`; returns the tensor and the next offset."""
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    n = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).astype(np.float64)
    return Tensor(data.reshape(shape)), offset + 8 * n


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)

"""Dense numpy tensors with reverse-mode automatic differentiation.

Every differentiable primitive records its parents and a closure mapping the
output gradient to parent gradients. ``gradient`` sorts the recorded graph
topologically (the tape) and replays it backwards exactly once per node.
"""
from __future__ import annotations

import contextlib
import struct
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "ShapeError", "tensor", "zeros", "ones", "as_tensor",
    "no_grad", "default_dtype", "get_default_dtype", "build_tape", "gradient",
    "matmul", "conv2d", "maxpool2d", "batchnorm", "relu", "tanh", "sigmoid",
    "softmax", "log_softmax", "logsumexp", "sin", "cos", "exp", "log", "sqrt",
    "add", "mul", "sub", "div", "sum", "mean", "concat", "stack", "reshape",
    "transpose", "l2norm", "clip", "save_tensor", "load_tensor",
]


class ShapeError(ValueError):
    pass


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the float dtype used for newly created tensors."""
    global _DEFAULT_DTYPE
    old, _DEFAULT_DTYPE = _DEFAULT_DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    """An n-d array that remembers how it was computed."""

    __array_priority__ = 100  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    def __len__(self):
        return len(self.data)

    # -- operators ---------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

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

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)


def as_tensor(x) -> Tensor:
    """Wrap arrays as constants; floating arrays keep their precision, anything else gets the default dtype."""
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad=False, dtype=None, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or _DEFAULT_DTYPE), requires_grad, name=name)


def zeros(shape, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad)


def ones(shape, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _coerce(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b if isinstance(b, Tensor) else None), _coerce(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b if isinstance(b, Tensor) else None), _coerce(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b if isinstance(b, Tensor) else None), _coerce(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b if isinstance(b, Tensor) else None), _coerce(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def power(a: Tensor, p: float) -> Tensor:
    a = _coerce(a)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operands not allowed, got shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ad, bd = a.data, b.data
        # promote vectors so the matrix rules apply uniformly
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        if ad.ndim == 1:
            ga = ga[..., 0, :]
        if bd.ndim == 1:
            gb = gb[..., :, 0]
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), backward, "matmul")


# -- elementwise unary -------------------------------------------------------

def exp(x) -> Tensor:
    x = _coerce(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = _coerce(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x) -> Tensor:
    x = _coerce(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def sin(x) -> Tensor:
    x = _coerce(x)
    return _make(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),), "sin")


def cos(x) -> Tensor:
    x = _coerce(x)
    return _make(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),), "cos")


def tanh(x) -> Tensor:
    x = _coerce(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x) -> Tensor:
    x = _coerce(x)
    # split by sign so neither branch overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x) -> Tensor:
    x = _coerce(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input was inside [lo, hi]."""
    x = _coerce(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# -- reductions and softmax family ------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _coerce(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _make(np.asarray(out), (x,),
                 lambda g: (_expand_reduced(g, x.shape, axis, keepdims).copy(),), "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _coerce(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    n = x.size // max(np.asarray(out).size, 1)
    return _make(np.asarray(out), (x,),
                 lambda g: (_expand_reduced(g, x.shape, axis, keepdims) / n,), "mean")


def _check_axis(op: str, x: Tensor, axis: int):
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"{op}: empty axis {axis} for shape {x.shape}")


def softmax(x, axis: int = -1) -> Tensor:
    x = _coerce(x)
    _check_axis("softmax", x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _coerce(x)
    _check_axis("log_softmax", x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    _check_axis("logsumexp", x, axis)
    m = x.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * np.exp(x.data - lse),)

    return _make(out, (x,), backward, "logsumexp")


def l2norm(x, axis=-1, keepdims=False) -> Tensor:
    x = _coerce(x)
    sq = np.sum(x.data * x.data, axis=axis, keepdims=True)
    nrm = np.sqrt(sq)
    out = nrm if keepdims else np.squeeze(nrm, axis=axis)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(nrm > 0, nrm, 1.0)
        return (gk * np.where(nrm > 0, x.data / safe, 0.0),)

    return _make(out, (x,), backward, "l2norm")


# -- shape manipulation -----------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = _coerce(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = _coerce(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x, idx) -> Tensor:
    x = _coerce(x)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), backward, "getitem")


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_coerce(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + " and ".join(str(x.shape) for x in xs)) from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, xs, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_coerce(x) for x in xs]
    try:
        out = np.stack([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("stack: incompatible shapes " + " and ".join(str(x.shape) for x in xs)) from None
    n = len(xs)
    return _make(out, xs,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


# -- convolutional primitives -----------------------------------------------

def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation on NCHW input with OIHW weights (valid padding by default)."""
    x, w = _coerce(x), _coerce(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    kh, kw = w.shape[2:]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,ocij->nohw", win, w.data, optimize=True)
    parents = [x, w]
    if b is not None:
        b = _coerce(b)
        out = out + b.data[None, :, None, None]
        parents.append(b)
    ho, wo = out.shape[2:]

    def backward(g):
        gw = np.einsum("nohw,nchwij->ocij", g, win, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.einsum(
                    "nohw,oc->nchw", g, w.data[:, :, i, j], optimize=True)
        gx = gxp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]] if padding else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, parents, backward, "conv2d")


def maxpool2d(x, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped.

    Ties route the gradient to the first maximum in row-major window order.
    """
    x = _coerce(x)
    n, c, h, w = x.shape
    ho, wo = h // kernel, w // kernel
    if ho == 0 or wo == 0:
        raise ShapeError(f"maxpool2d: input {x.shape} smaller than kernel {kernel}")
    xc = x.data[:, :, :ho * kernel, :wo * kernel]
    win = xc.reshape(n, c, ho, kernel, wo, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, -1)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * kernel, wo * kernel)
        full = np.zeros_like(x.data)
        full[:, :, :ho * kernel, :wo * kernel] = gw
        return (full,)

    return _make(out, (x,), backward, "maxpool2d")


def batchnorm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = 0.9, eps: float = 1e-5,
              update_stats: bool = True) -> Tensor:
    """Per-channel batch normalisation over every axis except axis 1.

    In training mode batch statistics are used and, if ``update_stats``, the
    running buffers are updated in place as ``momentum * running + (1 - momentum) * batch``.
    Eval mode uses the running buffers only.
    """
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    if x.ndim < 2 or x.shape[0] < 1:
        raise ShapeError(f"batchnorm: need a batch extent >= 1, got shape {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            running_mean *= momentum
            running_mean += (1 - momentum) * mu
            running_var *= momentum
            running_var += (1 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    m = x.size // x.shape[1]

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, gg, gb

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batchnorm")


# -- backward driver --------------------------------------------------------

def build_tape(loss: Tensor) -> list[Tensor]:
    """Every node reachable from ``loss``, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def gradient(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Reverse-mode gradient of a scalar ``loss``.

    Without ``wrt`` the result maps every requires-grad leaf reachable from
    ``loss``. With ``wrt`` it maps exactly those tensors, using zeros for the
    ones the loss does not depend on.
    """
    if loss.size != 1:
        raise ShapeError(f"gradient: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        tape = build_tape(loss)
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(tape):
            g = grads.get(id(node))
            if g is None:
                continue
            if node._backward is None:
                leaves[id(node)] = node
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
            if node is not loss:
                del grads[id(node)]  # free intermediate buffers early
    if wrt is None:
        return {t: Tensor(grads[i]) for i, t in leaves.items()}
    out = {}
    for t in wrt:
        g = grads.get(id(t)) if id(t) in leaves or t is loss else None
        out[t] = Tensor(g if g is not None else np.zeros_like(t.data))
    return out


# -- snapshot format ----------------------------------------------------------

_MAGIC = b"DCT1"
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3, np.dtype("<i4"): 4, np.dtype("u1"): 5}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_tensor(fh: BinaryIO, x) -> None:
    """Write a little-endian snapshot: magic, dtype code, rank, extents, raw bytes."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"save_tensor: unsupported dtype {arr.dtype}")
    fh.write(_MAGIC + struct.pack("<BI", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def load_tensor(fh: BinaryIO) -> np.ndarray:
    head = fh.read(4)
    if head != _MAGIC:
        raise ValueError(f"load_tensor: bad magic {head!r}")
    code, rank = struct.unpack("<BI", fh.read(5))
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    buf = fh.read(count * dtype.itemsize)
    return np.frombuffer(buf, dtype=dtype, count=count).reshape(shape).copy()

"""Small reverse-mode autodiff engine over numpy arrays.

Only the operations the attention operator needs are provided: elementwise
arithmetic, (batched) matmul, reductions, layer normalization and real 2-D
Fourier transforms.  Everything is float64 / complex128.

Gradients of complex tensors follow the usual convention for real losses:
``grad = dL/dRe + 1j * dL/dIm``.

Usage::

    with Tape() as tape:
        y = matmul(x, w)
        loss = sum_(mul(y, y))
    grads = tape.backward(loss)
"""
from __future__ import annotations

import contextlib
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.fft as sfft

__all__ = [
    "Tensor", "Tape", "tensor", "backward",
    "add", "sub", "mul", "div", "neg", "scale", "pow_", "sqrt",
    "sum_", "mean", "matmul", "transpose", "reshape", "concat", "take", "layer_norm",
    "rfft2", "irfft2", "spectral_mul", "retained_rows", "mode_rows",
    "peak_alloc_bytes", "live_bytes", "reset_peak", "single_threaded",
    "GradientError",
]


class GradientError(RuntimeError):
    """Raised on misuse of the tape (non-scalar loss, repeated backward)."""


# ---------------------------------------------------------------- accounting

class _AllocCounter:
    def __init__(self):
        self.live = 0
        self.peak = 0

    def track(self, obj, nbytes: int):
        self.live += nbytes
        if self.live > self.peak:
            self.peak = self.live
        weakref.finalize(obj, self._release, nbytes)

    def _release(self, nbytes: int):
        self.live -= nbytes


_ALLOC = _AllocCounter()


def peak_alloc_bytes() -> int:
    """High-water mark of live tensor bytes since the last :func:`reset_peak`."""
    return _ALLOC.peak


def live_bytes() -> int:
    return _ALLOC.live


def reset_peak():
    """Start a new measurement window.

    The peak restarts from the bytes currently alive, so a reset with no
    tensors alive reports 0.
    """
    _ALLOC.peak = _ALLOC.live


@contextlib.contextmanager
def single_threaded():
    """Pin BLAS to one thread so results are bit-reproducible."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


# ---------------------------------------------------------------- tensor

class Tensor:
    """Dense float64 or complex128 array, optionally recorded on a tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if np.iscomplexobj(arr):
            arr = arr.astype(np.complex128, copy=False)
        else:
            arr = arr.astype(np.float64, copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self._tape = None
        _ALLOC.track(self, arr.nbytes)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_complex(self) -> bool:
        return self.data.dtype == np.complex128

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- tape

class _Node:
    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is already
    topologically sorted; :meth:`backward` walks it once in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._done = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, kind, inputs, output, backward_fn):
        output._node = len(self.nodes)
        output._tape = self
        output.requires_grad = True
        self.nodes.append(_Node(kind, inputs, output, backward_fn))

    def backward(self, loss: Tensor) -> dict:
        """Propagate ``d loss`` to every leaf with ``requires_grad``.

        Returns ``{leaf_tensor: gradient_array}``; the gradient is also
        stored on ``leaf.grad``.  An empty dict means the loss does not
        depend on any trainable leaf.
        """
        if self._done:
            raise GradientError("backward already called on this tape; use a fresh Tape")
        if loss.data.size != 1:
            raise GradientError(f"loss must be a scalar, got shape {loss.shape}")
        self._done = True
        if loss._tape is not self:
            self.nodes = []
            return {}

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            in_grads = node.backward_fn(g_out)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp._tape is not self:
                    leaves[id(inp)] = inp
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g

        # outputs point back at the tape; dropping the nodes breaks the cycle
        # so intermediates are freed (and uncounted) without waiting for gc
        self.nodes = []
        out = {}
        for key, leaf in leaves.items():
            g = grads[key]
            _ALLOC.track(g, g.nbytes)
            leaf.grad = g
            out[leaf] = g
        return out


def backward(loss: Tensor) -> dict:
    """Run backward on the tape that produced ``loss``."""
    if loss.data.size != 1:
        raise GradientError(f"loss must be a scalar, got shape {loss.shape}")
    if loss._tape is None:
        return {}
    return loss._tape.backward(loss)


def _record(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward_fn: Callable) -> Tensor:
    out = Tensor(out_data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        _ACTIVE[-1].record(kind, list(inputs), out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _real_if_needed(g: np.ndarray, like: Tensor) -> np.ndarray:
    return g if like.is_complex else g.real


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return (_real_if_needed(_unbroadcast(g, a.shape), a),
                _real_if_needed(_unbroadcast(g, b.shape), b))

    return _record("add", (a, b), a.data + b.data, bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return (_real_if_needed(_unbroadcast(g, a.shape), a),
                _real_if_needed(_unbroadcast(-g, b.shape), b))

    return _record("sub", (a, b), a.data - b.data, bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return (_real_if_needed(_unbroadcast(g * np.conj(b.data), a.shape), a),
                _real_if_needed(_unbroadcast(g * np.conj(a.data), b.shape), b))

    return _record("mul", (a, b), a.data * b.data, bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.is_complex or b.is_complex:
        raise TypeError("div supports real tensors only")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _record("div", (a, b), out, bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a real Python scalar."""
    a = _as_tensor(a)
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def pow_(a, p: float) -> Tensor:
    a = _as_tensor(a)
    out = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return _record("pow", (a,), out, bw)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _record("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), out, bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axes, keepdims), 1.0 / count)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(np.conj(b.data), -1, -2))
        gb = np.matmul(np.swapaxes(np.conj(a.data), -1, -2), g)
        return (_real_if_needed(_unbroadcast(ga, a.shape), a),
                _real_if_needed(_unbroadcast(gb, b.shape), b))

    return _record("matmul", (a, b), out, bw)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = _as_tensor(a)
    return _record("transpose", (a,), np.swapaxes(a.data, -1, -2),
                   lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _record("concat", ts, out, bw)


def take(a, start: int, stop: int, axis: int) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    a = _as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[sl] = g
        return (full,)

    return _record("take", (a,), a.data[sl], bw)


# ---------------------------------------------------------------- normalization

def layer_norm(x, axes, eps: float = 1e-5) -> Tensor:
    """``(x - mean) / sqrt(var + eps)`` with statistics shared over ``axes``.

    No learnable scale or shift.
    """
    x = _as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    if not axes:
        raise ValueError("layer_norm needs at least one axis")
    m = int(np.prod([x.shape[ax] for ax in axes]))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        g_mean = g.sum(axis=axes, keepdims=True) / m
        gy_mean = (g * y).sum(axis=axes, keepdims=True) / m
        return (inv * (g - g_mean - y * gy_mean),)

    return _record("layer_norm", (x,), y, bw)


# ---------------------------------------------------------------- Fourier

def _check_grid_layout(x: Tensor):
    if x.ndim < 3:
        raise ValueError(f"expected (..., n1, n2, channels) layout, got shape {x.shape}")


def rfft2(x) -> Tensor:
    """Unnormalized real 2-D DFT over axes (-3, -2), per channel.

    Input ``(..., n1, n2, c)``; output ``(..., n1, n2 // 2 + 1, c)`` complex.
    """
    x = _as_tensor(x)
    _check_grid_layout(x)
    if x.is_complex:
        raise TypeError("rfft2 expects a real tensor")
    n1, n2 = x.shape[-3], x.shape[-2]
    out = sfft.rfft2(x.data, axes=(-3, -2))

    def bw(g):
        full = np.zeros(x.shape, dtype=np.complex128)
        full[..., : g.shape[-2], :] = g
        return ((sfft.ifft2(full, axes=(-3, -2)).real * (n1 * n2)),)

    return _record("rfft2", (x,), out, bw)


def _hermitian_weights(n2: int) -> np.ndarray:
    h = n2 // 2 + 1
    w = np.full(h, 2.0)
    w[0] = 1.0
    if n2 % 2 == 0:
        w[-1] = 1.0
    return w


def irfft2(X, n2: int) -> Tensor:
    """Inverse of :func:`rfft2`, normalized by ``1 / (n1 * n2)``; real output."""
    X = _as_tensor(X)
    _check_grid_layout(X)
    n1 = X.shape[-3]
    if X.shape[-2] != n2 // 2 + 1:
        raise ValueError(
            f"half-spectrum width {X.shape[-2]} inconsistent with n2={n2} "
            f"(expected {n2 // 2 + 1})")
    out = sfft.irfft2(X.data, s=(n1, n2), axes=(-3, -2))
    w = _hermitian_weights(n2)[:, None]

    def bw(g):
        spec = sfft.rfft2(g, axes=(-3, -2)) * (w / (n1 * n2))
        return (spec,)

    return _record("irfft2", (X,), out, bw)


def retained_rows(n1: int, m1: int) -> np.ndarray:
    """Rows of the full ``k1`` axis with ``|k1| < m1`` (at most ``n1`` rows).

    Non-negative frequencies come first, then the negative ones.
    """
    if not 1 <= m1 <= n1 // 2 + 1:
        raise ValueError(f"mode cutoff m1={m1} outside [1, {n1 // 2 + 1}]")
    count = min(2 * m1 - 1, n1)
    pos = (count + 1) // 2
    neg = count // 2
    return np.concatenate([np.arange(pos), np.arange(n1 - neg, n1)]).astype(np.intp)


def mode_rows(n1: int, m1: int) -> int:
    return len(retained_rows(n1, m1))


def spectral_mul(X, R) -> Tensor:
    """Multiply retained low modes of a half spectrum by ``R``, zero the rest.

    ``X`` is ``(..., n1, h, c)`` and ``R`` is ``(r, m2, c)`` where ``r`` is the
    number of rows with ``|k1| < m1`` (see :func:`retained_rows`).  Row ``i`` of
    ``R`` acts on ``retained_rows(n1, m1)[i]``, column ``s`` on ``k2 = s``.
    Channels never mix.
    """
    X, R = _as_tensor(X), _as_tensor(R)
    n1, h = X.shape[-3], X.shape[-2]
    r, m2, c = R.shape
    if m2 > h:
        raise ValueError(f"m2={m2} exceeds half-spectrum width {h}")
    if c != X.shape[-1]:
        raise ValueError(f"channel mismatch: spectrum has {X.shape[-1]}, R has {c}")
    m1 = (r + 1) // 2 if r < n1 else n1 // 2 + 1
    rows = retained_rows(n1, m1)
    if len(rows) != r:
        raise ValueError(f"R has {r} rows; no mode cutoff on an n1={n1} axis gives that count")
    Xr = X.data[..., rows, :m2, :]
    out = np.zeros(np.broadcast_shapes(X.shape, X.shape[:-3] + (n1, h, c)), dtype=np.complex128)
    out[..., rows, :m2, :] = Xr * R.data

    def bw(g):
        gr = g[..., rows, :m2, :]
        gX = np.zeros(X.shape, dtype=np.complex128)
        gX[..., rows, :m2, :] = gr * np.conj(R.data)
        gR = gr * np.conj(Xr)
        gR = gR.reshape((-1,) + R.shape).sum(axis=0)
        return (gX, gR)

    return _record("spectral_mul", (X, R), out, bw)


def parameters_bytes(params: Iterable[Tensor]) -> int:
    return sum(p.data.nbytes for p in params)

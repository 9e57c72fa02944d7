"""Reverse-mode automatic differentiation over numpy arrays.

A minimal engine sized for the small convolutional models in this package.
``Tensor`` wraps an ndarray; every operation records the vector-Jacobian
products needed to backpropagate, and ``Tensor.backward`` walks the graph
once in reverse topological order. Broadcasting follows numpy; ``matmul``
is restricted to 2-D operands.

Structured ops used by the models live here too: im2col framing for 1-D
convolutions, zero/circular padding, zero-stuffing upsampling, row gather
with scatter-add backward, run-length column repetition, and an STFT
magnitude whose forward pass is bit-identical to the plain numpy spectral
path in :mod:`pptts.features`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

MAG_GRAD_EPS = 1e-12  # guards d|X|/dX at zero magnitude (backward only)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()
        self._op = ""

    # -- basic introspection -------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- graph construction and backward -------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of ``self`` into every reachable parameter."""
        if not self.requires_grad:
            raise ValueError("backward on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward without grad requires a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen = {id(self)}
        stack = [(self, iter(self._parents))]
        while stack:
            node, parents = stack[-1]
            advanced = False
            for p in parents:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                order.append(node)
                stack.pop()
        self._accumulate(np.asarray(grad))
        for node in reversed(order):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if parent.requires_grad:
                    parent._accumulate(vjp(g))

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # Copy: vjps may hand back views aliasing other grads.
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other):
        other = self._coerce(other)
        return _make(
            self.data + other.data,
            [
                (self, lambda g: _unbroadcast(g, self.data.shape)),
                (other, lambda g: _unbroadcast(g, other.data.shape)),
            ],
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        return _make(
            self.data - other.data,
            [
                (self, lambda g: _unbroadcast(g, self.data.shape)),
                (other, lambda g: _unbroadcast(-g, other.data.shape)),
            ],
            "sub",
        )

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        other = self._coerce(other)
        return _make(
            self.data * other.data,
            [
                (self, lambda g: _unbroadcast(g * other.data, self.data.shape)),
                (other, lambda g: _unbroadcast(g * self.data, other.data.shape)),
            ],
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        return _make(
            self.data / other.data,
            [
                (self, lambda g: _unbroadcast(g / other.data, self.data.shape)),
                (
                    other,
                    lambda g: _unbroadcast(
                        -g * self.data / np.square(other.data), other.data.shape
                    ),
                ),
            ],
            "div",
        )

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __neg__(self):
        return _make(-self.data, [(self, lambda g: -g)], "neg")

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = self.data**exponent
        return _make(
            out,
            [(self, lambda g: g * exponent * self.data ** (exponent - 1))],
            "pow",
        )

    def __matmul__(self, other):
        other = self._coerce(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError("matmul supports 2-D operands only")
        a, b = self.data, other.data
        return _make(
            a @ b,
            [(self, lambda g: g @ b.T), (other, lambda g: a.T @ g)],
            "matmul",
        )

    # -- elementwise functions ---------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return _make(out, [(self, lambda g: g * out)], "exp")

    def log(self):
        return _make(
            np.log(self.data), [(self, lambda g: g / self.data)], "log"
        )

    def sqrt(self):
        out = np.sqrt(self.data)
        return _make(out, [(self, lambda g: g / (2.0 * out))], "sqrt")

    def tanh(self):
        out = np.tanh(self.data)
        return _make(out, [(self, lambda g: g * (1.0 - np.square(out)))], "tanh")

    def sigmoid(self):
        out = 1.0 / (1.0 + np.exp(-self.data))
        return _make(out, [(self, lambda g: g * out * (1.0 - out))], "sigmoid")

    def relu(self):
        mask = self.data > 0
        return _make(
            np.where(mask, self.data, 0.0).astype(self.data.dtype),
            [(self, lambda g: g * mask)],
            "relu",
        )

    def abs(self):
        return _make(
            np.abs(self.data), [(self, lambda g: g * np.sign(self.data))], "abs"
        )

    def clamp(self, min_value=None, max_value=None):
        """Clip values; gradient passes where min <= x <= max (inclusive)."""
        out = np.clip(self.data, min_value, max_value)
        mask = np.ones(self.data.shape, dtype=bool)
        if min_value is not None:
            mask &= self.data >= min_value
        if max_value is not None:
            mask &= self.data <= max_value
        return _make(out, [(self, lambda g: g * mask)], "clamp")

    # -- reductions and shape ------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g: np.ndarray) -> np.ndarray:
            if axis is None:
                return np.broadcast_to(g, self.data.shape)
            gg = g
            if not keepdims:
                gg = np.expand_dims(g, axis)
            return np.broadcast_to(gg, self.data.shape)

        return _make(out, [(self, vjp)], "sum")

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _make(
            self.data.reshape(shape),
            [(self, lambda g: g.reshape(self.data.shape))],
            "reshape",
        )

    def t(self):
        """2-D transpose."""
        if self.data.ndim != 2:
            raise ValueError("t() requires a 2-D tensor")
        return _make(self.data.T, [(self, lambda g: g.T)], "t")

    def __getitem__(self, key):
        if isinstance(key, (np.ndarray, list)):
            raise TypeError("use take_rows for integer-array indexing")
        if isinstance(key, tuple) and any(
            isinstance(k, (np.ndarray, list)) for k in key
        ):
            raise TypeError("use take_rows for integer-array indexing")
        out = self.data[key]

        def vjp(g: np.ndarray) -> np.ndarray:
            gx = np.zeros_like(self.data)
            gx[key] += g
            return gx

        return _make(out, [(self, vjp)], "getitem")


def _make(data, parent_vjps, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled:
        live = [(p, f) for p, f in parent_vjps if p.requires_grad]
        if live:
            out.requires_grad = True
            out._parents = tuple(p for p, _ in live)
            out._vjps = tuple(f for _, f in live)
            out._op = op
    return out


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value) if dtype is None else np.asarray(value, dtype=dtype)
    return Tensor(arr)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an axis; backward slices the gradient apart."""
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    parent_vjps = []
    for i, t in enumerate(tensors):
        lo, hi = int(offsets[i]), int(offsets[i + 1])

        def vjp(g: np.ndarray, lo=lo, hi=hi) -> np.ndarray:
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        parent_vjps.append((t, vjp))
    return _make(data, parent_vjps, "concat")


def take_rows(x: Tensor, ids: np.ndarray) -> Tensor:
    """Gather ``x[ids]`` along the leading axis; scatter-add backward."""
    ids = np.asarray(ids)
    if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("ids must be a 1-D integer array")
    out = x.data[ids]

    def vjp(g: np.ndarray) -> np.ndarray:
        gx = np.zeros_like(x.data)
        np.add.at(gx, ids, g)
        return gx

    return _make(out, [(x, vjp)], "take_rows")


def repeat_cols(x: Tensor, repeats: np.ndarray) -> Tensor:
    """Repeat each column of a [C, N] tensor by its count (>= 0)."""
    repeats = np.asarray(repeats, dtype=np.int64)
    if x.data.ndim != 2 or repeats.shape != (x.data.shape[1],):
        raise ValueError("repeat_cols needs a 2-D tensor and per-column counts")
    col_ids = np.repeat(np.arange(x.data.shape[1]), repeats)
    out = x.data[:, col_ids]

    def vjp(g: np.ndarray) -> np.ndarray:
        gx = np.zeros_like(x.data)
        np.add.at(gx.T, col_ids, g.T)
        return gx

    return _make(out, [(x, vjp)], "repeat_cols")


def pad_cols(x: Tensor, left: int, right: int, mode: str = "zeros") -> Tensor:
    """Pad the time axis of a [C, T] tensor with zeros or circularly."""
    if x.data.ndim != 2:
        raise ValueError("pad_cols requires a 2-D tensor")
    if min(left, right) < 0:
        raise ValueError("pad sizes must be >= 0")
    width = x.data.shape[1]
    if mode == "zeros":
        out = np.pad(x.data, ((0, 0), (left, right)))

        def vjp(g: np.ndarray) -> np.ndarray:
            return g[:, left : left + width]

    elif mode == "circular":
        if left > width or right > width:
            raise ValueError("circular pad wider than the tensor")
        out = np.pad(x.data, ((0, 0), (left, right)), mode="wrap")

        def vjp(g: np.ndarray) -> np.ndarray:
            core = np.array(g[:, left : left + width], copy=True)
            if left:
                core[:, width - left :] += g[:, :left]
            if right:
                core[:, :right] += g[:, left + width :]
            return core

    else:
        raise ValueError(f"unknown pad mode {mode!r}")
    return _make(out, [(x, vjp)], "pad_cols")


def frame_cols(x: Tensor, kernel: int, stride: int = 1) -> Tensor:
    """im2col for 1-D convolution over a [C, T] tensor.

    Output is [C * kernel, T_out] with column t holding the flattened
    window x[:, t*stride : t*stride + kernel].
    """
    channels, width = x.data.shape
    count = (width - kernel) // stride + 1
    if count < 1:
        raise ValueError(f"input width {width} shorter than kernel {kernel}")
    s0, s1 = x.data.strides
    windows = np.lib.stride_tricks.as_strided(
        x.data, shape=(channels, count, kernel), strides=(s0, s1 * stride, s1)
    )
    out = np.ascontiguousarray(windows.transpose(0, 2, 1)).reshape(
        channels * kernel, count
    )

    def vjp(g: np.ndarray) -> np.ndarray:
        g3 = g.reshape(channels, kernel, count)
        gx = np.zeros_like(x.data)
        for j in range(kernel):
            gx[:, j : j + stride * (count - 1) + 1 : stride] += g3[:, j, :]
        return gx

    return _make(out, [(x, vjp)], "frame_cols")


def frame_rows(x: Tensor, frame_length: int, hop: int) -> Tensor:
    """Slice a 1-D tensor into overlapping [frames, frame_length] rows."""
    if x.data.ndim != 1:
        raise ValueError("frame_rows requires a 1-D tensor")
    count = (x.data.shape[0] - frame_length) // hop + 1
    if count < 1:
        raise ValueError("signal shorter than one frame")
    stride = x.data.strides[0]
    frames = np.lib.stride_tricks.as_strided(
        x.data, shape=(count, frame_length), strides=(hop * stride, stride)
    )
    out = np.ascontiguousarray(frames)

    def vjp(g: np.ndarray) -> np.ndarray:
        gx = np.zeros_like(x.data)
        for t in range(count):
            gx[t * hop : t * hop + frame_length] += g[t]
        return gx

    return _make(out, [(x, vjp)], "frame_rows")


def upsample_cols(x: Tensor, factor: int) -> Tensor:
    """Zero-stuff the time axis of a [C, T] tensor by an integer factor."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    channels, width = x.data.shape
    out = np.zeros((channels, width * factor), dtype=x.data.dtype)
    out[:, ::factor] = x.data

    def vjp(g: np.ndarray) -> np.ndarray:
        return g[:, ::factor]

    return _make(out, [(x, vjp)], "upsample_cols")


def stft_mag(frames: Tensor) -> Tensor:
    """Magnitude rFFT of windowed [T, n_fft] frames.

    Forward is ``np.abs(np.fft.rfft(...))`` on the raw data, so it matches
    the plain numpy spectral path bit for bit at whatever precision numpy
    picks for the input dtype. The backward pass is the exact adjoint of
    |rfft| away from zero magnitude, with a small guard where the magnitude
    vanishes.
    """
    if frames.data.ndim != 2:
        raise ValueError("stft_mag requires [frames, n_fft] input")
    n = frames.data.shape[1]
    spectrum = np.fft.rfft(frames.data, axis=1)
    mag64 = np.abs(spectrum)
    out = mag64.astype(frames.data.dtype)
    weights = np.full(n // 2 + 1, 0.5)
    weights[0] = 1.0
    if n % 2 == 0:
        weights[-1] = 1.0

    def vjp(g: np.ndarray) -> np.ndarray:
        scale = g / np.maximum(mag64, MAG_GRAD_EPS)
        adjoint = scale * spectrum.real + 1j * (scale * spectrum.imag)
        grad = np.fft.irfft(adjoint * weights, n=n, axis=1) * n
        return grad.astype(frames.data.dtype)

    return _make(out, [(frames, vjp)], "stft_mag")

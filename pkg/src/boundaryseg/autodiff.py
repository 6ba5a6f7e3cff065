"""Dense float64 tensors and a tape-based reverse-mode differentiation engine.

Operations record themselves on the innermost active :class:`Tape` whenever at
least one input requires a gradient. Outside a tape every op is a plain numpy
forward computation, which is what evaluation and prediction use.

Example
-------
>>> x = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
>>> w = Tensor(np.full((1, 1, 1, 1), 2.0), requires_grad=True)
>>> with Tape() as tape:
...     y = sum_all(conv2d(x, w))
>>> tape.backward(y)
>>> float(w.grad.sum())
9.0
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "Node",
    "Tape",
    "ParameterStore",
    "record",
    "conv2d",
    "relu",
    "sigmoid",
    "add",
    "scale",
    "eltwise_mul",
    "expand_channels",
    "concat_channels",
    "resize_bilinear",
    "global_avg_pool",
    "sum_all",
    "mean_all",
    "instance_norm",
]


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or gradient contains NaN or Inf."""


class Tensor:
    """A dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)  # always a private contiguous copy
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    """One recorded operation: its inputs, output and backward rule.

    ``backward`` maps the output gradient to a tuple of input gradients
    (``None`` for inputs that need none).
    """

    kind: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


_TAPES: list = []


class Tape:
    """Ordered record of the operations executed inside a ``with`` block."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
        """Propagate d(loss)/d(.) through every recorded node.

        Gradients are accumulated into ``.grad`` of every tensor that requires
        one, leaves included (so parameter gradients add up across calls
        until they are zeroed).
        """
        if grad is None:
            if loss.size != 1:
                raise ValueError("backward() without an explicit grad needs a scalar loss")
            grad = np.ones_like(loss.data)
        if not np.isfinite(loss.data).all():
            raise NonFiniteError("non-finite loss value")
        _accumulate(loss, np.asarray(grad, dtype=np.float64))
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is not None and inp.requires_grad:
                    if not np.isfinite(ig).all():
                        raise NonFiniteError(f"non-finite gradient from '{node.kind}' backward")
                    _accumulate(inp, ig)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        raise ValueError(f"gradient shape {g.shape} does not match value shape {t.data.shape}")
    # gradients are never mutated in place, so aliasing g is safe
    t.grad = g if t.grad is None else t.grad + g


def record(kind: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap a forward result and, if a tape is active, log its backward rule.

    Custom differentiable functions (the losses, for instance) are built on
    this the same way the primitives below are.
    """
    needs = any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs and bool(_TAPES))
    if result.requires_grad:
        _TAPES[-1].nodes.append(Node(kind, tuple(inputs), result, backward))
    return result


# ---------------------------------------------------------------------------
# convolution


def _conv_out(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _pad_channel_major(x: np.ndarray, padding: int) -> np.ndarray:
    """``[N,C,H,W]`` -> zero-padded ``[C,N,H+2p,W+2p]``."""
    n, c, h, w = x.shape
    out = np.zeros((c, n, h + 2 * padding, w + 2 * padding))
    out[:, :, padding:padding + h, padding:padding + w] = x.transpose(1, 0, 2, 3)
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Columns ``[C*kh*kw, N*Ho*Wo]`` from a channel-major padded input ``[C,N,Hp,Wp]``."""
    c, n = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        hs = i * dilation
        for j in range(kw):
            ws = j * dilation
            cols[:, i, j] = xp[:, :, hs:hs + stride * (ho - 1) + 1:stride, ws:ws + stride * (wo - 1) + 1:stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(dcols: np.ndarray, xp_shape: tuple, kh: int, kw: int, stride: int, dilation: int,
            ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`; returns a channel-major ``[C,N,Hp,Wp]`` array."""
    c, n = xp_shape[:2]
    dcols = dcols.reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros(xp_shape)
    for i in range(kh):
        hs = i * dilation
        for j in range(kw):
            ws = j * dilation
            dxp[:, :, hs:hs + stride * (ho - 1) + 1:stride, ws:ws + stride * (wo - 1) + 1:stride] += dcols[:, i, j]
    return dxp


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation with zero padding.

    ``x`` is ``[N, C, H, W]``, ``kernel`` is ``[K, C, kh, kw]`` and ``bias`` is
    ``[K]``. The output is ``[N, K, H', W']`` with
    ``H' = (H + 2*padding - dilation*(kh-1) - 1) // stride + 1``.
    """
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("stride and dilation must be >= 1 and padding >= 0")
    xd, wd = x.data, kernel.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError(f"conv2d expects 4D input and kernel, got {xd.shape} and {wd.shape}")
    n, c, h, w = xd.shape
    k, kc, kh, kw = wd.shape
    if kc != c:
        raise ValueError(f"input has {c} channels but kernel expects {kc}")
    if bias is not None and bias.shape != (k,):
        raise ValueError(f"bias shape {bias.shape} does not match {k} output channels")
    ho = _conv_out(h, kh, stride, dilation, padding)
    wo = _conv_out(w, kw, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty for input {xd.shape} and kernel {wd.shape}")

    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    full = dilation * (kh - 1)
    padded_shape = (c, n, h + 2 * padding, w + 2 * padding)
    if pointwise:
        cols = xd.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    else:
        cols = _im2col(_pad_channel_major(xd, padding), kh, kw, stride, dilation, ho, wo)
    w2 = wd.reshape(k, -1)
    out = (w2 @ cols).reshape(k, n, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(k, -1)
        dw = (g2 @ cols.T).reshape(wd.shape) if kernel.requires_grad else None
        db = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        dx = None
        if x.requires_grad:
            if pointwise:
                dx = (w2.T @ g2).reshape(c, n, h, w)
            elif stride == 1 and kh == kw and padding <= full:
                # stride-1 input gradient is a correlation of the padded output
                # gradient with the flipped, channel-swapped kernel
                gcols = _im2col(_pad_channel_major(g, full - padding), kh, kw, 1, dilation, h, w)
                wflip = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
                dx = (wflip @ gcols).reshape(c, n, h, w)
            else:
                dx = _col2im(w2.T @ g2, padded_shape, kh, kw, stride, dilation, ho, wo)
                dx = dx[:, :, padding:padding + h, padding:padding + w]
            dx = np.ascontiguousarray(dx.transpose(1, 0, 2, 3))
        return (dx, dw, db) if bias is not None else (dx, dw)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return record("conv2d", out, inputs, backward)


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function evaluated through exp(-|v|) so it never overflows."""
    v = x.data
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a Python constant (not differentiated)."""
    factor = float(factor)
    return record("scale", a.data * factor, (a,), lambda g: (g * factor,))


def eltwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "eltwise_mul")
    ad, bd = a.data, b.data
    return record("eltwise_mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def expand_channels(x: Tensor, channels: int) -> Tensor:
    """Repeat a single-channel ``[N,1,H,W]`` map across ``channels``."""
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expand_channels needs a [N,1,H,W] tensor, got {x.shape}")
    out = np.repeat(x.data, channels, axis=1)
    return record("expand_channels", out, (x,), lambda g: (g.sum(axis=1, keepdims=True),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels expects 4D tensors")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ValueError(f"concat_channels: spatial/batch mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return record("concat_channels", out, (a, b),
                  lambda g: (np.ascontiguousarray(g[:, :ca]), np.ascontiguousarray(g[:, ca:])))


# ---------------------------------------------------------------------------
# resampling and pooling


def interp_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Linear interpolation weights ``[out_size, in_size]`` with half-pixel centers.

    Source coordinate of output ``i`` is ``(i + 0.5) * in/out - 0.5``, clamped
    to ``[0, in-1]`` (the align_corners=False convention).
    """
    m = np.zeros((out_size, in_size))
    ratio = in_size / out_size
    for i in range(out_size):
        src = min(max((i + 0.5) * ratio - 0.5, 0.0), in_size - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError("resize target must be at least 1x1")
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return record("resize_bilinear", x.data.copy(), (x,), lambda g: (g,))
    rh = interp_matrix(h, out_h)
    rw = interp_matrix(w, out_w)
    out = np.matmul(np.matmul(rh, x.data), rw.T)
    return record("resize_bilinear", out, (x,), lambda g: (np.matmul(np.matmul(rh.T, g), rw),))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H and W, keeping them as size-1 axes."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return record("global_avg_pool", out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


def sum_all(x: Tensor) -> Tensor:
    return record("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return record("mean", np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))


# ---------------------------------------------------------------------------
# normalization


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize every (sample, channel) plane, then apply per-channel scale/shift."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"instance_norm: scale/shift must have shape ({c},)")
    xd = x.data
    hw = xd.shape[2] * xd.shape[3]
    xc = xd - xd.mean(axis=(2, 3), keepdims=True)
    var = np.einsum("nchw,nchw->nc", xc, xc)[:, :, None, None] / hw
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data[None, :, None, None]
    out = xhat * gd
    out += beta.data[None, :, None, None]

    def backward(g):
        gx = np.einsum("nchw,nchw->nc", g, xhat)
        dgamma = gx.sum(axis=0)
        dbeta = g.sum(axis=(0, 2, 3))
        # d(xhat) = g * gamma; fold gamma into the per-plane coefficients
        m1 = g.mean(axis=(2, 3), keepdims=True)
        m2 = gx[:, :, None, None] / hw
        dx = g - m1
        dx -= xhat * m2
        dx *= inv * gd
        return dx, dgamma, dbeta

    return record("instance_norm", out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Named, insertion-ordered collection of trainable tensors."""

    def __init__(self) -> None:
        self._entries: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name '{name}'")
        t = Tensor(value, requires_grad=True)
        t.zero_grad()
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"missing parameter '{name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list:
        return list(self._entries)

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.zero_grad()

    def num_values(self) -> int:
        return sum(t.size for t in self._entries.values())

    def copy(self) -> "ParameterStore":
        new = ParameterStore()
        for name, t in self._entries.items():
            new.add(name, t.data)
        return new

    def equals(self, other: "ParameterStore") -> bool:
        """Bit-exact comparison of names, order, shapes and values."""
        if self.names() != other.names():
            return False
        return all(np.array_equal(t.data, other[name].data) for name, t in self._entries.items())

"""Minimal dense tensor with tape-based reverse-mode differentiation.

Only the operations the counting network needs are provided: same-padded
dilated convolution, ReLU, channel concatenation, elementwise add/sub/mul/abs,
and full reductions.  Layout is (batch, channels, height, width) for
activations and (out, in, kh, kw) for kernels.

Usage::

    with GradTape() as tape:
        y = relu(conv2d(x, w, b, spec))
        loss = mean(y)
    gw, gb = tape.gradient(loss, [w, b])
"""

from dataclasses import dataclass, field

import numpy as np

from amdcn import kernels


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Immutable dense array.

    ``data`` is a read-only numpy array; its shape is the tensor's shape.  Tensors
    created with ``requires_grad=True`` are leaves that a :class:`GradTape` can
    differentiate with respect to.
    """

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, copy=True):
        arr = np.array(data, dtype=dtype, copy=copy) if copy else np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        return cls(arr, requires_grad=requires_grad, copy=False)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __abs__(self):
        return abs_(self)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one same-padded dilated convolution."""

    in_channels: int
    out_channels: int
    kernel_size: tuple = (3, 3)
    dilation: int = 1

    def __post_init__(self):
        ks = tuple(int(k) for k in self.kernel_size)
        object.__setattr__(self, "kernel_size", ks)
        if len(ks) != 2 or any(k < 1 for k in ks):
            raise ValueError(f"kernel_size must be two positive ints, got {self.kernel_size}")
        if any(k % 2 == 0 for k in ks):
            raise ValueError(f"kernel_size must be odd for symmetric same-padding, got {ks}")
        if int(self.dilation) < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if int(self.in_channels) < 1 or int(self.out_channels) < 1:
            raise ValueError("channel counts must be positive")

    @property
    def padding(self):
        return tuple(self.dilation * (k - 1) // 2 for k in self.kernel_size)

    @property
    def kernel_shape(self):
        return (self.out_channels, self.in_channels) + self.kernel_size

    @property
    def num_params(self):
        kh, kw = self.kernel_size
        return kh * kw * self.in_channels * self.out_channels + self.out_channels


# ---------------------------------------------------------------------------
# tape


@dataclass
class TapeEntry:
    name: str
    inputs: tuple
    output: Tensor
    backward: object  # grad_out -> tuple of grads aligned with inputs (None = no grad)


_active_tapes = []


@dataclass
class GradTape:
    """Records operations executed inside its ``with`` block."""

    entries: list = field(default_factory=list)

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def gradient(self, target, sources, grad_target=None):
        """Adjoints of ``target`` w.r.t. each tensor in ``sources``.

        Entries are replayed once each, newest first.  Sources the target does not
        depend on get zero gradients.
        """
        if grad_target is None:
            if target.size != 1:
                raise ShapeError("gradient of a non-scalar target needs an explicit grad_target")
            grad_target = np.ones(target.shape, dtype=target.dtype)
        adj = {id(target): np.asarray(grad_target, dtype=target.dtype)}
        for entry in reversed(self.entries):
            g = adj.pop(id(entry.output), None)
            if g is None:
                continue
            grads = entry.backward(g)
            for inp, gi in zip(entry.inputs, grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                adj[key] = adj[key] + gi if key in adj else gi
        return [adj.get(id(s), np.zeros(s.shape, dtype=s.dtype)) for s in sources]


def _record(name, inputs, out_arr, backward):
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor._wrap(out_arr, requires_grad=needs)
    if needs:
        for tape in _active_tapes:
            tape.entries.append(TapeEntry(name, tuple(inputs), out, backward))
    return out


def _as_operand(v):
    if isinstance(v, Tensor):
        return v
    if np.isscalar(v):
        return float(v)
    raise TypeError(f"expected Tensor or scalar, got {type(v).__name__}")


def _val(v):
    return v.data if isinstance(v, Tensor) else v


def _check_broadcast(a, b, op):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape and a.size != 1 and b.size != 1:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ; only equal shapes or scalars allowed")


def _unbroadcast(g, operand):
    if not isinstance(operand, Tensor):
        return None
    if g.shape == operand.shape:
        return g
    return np.full(operand.shape, g.sum(), dtype=g.dtype)


# ---------------------------------------------------------------------------
# elementwise / reductions


def add(a, b):
    a, b = _as_operand(a), _as_operand(b)
    _check_broadcast(a, b, "add")
    out = np.asarray(_val(a) + _val(b))
    return _record("add", (a, b), out, lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b):
    a, b = _as_operand(a), _as_operand(b)
    _check_broadcast(a, b, "sub")
    out = np.asarray(_val(a) - _val(b))
    return _record("sub", (a, b), out, lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b):
    a, b = _as_operand(a), _as_operand(b)
    _check_broadcast(a, b, "mul")
    av, bv = _val(a), _val(b)
    out = np.asarray(av * bv)

    def backward(g):
        ga = _unbroadcast(g * bv, a) if isinstance(a, Tensor) else None
        gb = _unbroadcast(g * av, b) if isinstance(b, Tensor) else None
        return ga, gb

    return _record("mul", (a, b), out, backward)


def abs_(a):
    x = a.data
    return _record("abs", (a,), np.abs(x), lambda g: (g * np.sign(x),))


def reduce_sum(a):
    x = a.data
    return _record("sum", (a,), np.asarray(x.sum()), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def mean(a):
    return mul(reduce_sum(a), 1.0 / a.size)


def relu(a):
    x = a.data
    mask = x > 0

    def backward(g):
        return (np.where(mask, g, 0.0).astype(x.dtype, copy=False),)

    # np.maximum keeps NaN so a diverged layer is not silently zeroed
    return _record("relu", (a,), np.maximum(x, 0.0).astype(x.dtype, copy=False), backward)


def relu_backward(grad_out, saved_input):
    g = np.asarray(grad_out)
    return np.where(np.asarray(saved_input) > 0, g, 0.0).astype(g.dtype, copy=False)


def concat_channels(inputs):
    inputs = list(inputs)
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    ref = inputs[0].shape
    for k, t in enumerate(inputs):
        if t.data.ndim != 4:
            raise ShapeError(f"concat_channels: input {k} is not 4-D (shape {t.shape})")
        for axis, label in ((0, "batch"), (2, "height"), (3, "width")):
            if t.shape[axis] != ref[axis]:
                raise ShapeError(
                    f"concat_channels: input {k} {label} {t.shape[axis]} != {ref[axis]}"
                )
    if len(inputs) == 1:
        out = inputs[0].data.copy()
    else:
        out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def backward(g):
        return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(inputs)))

    return _record("concat", tuple(inputs), out, backward)


# ---------------------------------------------------------------------------
# convolution


def _check_conv(x_shape, k_shape, spec):
    if len(x_shape) != 4:
        raise ShapeError(f"conv2d: input must be 4-D [B,C,H,W], got {x_shape}")
    if tuple(k_shape) != spec.kernel_shape:
        names = ("out_channels", "in_channels", "kernel height", "kernel width")
        for name, got, want in zip(names, k_shape, spec.kernel_shape):
            if got != want:
                raise ShapeError(f"conv2d: kernel {name} is {got}, spec expects {want}")
        raise ShapeError(f"conv2d: kernel shape {k_shape} != {spec.kernel_shape}")
    if x_shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d: input channels {x_shape[1]} != spec in_channels {spec.in_channels}")


def conv2d(x, kernel, bias, spec):
    """Same-padded dilated convolution ``[B,Cin,H,W] -> [B,Cout,H,W]``."""
    _check_conv(x.shape, kernel.shape, spec)
    if bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({spec.out_channels},)")
    xv, wv = x.data, kernel.data
    out = kernels.conv2d_forward(xv, wv, bias.data, spec.dilation)

    def backward(g):
        gx = kernels.conv2d_backward_input(g, wv, spec.dilation) if x.requires_grad else None
        gw = kernels.conv2d_backward_kernel(g, xv, wv.shape, spec.dilation) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    return _record("conv2d", (x, kernel, bias), out, backward)


def conv2d_backward(grad_out, saved_input, kernel, spec):
    """Adjoints ``(grad_input, grad_kernel, grad_bias)`` of :func:`conv2d`."""
    g = _val(grad_out)
    xv = _val(saved_input)
    wv = _val(kernel)
    _check_conv(xv.shape, wv.shape, spec)
    expected = (xv.shape[0], spec.out_channels) + tuple(xv.shape[2:])
    if tuple(g.shape) != expected:
        raise ShapeError(f"conv2d_backward: grad_out shape {g.shape} != forward output {expected}")
    gx = kernels.conv2d_backward_input(g, wv, spec.dilation)
    gw = kernels.conv2d_backward_kernel(g, xv, wv.shape, spec.dilation)
    return gx, gw, g.sum(axis=(0, 2, 3))

"""Dense tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. While a :class:`Record` is active,
every operation touching a tracked tensor appends a node holding its inputs,
its output and a vector-Jacobian rule. :func:`backward` walks the nodes in
reverse execution order and sums partials into each input.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when operand shapes do not conform."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        if np.isscalar(other):
            return rsub_scalar(float(other), self)
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if np.isscalar(value):
        return Tensor(np.full(like.shape, value, dtype=like.dtype))
    return Tensor(np.asarray(value, dtype=like.dtype))


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


# --- computation record ---------------------------------------------------


class Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Record:
    """Ordered list of executed primitive operations."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Record":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        assert stack and stack[-1] is self
        stack.pop()


_local = threading.local()


def _stack() -> list[Record]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _active() -> Record | None:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_record():
    """Suspend recording; operations inside produce untracked tensors."""
    stack = _stack()
    saved = stack[:]
    stack.clear()
    try:
        yield
    finally:
        stack[:] = saved


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp: Callable) -> Tensor:
    out = Tensor(out_data)
    rec = _active()
    if rec is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        rec.nodes.append(Node(op, tuple(inputs), out, vjp))
    return out


def backward(record: Record, output: Tensor, seed=None, wrt: Iterable[Tensor] | None = None):
    """Propagate ``seed`` from ``output`` back through ``record``.

    Returns a list of gradients aligned with ``wrt`` (zeros for tensors that
    no recorded path reaches). With ``wrt=None`` a dict keyed by ``id`` of
    every tracked tensor is returned instead.
    """
    if len(record) == 0:
        raise ValueError("empty computation record")
    if seed is None:
        seed = np.ones_like(output.data)
    seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=output.dtype)
    if seed.shape != output.shape:
        raise DimensionError(f"seed shape {seed.shape} does not match output shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): seed.copy()}
    # partials may alias each other (add returns g twice), so only buffers
    # created here are ever accumulated into in place
    owned: set[int] = set()
    for node in reversed(record.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        partials = node.vjp(g)
        for inp, p in zip(node.inputs, partials):
            if p is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in grads:
                grads[key] = p
            elif key in owned:
                grads[key] += p
            else:
                grads[key] = grads[key] + p
                owned.add(key)
    if wrt is None:
        return grads
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


# --- elementwise ------------------------------------------------------------


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def add_n(*terms: Tensor) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def rsub_scalar(c: float, a: Tensor) -> Tensor:
    return _emit("rsub", (a,), c - a.data, lambda g: (-g,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free and gives exactly 0.5 at zero
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0).astype(x.dtype), lambda g: (g * mask,))


def identity(x: Tensor) -> Tensor:
    return x


ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "identity": identity}


def apply_activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None
    return fn(x)


def activation_derivative(kind: str, x: np.ndarray) -> np.ndarray:
    """Elementwise derivative of an activation evaluated at ``x``."""
    if kind == "sigmoid":
        s = _sigmoid(x)
        return s * (1.0 - s)
    if kind == "tanh":
        return 1.0 - np.tanh(x) ** 2
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    if kind == "identity":
        return np.ones_like(x)
    raise ValueError(f"unknown activation {kind!r}")


# --- linear algebra / reshaping ----------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``weight @ x + bias`` for a vector ``x``."""
    if x.data.ndim != 1 or weight.data.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise DimensionError(f"dense: weight {weight.shape} incompatible with input {x.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = wd @ xd
    if bias is None:
        return _emit("matvec", (x, weight), out, lambda g: (wd.T @ g, np.outer(g, xd)))
    out = out + bias.data
    return _emit("dense", (x, weight, bias), out, lambda g: (wd.T @ g, np.outer(g, xd), g))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    src = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.size,))


# --- convolution ------------------------------------------------------------


def _split_pad(pad: int) -> tuple[int, int]:
    return pad // 2, pad - pad // 2


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + pad - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of shape (c, oh, ow, kh, kw)."""
    return sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]


def _col2im(cols: np.ndarray, out_hw: tuple[int, int], stride: int) -> np.ndarray:
    """Scatter-add (c, kh, kw, oh, ow) patch contributions onto a (c, H, W) canvas."""
    c, kh, kw, oh, ow = cols.shape
    canvas = np.zeros((c,) + tuple(out_hw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            canvas[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += cols[:, i, j]
    return canvas


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of a c×h×w map with f×c×kh×kw kernels.

    ``pad`` is the total number of zero rows (and columns) added, split
    floor/ceil before/after.
    """
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise DimensionError(f"conv2d: expected c×h×w input and f×c×kh×kw kernels, got {x.shape} and {kernels.shape}")
    c, h, w = x.shape
    f, kc, kh, kw = kernels.shape
    if kc != c:
        raise DimensionError(f"conv2d: kernels {kernels.shape} expect {kc} channels, input {x.shape} has {c}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if kh > h + pad or kw > w + pad:
        raise DimensionError(f"conv2d: kernel {kh}×{kw} exceeds padded input {h + pad}×{w + pad}")
    if bias is not None and bias.shape != (f,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match {f} filters")
    before, after = _split_pad(pad)
    xp = np.pad(x.data, ((0, 0), (before, after), (before, after))) if pad else x.data
    win = _windows(xp, kh, kw, stride)
    oh, ow = win.shape[1], win.shape[2]
    wd = kernels.data
    out = np.tensordot(wd, win, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out += bias.data[:, None, None]
    padded_hw = xp.shape[1:]

    def vjp(g):
        gw = np.tensordot(g, win, axes=([1, 2], [1, 2]))
        cols = np.tensordot(wd, g, axes=([0], [0]))  # (c, kh, kw, oh, ow)
        gxp = _col2im(cols, padded_hw, stride)
        gx = gxp[:, before:before + h, before:before + w]
        gb = g.sum(axis=(1, 2)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, kernels, bias) if bias is not None else (x, kernels)
    return _emit("conv2d", inputs, out, vjp)


def transposed_conv2d(x: Tensor, kernels: Tensor, stride: int, target_hw: tuple[int, int] | None = None) -> Tensor:
    """Adjoint of :func:`conv2d` (zero padding) followed by a centred crop.

    ``kernels`` has shape cin×cout×kh×kw, i.e. the layout of the forward
    convolution mapping cout channels to cin.
    """
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise DimensionError(f"transposed_conv2d: bad ranks {x.shape}, {kernels.shape}")
    cin, h, w = x.shape
    kc, cout, kh, kw = kernels.shape
    if kc != cin:
        raise DimensionError(f"transposed_conv2d: kernels {kernels.shape} expect {kc} channels, input {x.shape} has {cin}")
    raw_h, raw_w = (h - 1) * stride + kh, (w - 1) * stride + kw
    th, tw = target_hw if target_hw is not None else (raw_h, raw_w)
    if th > raw_h or tw > raw_w:
        raise DimensionError(f"transposed_conv2d: target {th}×{tw} exceeds upsampled extent {raw_h}×{raw_w}")
    top, left = (raw_h - th) // 2, (raw_w - tw) // 2
    wd, xd = kernels.data, x.data
    cols = np.tensordot(wd, xd, axes=([0], [0]))  # (cout, kh, kw, h, w)
    full = _col2im(cols, (raw_h, raw_w), stride)
    out = np.ascontiguousarray(full[:, top:top + th, left:left + tw])

    def vjp(g):
        gfull = np.zeros((cout, raw_h, raw_w), dtype=g.dtype)
        gfull[:, top:top + th, left:left + tw] = g
        win = _windows(gfull, kh, kw, stride)  # (cout, h, w, kh, kw)
        gx = np.tensordot(wd, win, axes=([1, 2, 3], [0, 3, 4]))
        gw = np.tensordot(xd, win, axes=([1, 2], [1, 2]))
        return gx, gw

    return _emit("transposed_conv2d", (x, kernels), out, vjp)


def _maxpool_backward(g: np.ndarray, arg: np.ndarray, in_shape, k: int, stride: int) -> np.ndarray:
    c, oh, ow = g.shape
    gx = np.zeros(in_shape, dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            hit = arg == i * k + j
            gx[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += g * hit
    return gx


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Channelwise window maximum; ties send the gradient to the first element in row-major order."""
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ValueError("maxpool2d: window and stride must be >= 1")
    if x.data.ndim != 3:
        raise DimensionError(f"maxpool2d: expected c×h×w input, got {x.shape}")
    c, h, w = x.shape
    if k > h or k > w:
        raise DimensionError(f"maxpool2d: window {k}×{k} exceeds input {h}×{w}")
    win = _windows(x.data, k, k, stride)
    oh, ow = win.shape[1], win.shape[2]
    flat = win.reshape(c, oh, ow, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    shape = x.shape
    return _emit("maxpool2d", (x,), out, lambda g: (_maxpool_backward(g, arg, shape, k, stride),))


# --- initialisers -----------------------------------------------------------


def bilinear_kernel(size: int, stride: int) -> np.ndarray:
    """size×size interpolation weights for upsampling by ``stride``.

    Taps are ``max(0, 1 - |i - centre| / stride)`` around the kernel centre so
    that the stride-phase sums are exactly one whenever ``size >= 2*stride - 1``
    (constant maps stay constant away from the borders).
    """
    centre = (size - 1) / 2.0
    taps = np.maximum(0.0, 1.0 - np.abs(np.arange(size) - centre) / stride)
    return np.outer(taps, taps)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def orthogonal(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(q[:rows, :cols], dtype=dtype)

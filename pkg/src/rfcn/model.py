"""Layer specifications, the built-in architectures, shape inference and windowed forward.

An architecture is a flat list of layers. Layers before the recurrent layer
run on every frame of a window with shared weights; the recurrent layer
threads its state across the frames; the remaining layers run once on its
final output.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .recurrent import ConvGruParams, GruParams, unroll
from .tensor import DimensionError, Tensor


class ArchitectureError(ValueError):
    """Inconsistent layer chain or malformed architecture file."""


# --- layer specs ----------------------------------------------------------------


@dataclass(frozen=True)
class Layer:
    inside_recurrent_node: bool = field(default=True, kw_only=True)
    note: str = field(default="", kw_only=True, compare=False)

    recurrent = False

    def describe(self) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class Conv(Layer):
    F: int
    S: int = 1
    P: int = 0
    D: int | None = None

    def describe(self):
        parts = [f"F({self.F})"]
        if self.S != 1:
            parts.append(f"S({self.S})")
        if self.P:
            parts.append(f"P({self.P})")
        if self.D is not None:
            parts.append(f"D({self.D})")
        return "Conv: " + ", ".join(parts)


@dataclass(frozen=True)
class Relu(Layer):
    def describe(self):
        return "Relu"


@dataclass(frozen=True)
class Sigmoid(Layer):
    def describe(self):
        return "Sigmoid"


@dataclass(frozen=True)
class Pool(Layer):
    k: int
    stride: int | None = None

    def describe(self):
        s = "" if self.stride in (None, self.k) else f", S({self.stride})"
        return f"Pool {self.k}×{self.k}{s}"


@dataclass(frozen=True)
class Deconv(Layer):
    F: int
    S: int
    D: int | None = None

    def describe(self):
        d = f", D({self.D})" if self.D is not None else ""
        return f"DeConv: F({self.F}), S({self.S}){d}"


@dataclass(frozen=True)
class Flatten(Layer):
    def describe(self):
        return "Flatten"


@dataclass(frozen=True)
class Unflatten(Layer):
    C: int
    H: int
    W: int

    def describe(self):
        return f"Unflatten: {self.C}×{self.H}×{self.W}"


@dataclass(frozen=True)
class Dense(Layer):
    out: int

    def describe(self):
        return f"Dense: {self.out}"


@dataclass(frozen=True)
class Gru(Layer):
    hidden: int

    recurrent = True

    def describe(self):
        return f"GRU: W({self.hidden}×{self.hidden})"


@dataclass(frozen=True)
class ConvGru(Layer):
    F: int
    D: int

    recurrent = True

    def describe(self):
        return f"ConvGRU: F({self.F}), D({self.D})"


@dataclass
class ArchitectureSpec:
    name: str
    input_hw: tuple[int, int]
    layers: list[Layer]
    window: int = 3
    in_channels: int = 1

    def __post_init__(self):
        rec = [i for i, layer in enumerate(self.layers) if layer.recurrent]
        if len(rec) > 1:
            raise ArchitectureError(f"{self.name}: at most one recurrent layer allowed, found {len(rec)}")
        if self.window < 1:
            raise ArchitectureError("window length must be >= 1")

    @property
    def recurrent_index(self) -> int | None:
        for i, layer in enumerate(self.layers):
            if layer.recurrent:
                return i
        return None

    @property
    def is_recurrent(self) -> bool:
        return self.recurrent_index is not None

    def without_recurrent(self, name: str | None = None) -> "ArchitectureSpec":
        layers = [layer for layer in self.layers if not layer.recurrent]
        return replace(self, name=name or self.name, layers=layers)


# --- presets --------------------------------------------------------------------

PRESETS = ("rfc-lenet", "rfc-12s", "rfc-vgg", "fc-lenet", "fc-12s", "fc-vgg")


def _width(d: int, scale: float) -> int:
    return d if d == 1 else max(1, int(round(d * scale)))


def _coarse_for(target: int, F: int, S: int) -> int:
    """Smallest map extent that a stride-S, size-F deconvolution lifts to ``target``."""
    return max(1, math.ceil((target - F) / S) + 1)


def _lenet(scale: float) -> ArchitectureSpec:
    h = w = max(1, int(round(28 * scale)))
    fix = "P(2) added so the DeConv reaches the input size"
    layers = [
        Conv(5, P=10, D=_width(20, scale)), Relu(), Pool(2),
        Conv(5, D=_width(50, scale)), Relu(), Pool(2),
        Conv(3, P=2, D=_width(500, scale), note=fix), Relu(),
        Conv(1, D=1),
        Deconv(10, 4),
        Flatten(),
        Gru(h * w),
        Unflatten(1, h, w, inside_recurrent_node=False, note="readout head"),
        Conv(1, D=1, inside_recurrent_node=False, note="readout head: per-pixel gain and offset"),
        Sigmoid(inside_recurrent_node=False, note="probability output"),
    ]
    return ArchitectureSpec("rfc-lenet", (h, w), layers)


def _twelve_s(scale: float) -> ArchitectureSpec:
    h, w = max(1, int(round(120 * scale))), max(1, int(round(180 * scale)))
    hidden = _width(100, scale)
    ch, cw = _coarse_for(h, 10, 4), _coarse_for(w, 10, 4)
    post = dict(inside_recurrent_node=False)
    layers = [
        Conv(5, S=3, P=10, D=_width(20, scale)), Relu(), Pool(2),
        Conv(5, D=_width(50, scale)), Relu(), Pool(2),
        Conv(3, P=2, D=_width(500, scale), note="P(2) added, as in RFC-Lenet"),
        Relu(),
        Conv(1, D=1),
        Flatten(),
        Dense(hidden, note="projects the flattened coarse map to the GRU width"),
        Gru(hidden),
        Dense(ch * cw, **post, note="maps the GRU state to a coarse map the DeConv can lift"),
        Unflatten(1, ch, cw, **post),
        Deconv(10, 4, **post),
        Sigmoid(**post, note="probability output"),
    ]
    return ArchitectureSpec("rfc-12s", (h, w), layers)


def _vgg(scale: float) -> ArchitectureSpec:
    h, w = max(1, int(round(240 * scale))), max(1, int(round(360 * scale)))
    d = lambda n: _width(n, scale)  # noqa: E731
    post = dict(inside_recurrent_node=False)
    same = "P(2) so the 3×3 conv keeps its size and the DeConv reaches the input size"
    layers = [
        Conv(11, S=4, P=40, D=d(64)), Relu(), Pool(3, 2, note="VGG-F pooling stride 2"),
        Conv(5, P=2, D=d(256)), Relu(), Pool(3, 1, note="stride 1 keeps an 8× coarse map"),
        Conv(3, P=2, D=d(256), note=same), Relu(),
        Conv(3, P=2, D=d(256), note=same), Relu(),
        Conv(3, P=2, D=d(256), note=same), Relu(),
        Conv(3, P=2, D=d(512), note=same),
        Conv(3, P=2, D=d(128), note=same),
        ConvGru(3, d(128)),
        Conv(1, D=1, **post),
        Deconv(20, 8, **post),
        Sigmoid(**post, note="probability output"),
    ]
    return ArchitectureSpec("rfc-vgg", (h, w), layers)


_BUILDERS = {"lenet": _lenet, "12s": _twelve_s, "vgg": _vgg}


def build_preset(name: str, scale: float = 1.0, window: int = 3) -> ArchitectureSpec:
    """One of the six built-in architectures; ``fc-*`` drop the recurrent layer."""
    key = name.lower()
    if key not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")
    if not 0 < scale <= 1:
        raise ValueError("scale must lie in (0, 1]")
    kind, base = key.split("-", 1)
    spec = _BUILDERS[base](scale)
    spec.window = window
    if kind == "fc":
        spec = spec.without_recurrent()
    spec.name = key if scale == 1 else f"{key}@{scale:g}"
    infer_shapes(spec)
    return spec


# --- shape inference ----------------------------------------------------------------


@dataclass
class ShapeRow:
    index: int
    layer: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    params: int
    note: str = ""


def _layer_shape(layer: Layer, shape: tuple[int, ...], target_hw: tuple[int, int]) -> tuple[tuple[int, ...], int, str]:
    """Output shape, parameter count and an annotation for one layer."""
    extra = ""
    if isinstance(layer, (Conv, Pool, Deconv, ConvGru, Unflatten)) and not isinstance(layer, Unflatten):
        if len(shape) != 3:
            raise ArchitectureError(f"expects a c×h×w map, got {shape}")
    if isinstance(layer, Conv):
        c, h, w = shape
        if layer.F > h + layer.P or layer.F > w + layer.P:
            raise ArchitectureError(f"kernel F({layer.F}) exceeds padded input {h + layer.P}×{w + layer.P}")
        f = c if layer.D is None else layer.D
        out = (f, T.conv_output_size(h, layer.F, layer.S, layer.P), T.conv_output_size(w, layer.F, layer.S, layer.P))
        return out, f * c * layer.F * layer.F + f, extra
    if isinstance(layer, Pool):
        c, h, w = shape
        s = layer.stride or layer.k
        if layer.k > h or layer.k > w:
            raise ArchitectureError(f"pool window {layer.k} exceeds input {h}×{w}")
        return (c, (h - layer.k) // s + 1, (w - layer.k) // s + 1), 0, extra
    if isinstance(layer, Deconv):
        c, h, w = shape
        f = c if layer.D is None else layer.D
        raw = ((h - 1) * layer.S + layer.F, (w - 1) * layer.S + layer.F)
        th, tw = target_hw
        if raw[0] < th or raw[1] < tw:
            raise ArchitectureError(f"upsampled extent {raw[0]}×{raw[1]} is smaller than the target {th}×{tw}")
        extra = f"raw {raw[0]}×{raw[1]}, crop top {(raw[0] - th) // 2} left {(raw[1] - tw) // 2}"
        return (f, th, tw), c * f * layer.F * layer.F, extra
    if isinstance(layer, (Relu, Sigmoid)):
        return shape, 0, extra
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),), 0, extra
    if isinstance(layer, Unflatten):
        if int(np.prod(shape)) != layer.C * layer.H * layer.W:
            raise ArchitectureError(f"cannot view {shape} as {layer.C}×{layer.H}×{layer.W}")
        return (layer.C, layer.H, layer.W), 0, extra
    if isinstance(layer, Dense):
        if len(shape) != 1:
            raise ArchitectureError(f"Dense expects a vector, got {shape}")
        return (layer.out,), layer.out * shape[0] + layer.out, extra
    if isinstance(layer, Gru):
        if len(shape) != 1:
            raise ArchitectureError(f"GRU expects a vector, got {shape}")
        n, m = layer.hidden, shape[0]
        return (n,), 3 * (n * n + n * m + n), extra
    if isinstance(layer, ConvGru):
        c, h, w = shape
        if layer.F % 2 == 0:
            raise ArchitectureError(f"ConvGRU kernel F({layer.F}) must be odd")
        k2 = layer.F * layer.F
        return (layer.D, h, w), 3 * (layer.D * layer.D * k2 + layer.D * c * k2 + layer.D), extra
    raise ArchitectureError(f"unsupported layer {layer!r}")


def infer_shapes(spec: ArchitectureSpec) -> list[ShapeRow]:
    """Every intermediate shape; raises naming the first inconsistent layer."""
    shape: tuple[int, ...] = (spec.in_channels,) + tuple(spec.input_hw)
    rows = []
    for i, layer in enumerate(spec.layers):
        try:
            out, n, extra = _layer_shape(layer, shape, spec.input_hw)
        except ArchitectureError as err:
            raise ArchitectureError(f"{spec.name}: layer {i} ({layer.describe()}) with input {shape}: {err}") from None
        note = "; ".join(s for s in (layer.note, extra) if s)
        rows.append(ShapeRow(i, layer.describe(), shape, out, n, note))
        shape = out
    return rows


def check_dense_prediction(spec: ArchitectureSpec) -> None:
    rows = infer_shapes(spec)
    final = rows[-1].out_shape if rows else (spec.in_channels,) + tuple(spec.input_hw)
    if final != (1,) + tuple(spec.input_hw):
        raise ArchitectureError(f"{spec.name}: final shape {final} is not 1×{spec.input_hw[0]}×{spec.input_hw[1]}")


def format_shape_table(spec: ArchitectureSpec) -> str:
    rows = infer_shapes(spec)
    fmt = lambda s: "×".join(str(v) for v in s)  # noqa: E731
    lines = [f"# {spec.name}  input {spec.in_channels}×{spec.input_hw[0]}×{spec.input_hw[1]}  window L={spec.window}"]
    lines.append(f"{'#':>3}  {'node':<4}  {'layer':<28} {'in':>14} {'out':>14} {'params':>10}  note")
    for r in rows:
        node = "rec" if spec.layers[r.index].inside_recurrent_node else "post"
        lines.append(f"{r.index:>3}  {node:<4}  {r.layer:<28} {fmt(r.in_shape):>14} {fmt(r.out_shape):>14} {r.params:>10}  {r.note}")
    total = sum(r.params for r in rows)
    lines.append(f"total parameters: {total}")
    return "\n".join(lines)


# --- architecture files --------------------------------------------------------------

_LAYER_KEYS = {
    "conv": (Conv, {"F", "S", "P", "D"}, {"F"}),
    "pool": (Pool, {"K", "S"}, {"K"}),
    "deconv": (Deconv, {"F", "S", "D"}, {"F", "S"}),
    "dense": (Dense, {"OUT"}, {"OUT"}),
    "gru": (Gru, {"W"}, {"W"}),
    "convgru": (ConvGru, {"F", "D"}, {"F", "D"}),
    "unflatten": (Unflatten, {"C", "H", "W"}, {"C", "H", "W"}),
    "relu": (Relu, set(), set()),
    "sigmoid": (Sigmoid, set(), set()),
    "flatten": (Flatten, set(), set()),
}


def parse_architecture(text: str, name: str = "custom") -> ArchitectureSpec:
    """Parse the one-layer-per-line notation, e.g. ``conv F=5 S=3 P=10 D=20``.

    Header lines ``name``, ``input H=.. W=.. [C=..]`` and ``window L=..`` are
    optional; ``@recurrent-node-begin`` / ``@recurrent-node-end`` delimit the
    per-frame part. Keys are case-insensitive and unknown keys are rejected.
    """
    layers: list[Layer] = []
    input_hw, channels, window = None, 1, 3
    inside = True
    saw_marker = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        head = words[0].lower()
        try:
            if head == "@recurrent-node-begin":
                inside, saw_marker = True, True
                continue
            if head == "@recurrent-node-end":
                inside, saw_marker = False, True
                continue
            if head == "name":
                name = " ".join(words[1:])
                continue
            args = _parse_kv(words[1:])
            if head == "input":
                _check_keys(args, {"H", "W", "C"}, {"H", "W"})
                input_hw, channels = (args["H"], args["W"]), args.get("C", 1)
                continue
            if head == "window":
                _check_keys(args, {"L"}, {"L"})
                window = args["L"]
                continue
            if head not in _LAYER_KEYS:
                raise ArchitectureError(f"unknown layer {words[0]!r}")
            cls, allowed, required = _LAYER_KEYS[head]
            _check_keys(args, allowed, required)
            flag = dict(inside_recurrent_node=inside)
            if cls is Conv:
                layer = Conv(args["F"], args.get("S", 1), args.get("P", 0), args.get("D"), **flag)
            elif cls is Pool:
                layer = Pool(args["K"], args.get("S"), **flag)
            elif cls is Deconv:
                layer = Deconv(args["F"], args["S"], args.get("D"), **flag)
            elif cls is Dense:
                layer = Dense(args["OUT"], **flag)
            elif cls is Gru:
                layer = Gru(args["W"], **flag)
            elif cls is ConvGru:
                layer = ConvGru(args["F"], args["D"], **flag)
            elif cls is Unflatten:
                layer = Unflatten(args["C"], args["H"], args["W"], **flag)
            else:
                layer = cls(**flag)
            layers.append(layer)
        except ArchitectureError as err:
            raise ArchitectureError(f"line {lineno}: {err}") from None
    if input_hw is None:
        raise ArchitectureError("missing 'input H=.. W=..' line")
    if not saw_marker:
        rec = next((i for i, layer in enumerate(layers) if layer.recurrent), None)
        if rec is not None:
            layers = [replace(layer, inside_recurrent_node=i <= rec) for i, layer in enumerate(layers)]
    spec = ArchitectureSpec(name, input_hw, layers, window, channels)
    return spec


def _parse_kv(words: Sequence[str]) -> dict[str, int]:
    args = {}
    for i, word in enumerate(words):
        m = re.fullmatch(r"([A-Za-z]+)=(\d+)", word)
        if m:
            args[m.group(1).upper()] = int(m.group(2))
        elif i == 0 and word.isdigit():
            args["K"] = int(word)  # "pool 2" shorthand
        else:
            raise ArchitectureError(f"cannot parse argument {word!r}")
    return args


def _check_keys(args, allowed, required):
    unknown = set(args) - allowed
    if unknown:
        raise ArchitectureError(f"unknown key(s) {', '.join(sorted(unknown))}")
    missing = required - set(args)
    if missing:
        raise ArchitectureError(f"missing key(s) {', '.join(sorted(missing))}")


def format_architecture(spec: ArchitectureSpec) -> str:
    """Inverse of :func:`parse_architecture`."""
    lines = [f"name {spec.name}", f"input H={spec.input_hw[0]} W={spec.input_hw[1]} C={spec.in_channels}",
             f"window L={spec.window}", "@recurrent-node-begin"]
    inside = True
    for layer in spec.layers:
        if inside and not layer.inside_recurrent_node:
            lines.append("@recurrent-node-end")
            inside = False
        if isinstance(layer, Conv):
            s = f"conv F={layer.F} S={layer.S} P={layer.P}" + (f" D={layer.D}" if layer.D is not None else "")
        elif isinstance(layer, Pool):
            s = f"pool K={layer.k}" + (f" S={layer.stride}" if layer.stride is not None else "")
        elif isinstance(layer, Deconv):
            s = f"deconv F={layer.F} S={layer.S}" + (f" D={layer.D}" if layer.D is not None else "")
        elif isinstance(layer, Dense):
            s = f"dense OUT={layer.out}"
        elif isinstance(layer, Gru):
            s = f"gru W={layer.hidden}"
        elif isinstance(layer, ConvGru):
            s = f"convgru F={layer.F} D={layer.D}"
        elif isinstance(layer, Unflatten):
            s = f"unflatten C={layer.C} H={layer.H} W={layer.W}"
        else:
            s = type(layer).__name__.lower()
        lines.append(s)
    if inside:
        lines.append("@recurrent-node-end")
    return "\n".join(lines) + "\n"


# --- instantiated model -----------------------------------------------------------------


READOUT_GAIN = 6.0
MAP_GRU_UPDATE_BIAS = 2.0  # update gate starts near 0.88, mostly the new frame


class Model:
    """Parameters for every layer of an :class:`ArchitectureSpec`.

    ``params`` maps names such as ``"03.conv.weight"`` to tensors; it is the
    registry the optimiser and checkpoints use.
    """

    def __init__(self, spec: ArchitectureSpec, seed: int = 0, dtype=np.float64):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.shapes = infer_shapes(spec)
        check_dense_prediction(spec)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.cell = None
        self.optimizer_state = None
        for row, layer in zip(self.shapes, spec.layers):
            self._init_layer(rng, row, layer)

    def _add(self, index: int, kind: str, slot: str, data) -> Tensor:
        name = f"{index:02d}.{kind}.{slot}"
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _init_layer(self, rng, row: ShapeRow, layer: Layer) -> None:
        i, shape = row.index, row.in_shape
        if isinstance(layer, Conv):
            c = shape[0]
            f = row.out_shape[0]
            k = layer.F
            w = self._add(i, "conv", "weight", T.glorot_uniform(rng, (f, c, k, k), c * k * k, f * k * k))
            self._add(i, "conv", "bias", np.zeros(f))
            if self._reads_gru_map(i) and (f, c, k) == (1, 1, 1):
                # tanh-bounded state: a unit gain would cap probabilities at sigmoid(±1)
                w.data[...] = READOUT_GAIN
        elif isinstance(layer, Deconv):
            c = shape[0]
            f = row.out_shape[0]
            w = np.zeros((c, f, layer.F, layer.F))
            bil = T.bilinear_kernel(layer.F, layer.S)
            for j in range(min(c, f)):
                w[j, j] = bil
            self._add(i, "deconv", "weight", w)
        elif isinstance(layer, Dense):
            n_in = shape[0]
            self._add(i, "dense", "weight", T.glorot_uniform(rng, (layer.out, n_in), n_in, layer.out))
            self._add(i, "dense", "bias", np.zeros(layer.out))
        elif isinstance(layer, Gru):
            cell = GruParams.init(rng, shape[0], layer.hidden, dtype=self.dtype)
            if shape[0] == layer.hidden:
                # a GRU over a flattened map starts as a per-pixel pass-through
                # of the current frame and learns its temporal mixing from zero
                cell.w_x.data[...] = np.eye(layer.hidden)
                for t in (cell.w_h, cell.w_hz, cell.w_hr):
                    t.data[...] = 0.0
                cell.b_z.data[...] = MAP_GRU_UPDATE_BIAS
            for slot, t in cell.named_tensors().items():
                t.name = f"{i:02d}.gru.{slot}"
                self.params[t.name] = t
            self.cell = cell
        elif isinstance(layer, ConvGru):
            cell = ConvGruParams.init(rng, shape[0], layer.D, layer.F, dtype=self.dtype)
            for slot, t in cell.named_tensors().items():
                t.name = f"{i:02d}.convgru.{slot}"
                self.params[t.name] = t
            self.cell = cell

    def _reads_gru_map(self, index: int) -> bool:
        layers = self.spec.layers
        return index >= 2 and isinstance(layers[index - 1], Unflatten) and isinstance(layers[index - 2], Gru)

    def layer_params(self, index: int) -> list[Tensor]:
        prefix = f"{index:02d}."
        return [t for n, t in self.params.items() if n.startswith(prefix)]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def apply_layer(self, index: int, x: Tensor) -> Tensor:
        layer = self.spec.layers[index]
        p = self.layer_params(index)
        if isinstance(layer, Conv):
            return T.conv2d(x, p[0], p[1], stride=layer.S, pad=layer.P)
        if isinstance(layer, Relu):
            return T.relu(x)
        if isinstance(layer, Sigmoid):
            return T.sigmoid(x)
        if isinstance(layer, Pool):
            return T.maxpool2d(x, layer.k, layer.stride)
        if isinstance(layer, Deconv):
            return T.transposed_conv2d(x, p[0], layer.S, target_hw=self.spec.input_hw)
        if isinstance(layer, Flatten):
            return T.flatten(x)
        if isinstance(layer, Unflatten):
            return T.reshape(x, (layer.C, layer.H, layer.W))
        if isinstance(layer, Dense):
            return T.dense(x, p[0], p[1])
        raise ArchitectureError(f"layer {index} ({layer.describe()}) is not a per-frame layer")

    def run_layers(self, x: Tensor, start: int, stop: int) -> Tensor:
        for i in range(start, stop):
            x = self.apply_layer(i, x)
        return x

    def frame_features(self, frame: Tensor) -> Tensor:
        """Output of the per-frame layers preceding the recurrent layer."""
        stop = self.spec.recurrent_index
        return self.run_layers(frame, 0, len(self.spec.layers) if stop is None else stop)

    def head(self, states: Sequence[Tensor]) -> Tensor:
        """Recurrent layer over per-frame features, then the remaining layers."""
        r = self.spec.recurrent_index
        _, last = unroll(self.cell, list(states))
        return self.run_layers(last, r + 1, len(self.spec.layers))


def _as_frame(frame, dtype, in_channels: int) -> Tensor:
    arr = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    if arr.ndim == 2:
        arr = arr[None]
    return Tensor(np.asarray(arr, dtype=dtype))


def forward_window(model: Model, window: Sequence, features: Sequence[Tensor] | None = None) -> Tensor:
    """Foreground probability map (1×H×W) for the last frame of ``window``.

    ``features`` may carry precomputed per-frame features (used by decoupled
    training, where they come from a frozen network).
    """
    spec = model.spec
    if len(window) != spec.window:
        raise DimensionError(f"window has {len(window)} frames, architecture expects L={spec.window}")
    frames = [_as_frame(f, model.dtype, spec.in_channels) for f in window]
    want = (spec.in_channels,) + tuple(spec.input_hw)
    for f in frames:
        if f.shape != want:
            raise DimensionError(f"frame shape {f.shape} does not match architecture input {want}")
    if not spec.is_recurrent:
        return model.run_layers(frames[-1], 0, len(spec.layers))
    feats = list(features) if features is not None else [model.frame_features(f) for f in frames]
    return model.head(feats)


def shared_layer_pairs(fc: ArchitectureSpec, rfc: ArchitectureSpec) -> list[tuple[int, int]]:
    """Index pairs (fc layer, rfc layer) for the layers the two chains share."""
    rfc_idx = [i for i, layer in enumerate(rfc.layers) if not layer.recurrent]
    if len(rfc_idx) != len(fc.layers):
        raise ArchitectureError(f"{fc.name} is not {rfc.name} without its recurrent layer")
    pairs = []
    for j, i in zip(range(len(fc.layers)), rfc_idx):
        a, b = fc.layers[j], rfc.layers[i]
        if replace(a, inside_recurrent_node=True) != replace(b, inside_recurrent_node=True):
            raise ArchitectureError(f"layer mismatch: {a.describe()} vs {b.describe()}")
        pairs.append((j, i))
    return pairs

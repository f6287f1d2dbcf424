"""Pixel-wise logistic loss, Adadelta, training loops and checkpoints."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import DatasetSplit, Window, all_windows
from .metrics import MetricsReport, aggregate, score
from .model import Conv, Model, build_preset, forward_window, shared_layer_pairs
from .tensor import DimensionError, Record, Tensor, backward, no_record

log = logging.getLogger(__name__)

MAX_EPOCHS = 500


# --- loss -----------------------------------------------------------------------


def logistic_loss(pred, target, eps_p: float = 1e-7) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient with respect to ``pred``.

    Probabilities are clamped to [eps_p, 1 - eps_p]; the gradient is the
    cross-entropy derivative evaluated at the clamped value.
    """
    p = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    y = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if np.squeeze(p).shape != np.squeeze(y).shape:
        raise DimensionError(f"prediction {p.shape} and target {y.shape} differ")
    y = y.reshape(p.shape)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("target must be binary")
    pc = np.clip(p, eps_p, 1.0 - eps_p)
    n = p.size
    loss = -float(np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)))
    grad = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n
    return loss, grad.astype(getattr(pred, "dtype", np.float64))


def loss_and_seed(record: Record, out: Tensor, target, eps_p: float = 1e-7):
    """Loss plus the (tensor, gradient) pair to start backpropagation from.

    When ``out`` is a recorded sigmoid the gradient enters at its input as
    ``(p - y) / n``: the exact logit derivative of the unclamped loss. Going
    through the sigmoid instead multiplies by ``p (1 - p)``, which underflows
    to zero once logits pass about -90 and leaves a saturated network stuck.
    """
    loss, grad = logistic_loss(out, target, eps_p)
    last = record.nodes[-1] if len(record) else None
    if last is not None and last.op == "sigmoid" and last.output is out:
        y = np.asarray(getattr(target, "data", target), dtype=np.float64).reshape(out.shape)
        return loss, last.inputs[0], ((out.data - y) / out.size).astype(out.dtype)
    return loss, out, grad


# --- Adadelta -----------------------------------------------------------------------


@dataclass
class AdadeltaState:
    rho: float = 0.95
    eps: float = 1e-6
    sq_grad: dict[str, np.ndarray] = field(default_factory=dict)
    sq_step: dict[str, np.ndarray] = field(default_factory=dict)

    def ensure(self, name: str, like: np.ndarray) -> None:
        if name not in self.sq_grad:
            self.sq_grad[name] = np.zeros_like(like)
            self.sq_step[name] = np.zeros_like(like)


def adadelta_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdadeltaState):
    """One in-place Adadelta step for every parameter that has a gradient."""
    rho, eps = state.rho, state.eps
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        state.ensure(name, p.data)
        eg2, edx2 = state.sq_grad[name], state.sq_step[name]
        # two scratch buffers, everything else in place
        tmp = np.multiply(g, g)
        tmp *= 1.0 - rho
        eg2 *= rho
        eg2 += tmp
        step = np.add(edx2, eps)
        np.sqrt(step, out=step)
        np.add(eg2, eps, out=tmp)
        np.sqrt(tmp, out=tmp)
        step /= tmp
        step *= g
        np.multiply(step, step, out=tmp)
        tmp *= 1.0 - rho
        edx2 *= rho
        edx2 += tmp
        p.data -= step
    return params, state


# --- training loops -------------------------------------------------------------------


@dataclass
class TrainConfig:
    max_epochs: int = MAX_EPOCHS
    window: int = 3
    seed: int = 0
    precision: int = 64
    mode: str = "end_to_end"  # or "decoupled"
    eps_p: float = 1e-7
    rho: float = 0.95
    eps: float = 1e-6
    freeze_prefix: int = 0  # leading conv layers left untrained
    eval_every: int = 1
    threshold: float = 0.5

    def __post_init__(self):
        if not 0 <= self.max_epochs <= MAX_EPOCHS:
            raise ValueError(f"max_epochs must lie in [0, {MAX_EPOCHS}]")
        if self.mode not in ("end_to_end", "decoupled"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if min(self.eps_p, self.rho, self.eps) <= 0 or self.window < 1 or self.eval_every < 1:
            raise ValueError("tolerances, window and eval_every must be positive")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


def frozen_prefix_names(model: Model, n_conv: int) -> set[str]:
    """Parameter names of the first ``n_conv`` convolution layers."""
    names, seen = set(), 0
    for i, layer in enumerate(model.spec.layers):
        if seen >= n_conv:
            break
        if isinstance(layer, Conv):
            names.update(t.name for t in model.layer_params(i))
            seen += 1
    return names


def evaluate(model: Model, windows: Sequence[Window], threshold: float = 0.5, eps_p: float = 1e-7, features=None):
    """Micro-aggregated metrics and mean loss over ``windows`` (no recording)."""
    reports, losses = [], []
    with no_record():
        for k, w in enumerate(windows):
            feats = features[k] if features is not None else None
            out = forward_window(model, w.frames, feats)
            losses.append(logistic_loss(out, w.target, eps_p)[0])
            reports.append(score(out, w.target, threshold))
    return aggregate(reports), float(np.mean(losses))


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _history_row(epoch, loss, train_report: MetricsReport | None, test_report: MetricsReport | None) -> dict:
    row = {"epoch": epoch, "loss": loss}
    for prefix, rep in (("", train_report), ("test_", test_report)):
        if rep is None:
            continue
        row.update({f"{prefix}precision": rep.precision, f"{prefix}recall": rep.recall,
                    f"{prefix}f_measure": rep.f_measure, f"{prefix}iou": rep.iou})
    return row


def _run(model: Model, dataset: DatasetSplit, config: TrainConfig, trainable: list[str],
         feature_fn=None, state: AdadeltaState | None = None, callback=None) -> list[dict]:
    if model.spec.window != config.window:
        raise ValueError(f"model window L={model.spec.window} differs from config window {config.window}")
    train_windows = all_windows(dataset.train, config.window)
    if not train_windows:
        raise ValueError("training split has no windows")
    test_windows = all_windows(dataset.test, config.window) if dataset.test else []
    state = state if state is not None else AdadeltaState(config.rho, config.eps)
    params = [model.params[n] for n in trainable]
    train_feats = [feature_fn(w) for w in train_windows] if feature_fn else None
    test_feats = [feature_fn(w) for w in test_windows] if feature_fn else None
    history = []
    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for k in _epoch_order(config.seed, epoch, len(train_windows)):
            w = train_windows[k]
            with Record() as rec:
                out = forward_window(model, w.frames, train_feats[k] if train_feats else None)
            loss, start, seed = loss_and_seed(rec, out, w.target, config.eps_p)
            grads = backward(rec, start, seed, wrt=params) if len(rec) else [np.zeros_like(p.data) for p in params]
            adadelta_update(model.params, dict(zip(trainable, grads)), state)
            losses.append(loss)
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        if epoch % config.eval_every == 0 or epoch == config.max_epochs:
            train_rep, _ = evaluate(model, train_windows, config.threshold, config.eps_p, train_feats)
            test_rep = evaluate(model, test_windows, config.threshold, config.eps_p, test_feats)[0] if test_windows else None
            row = _history_row(epoch, row["loss"], train_rep, test_rep)
        history.append(row)
        log.info("epoch %d loss %.6f", epoch, row["loss"])
        if callback is not None:
            callback(row)
    model.optimizer_state = state
    return history


def train(model: Model, dataset: DatasetSplit, config: TrainConfig, fc_model: Model | None = None,
          state: AdadeltaState | None = None, callback=None) -> list[dict]:
    """Online Adadelta training, one sliding window per update.

    With ``config.mode == "decoupled"`` this delegates to
    :func:`train_decoupled` and ``fc_model`` is required.
    """
    if config.mode == "decoupled":
        if fc_model is None:
            raise ValueError("decoupled training needs a trained fc model")
        return train_decoupled(fc_model, model, dataset, config, state=state, callback=callback)
    frozen = frozen_prefix_names(model, config.freeze_prefix)
    trainable = [n for n in model.params if n not in frozen]
    return _run(model, dataset, config, trainable, state=state, callback=callback)


def train_decoupled(fc_model: Model, model: Model, dataset: DatasetSplit, config: TrainConfig,
                    state: AdadeltaState | None = None, callback=None) -> list[dict]:
    """Train only the recurrent layer and what follows it on frozen fc features.

    Shared layers of ``model`` are first copied from ``fc_model``; the
    per-frame layers stay fixed and their outputs are computed without
    recording, so they receive no gradient.
    """
    spec = model.spec
    r = spec.recurrent_index
    if r is None:
        raise ValueError("decoupled training needs a recurrent model")
    pairs = shared_layer_pairs(fc_model.spec, spec)
    for j, i in pairs:
        for src, dst in zip(fc_model.layer_params(j), model.layer_params(i)):
            if src.shape != dst.shape:
                raise DimensionError(f"fc tensor {src.name} {src.shape} does not fit {dst.name} {dst.shape}")
            dst.data[...] = src.data
    with no_record():
        fc_in = (fc_model.spec.in_channels,) + tuple(fc_model.spec.input_hw)
        probe = fc_model.run_layers(Tensor(np.zeros(fc_in, dtype=fc_model.dtype)), 0, r)
    want = model.shapes[r].in_shape
    if probe.shape != want:
        raise DimensionError(f"fc output {probe.shape} does not match recurrent head input {want}")

    def features(w: Window):
        with no_record():
            return [
                Tensor(fc_model.run_layers(Tensor(np.asarray(f, dtype=fc_model.dtype)), 0, r).data.astype(model.dtype))
                for f in w.frames
            ]

    head = [n for n in model.params if int(n.split(".", 1)[0]) >= r]
    return _run(model, dataset, config, head, feature_fn=features, state=state, callback=callback)


# --- checkpoints -------------------------------------------------------------------------

MAGIC = b"RFCN"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


def _checkpoint_tensors(model: Model, state: AdadeltaState | None) -> list[tuple[str, np.ndarray]]:
    out = [(n, t.data) for n, t in model.params.items()]
    out.append(("meta.window", np.array(float(model.spec.window))))
    if state is not None:
        out.append(("adadelta.rho", np.array(state.rho)))
        out.append(("adadelta.eps", np.array(state.eps)))
        for n in state.sq_grad:
            out.append((f"adadelta.sq_grad/{n}", state.sq_grad[n]))
            out.append((f"adadelta.sq_step/{n}", state.sq_step[n]))
    return out


def save_checkpoint(model: Model, state: AdadeltaState | None, path) -> None:
    """Binary layout: magic, u32 version, preset name, u32 count, then per tensor
    name, u32 rank, u32 extents and little-endian float64 values."""
    tensors = _checkpoint_tensors(model, state)
    name = model.spec.name.encode()
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(name)), name, struct.pack("<I", len(tensors))]
    for tname, arr in tensors:
        b = tname.encode()
        chunks += [struct.pack("<I", len(b)), b, struct.pack("<I", arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape)]
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint while reading {what}", what)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    """Preset name and every stored tensor."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic", "magic")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", "version")
    name = r.take(r.u32("preset name length"), "preset name").decode()
    count = r.u32("tensor count")
    tensors = {}
    for k in range(count):
        tname = r.take(r.u32(f"tensor {k} name length"), f"tensor {k} name").decode()
        rank = r.u32(f"{tname} rank")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{tname} extents"))
        n = int(np.prod(shape)) if rank else 1
        tensors[tname] = np.frombuffer(r.take(8 * n, f"{tname} data"), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.raw):
        raise CheckpointError("trailing bytes after last tensor", "tensor count")
    return name, tensors


def _spec_from_name(name: str, window: int):
    base, _, scale = name.partition("@")
    return build_preset(base, float(scale) if scale else 1.0, window)


def load_checkpoint(path, model: Model | None = None, dtype=np.float64) -> tuple[Model, AdadeltaState | None]:
    """Restore parameters (and optimiser accumulators) from ``path``.

    Without ``model`` the architecture is rebuilt from the stored preset name.
    """
    name, tensors = read_checkpoint(path)
    window = int(tensors.get("meta.window", np.array(3.0)))
    if model is None:
        try:
            model = Model(_spec_from_name(name, window), dtype=dtype)
        except ValueError as err:
            raise CheckpointError(f"cannot rebuild architecture {name!r}: {err}", "preset name") from None
    for pname, t in model.params.items():
        if pname not in tensors:
            raise CheckpointError(f"checkpoint ({name}) has no tensor {pname} required by {model.spec.name}", pname)
        if tensors[pname].shape != t.shape:
            raise CheckpointError(
                f"shape disagreement for {pname}: checkpoint ({name}) {tensors[pname].shape}, "
                f"model ({model.spec.name}) {t.shape}", pname)
    extra = [n for n in tensors if not n.startswith(("meta.", "adadelta.")) and n not in model.params]
    if extra:
        raise CheckpointError(f"checkpoint ({name}) has tensor {extra[0]} unknown to {model.spec.name}", extra[0])
    if window != model.spec.window:
        raise CheckpointError(f"checkpoint window {window} differs from model window {model.spec.window}", "meta.window")
    for pname, t in model.params.items():
        t.data = tensors[pname].astype(model.dtype)
    state = None
    if "adadelta.rho" in tensors:
        state = AdadeltaState(float(tensors["adadelta.rho"]), float(tensors["adadelta.eps"]))
        for key, arr in tensors.items():
            if key.startswith("adadelta.sq_grad/"):
                pname = key.split("/", 1)[1]
                state.sq_grad[pname] = arr.astype(model.dtype)
                state.sq_step[pname] = tensors[f"adadelta.sq_step/{pname}"].astype(model.dtype)
    return model, state


def parameter_snapshot(model: Model, names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    keys = model.params if names is None else names
    return {n: model.params[n].data.copy() for n in keys}

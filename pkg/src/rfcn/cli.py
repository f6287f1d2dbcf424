"""Command-line entry point: ``rfcn synth|train|eval|predict|gradcheck|inspect``.

Every option can also come from a flat ``key = value`` file passed with
``--config``; flags override file values, file values override defaults.
The fully resolved options are written to ``config.txt`` in the output
directory, and that file alone reproduces the run.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or I/O
error (including a failed gradient check).

Random streams: synthesis uses ``seed`` directly (sequence i is drawn from
``seed * 1000 + i``); the split, the parameter initialisation and the
window order each use ``derive_seed(seed, label)``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .data import (
    SPLIT_POLICIES,
    DataError,
    MovingSpriteConfig,
    all_windows,
    load_dataset_dir,
    read_gray,
    save_sequence_dir,
    split,
    synthesize_dataset,
    write_gray,
)
from .model import PRESETS, ArchitectureError, ArchitectureSpec, Model, build_preset, forward_window, format_shape_table, parse_architecture
from .metrics import aggregate, score
from .tensor import DimensionError, no_record
from .training import CheckpointError, TrainConfig, evaluate, load_checkpoint, logistic_loss, save_checkpoint, train

log = logging.getLogger("rfcn")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
CONFIG_NAME = "config.txt"
STREAMS = {"split": 1, "init": 2, "order": 3}


class UsageError(Exception):
    """Bad flags, bad config file or inconsistent options (exit 1)."""


class RunError(Exception):
    """Failure while executing a well-formed command (exit 2)."""


def derive_seed(seed: int, label: str) -> int:
    """Independent 32-bit seed for the named random stream."""
    return int(np.random.SeedSequence([seed, STREAMS[label]]).generate_state(1)[0])


# --- options -------------------------------------------------------------------


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _names(text) -> list[str]:
    if isinstance(text, (list, tuple)):
        items = [str(t) for t in text]
    else:
        items = [str(text)]
    return [part.strip() for item in items for part in item.split(",") if part.strip()]


@dataclass(frozen=True)
class Opt:
    parse: Callable[[Any], Any]
    default: Any
    help: str
    flag: bool = False  # store_true on the command line
    many: bool = False  # accepts several values


OPTIONS: dict[str, Opt] = {
    "out": Opt(str, None, "output directory"),
    "seed": Opt(int, 0, "master random seed"),
    # synth
    "seqs": Opt(int, 4, "number of sequences"),
    "len": Opt(int, 20, "frames per sequence"),
    "height": Opt(int, 64, "canvas height"),
    "width": Opt(int, 64, "canvas width"),
    "sprites": Opt(int, 1, "sprites per sequence"),
    "vmin": Opt(int, 1, "smallest speed per axis (pixels/frame)"),
    "vmax": Opt(int, 3, "largest speed per axis (pixels/frame)"),
    "glyphs": Opt(str, None, "IDX file of glyph images (procedural shapes when absent)"),
    "tau": Opt(float, 0.5, "intensity threshold that defines the masks"),
    # model and training
    "data": Opt(str, None, "dataset directory"),
    "preset": Opt(str, "rfc-lenet", f"architecture preset ({', '.join(PRESETS)})"),
    "arch": Opt(str, None, "architecture description file (overrides --preset)"),
    "scale": Opt(float, 1.0, "input and width scale of the preset"),
    "window": Opt(int, 3, "sliding-window length L"),
    "epochs": Opt(int, 500, "training epochs (at most 500)"),
    "split": Opt(str, "half_per_sequence", f"split policy ({', '.join(SPLIT_POLICIES)})"),
    "mode": Opt(str, "end_to_end", "end_to_end or decoupled"),
    "fc_checkpoint": Opt(str, None, "trained fc checkpoint for decoupled training"),
    "precision": Opt(int, 64, "float width, 32 or 64"),
    "freeze_prefix": Opt(int, 0, "number of leading conv layers kept fixed"),
    "eval_every": Opt(int, 1, "epochs between metric evaluations"),
    "threshold": Opt(float, 0.5, "foreground threshold on the predicted probability"),
    # eval / predict
    "checkpoint": Opt(str, None, "checkpoint file"),
    "subset": Opt(str, "test", "which part of the split to score: train, test or all"),
    "aggregation": Opt(str, "micro", "micro or macro"),
    "dump_masks": Opt(_bool, False, "write one predicted mask per window", flag=True),
    "frames": Opt(_names, None, "frame image paths, oldest first", many=True),
    # gradcheck / inspect
    "component": Opt(_names, None, "gradient-check components (default: all)", many=True),
}

COMMAND_KEYS: dict[str, tuple[str, ...]] = {
    "synth": ("out", "seed", "seqs", "len", "height", "width", "sprites", "vmin", "vmax", "glyphs", "tau"),
    "train": ("out", "seed", "data", "preset", "arch", "scale", "window", "epochs", "split", "mode",
              "fc_checkpoint", "precision", "freeze_prefix", "eval_every", "threshold"),
    "eval": ("out", "seed", "data", "checkpoint", "arch", "split", "subset", "aggregation", "precision",
             "threshold", "dump_masks"),
    "predict": ("out", "checkpoint", "arch", "frames", "precision", "threshold"),
    "gradcheck": ("out", "seed", "component"),
    "inspect": ("out", "preset", "arch", "scale", "window"),
}

COMMAND_DEFAULTS = {"inspect": {"preset": "all"}}


@dataclass
class RunConfig:
    """Resolved options of one command; ``to_text`` is its provenance record."""

    command: str
    values: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def to_text(self) -> str:
        lines = [f"# rfcn {self.command}"]
        for key in COMMAND_KEYS[self.command]:
            v = self.values[key]
            # the output location belongs to the invocation, not the recipe
            if v is None or key == "out":
                continue
            if isinstance(v, (list, tuple)):
                v = ",".join(v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"


def read_config_file(path) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys may use - or _."""
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise UsageError(f"cannot read config file {path}: {err.strerror or err}") from None
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in OPTIONS:
            raise UsageError(f"{path}:{no}: unknown key {key!r}")
        try:
            out[key] = OPTIONS[key].parse(value)
        except ValueError as err:
            raise UsageError(f"{path}:{no}: bad value for {key}: {err}") from None
    return out


def resolve(command: str, flags: dict[str, Any], config_path: str | None) -> RunConfig:
    """Defaults, then config file, then flags. Keys of other commands in the file are ignored."""
    values = {k: OPTIONS[k].default for k in COMMAND_KEYS[command]}
    values.update(COMMAND_DEFAULTS.get(command, {}))
    if config_path:
        from_file = read_config_file(config_path)
        values.update({k: v for k, v in from_file.items() if k in values})
    values.update(flags)
    return RunConfig(command, values)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rfcn", description="Recurrent fully convolutional networks for video segmentation.")
    parser.add_argument("--verbose", action="store_true", help="log training progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "synth": "write a moving-sprite dataset",
        "train": "train a network and write checkpoint and history",
        "eval": "score a checkpoint on a dataset split",
        "predict": "segment the last frame of one window",
        "gradcheck": "compare analytic and finite-difference gradients",
        "inspect": "print per-layer shape tables",
    }
    for name, keys in COMMAND_KEYS.items():
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--config", help="key = value file; flags take precedence")
        for key in keys:
            opt = OPTIONS[key]
            flag = "--" + key.replace("_", "-")
            if opt.flag:
                p.add_argument(flag, dest=key, action="store_true", default=argparse.SUPPRESS, help=opt.help)
            elif opt.many:
                p.add_argument(flag, dest=key, nargs="+", default=argparse.SUPPRESS, help=opt.help)
            else:
                p.add_argument(flag, dest=key, type=opt.parse, default=argparse.SUPPRESS, help=opt.help)
    return parser


# --- helpers ---------------------------------------------------------------------------


def _out_dir(cfg: RunConfig, required: bool = True) -> Path | None:
    if cfg["out"] is None:
        if required:
            raise UsageError(f"{cfg.command}: --out is required")
        return None
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / CONFIG_NAME).write_text(cfg.to_text())
    except OSError as err:
        raise RunError(f"cannot write to {out}: {err.strerror or err}") from None
    return out


def _dtype(cfg: RunConfig):
    if cfg["precision"] not in (32, 64):
        raise UsageError("--precision must be 32 or 64")
    return np.float32 if cfg["precision"] == 32 else np.float64


def _architecture(cfg: RunConfig) -> ArchitectureSpec:
    window = cfg.values.get("window", 3)
    if cfg["arch"]:
        try:
            text = Path(cfg["arch"]).read_text()
        except OSError as err:
            raise RunError(f"cannot read architecture file {cfg['arch']}: {err.strerror or err}") from None
        try:
            spec = parse_architecture(text, name=Path(cfg["arch"]).stem)
        except ArchitectureError as err:
            raise UsageError(f"{cfg['arch']}: {err}") from None
        return spec
    if cfg["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {cfg['preset']!r}; valid presets: {', '.join(PRESETS)}")
    try:
        return build_preset(cfg["preset"], cfg["scale"], window)
    except ArchitectureError as err:
        raise UsageError(str(err)) from None


def _load_data(cfg: RunConfig):
    if not cfg["data"]:
        raise UsageError(f"{cfg.command}: --data is required")
    if cfg["split"] not in SPLIT_POLICIES:
        raise UsageError(f"unknown split policy {cfg['split']!r}; choose from {', '.join(SPLIT_POLICIES)}")
    seqs = load_dataset_dir(cfg["data"])
    try:
        return split(seqs, cfg["split"], derive_seed(cfg["seed"], "split"))
    except ValueError as err:
        raise UsageError(str(err)) from None


def _load_model(cfg: RunConfig, dtype) -> Model:
    if not cfg["checkpoint"]:
        raise UsageError(f"{cfg.command}: --checkpoint is required")
    model = None
    if cfg["arch"]:
        model = Model(_architecture(cfg), dtype=dtype)
    try:
        model, _ = load_checkpoint(cfg["checkpoint"], model, dtype=dtype)
    except OSError as err:
        raise RunError(f"cannot read checkpoint {cfg['checkpoint']}: {err.strerror or err}") from None
    return model


# --- commands ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig) -> int:
    for key in ("seqs", "len", "height", "width", "sprites"):
        if cfg[key] < 1:
            raise UsageError(f"--{key} must be at least 1")
    if not 0 < cfg["tau"] < 1 or not 0 <= cfg["vmin"] <= cfg["vmax"]:
        raise UsageError("need 0 < tau < 1 and 0 <= vmin <= vmax")
    out = _out_dir(cfg)
    sprite_cfg = MovingSpriteConfig(
        height=cfg["height"], width=cfg["width"], length=cfg["len"], sprites=cfg["sprites"],
        velocity_range=(cfg["vmin"], cfg["vmax"]), glyph_source=cfg["glyphs"], threshold=cfg["tau"],
        seed=cfg["seed"],
    )
    try:
        seqs = synthesize_dataset(sprite_cfg, cfg["seqs"])
    except ValueError as err:
        raise UsageError(str(err)) from None
    manifest = {"config": {k: cfg[k] for k in COMMAND_KEYS["synth"] if k != "out"}, "sequences": []}
    try:
        for i, seq in enumerate(seqs):
            save_sequence_dir(seq, out / seq.id)
            manifest["sequences"].append({"id": seq.id, "seed": cfg["seed"] * 1000 + i, "frames": len(seq)})
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as err:
        raise RunError(f"cannot write dataset to {out}: {err.strerror or err}") from None
    print(json.dumps({"sequences": len(seqs), "frames": cfg["len"], "out": str(out)}))
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    dtype = _dtype(cfg)
    spec = _architecture(cfg)
    if cfg["mode"] not in ("end_to_end", "decoupled"):
        raise UsageError("--mode must be end_to_end or decoupled")
    if cfg["mode"] == "decoupled" and not cfg["fc_checkpoint"]:
        raise UsageError("decoupled training needs --fc-checkpoint")
    try:
        tcfg = TrainConfig(
            max_epochs=cfg["epochs"], window=spec.window, seed=derive_seed(cfg["seed"], "order"),
            precision=cfg["precision"], mode=cfg["mode"], freeze_prefix=cfg["freeze_prefix"],
            eval_every=cfg["eval_every"], threshold=cfg["threshold"],
        )
    except ValueError as err:
        raise UsageError(str(err)) from None
    dataset = _load_data(cfg)
    out = _out_dir(cfg)
    model = Model(spec, seed=derive_seed(cfg["seed"], "init"), dtype=dtype)
    fc_model = None
    if cfg["mode"] == "decoupled":
        try:
            fc_model, _ = load_checkpoint(cfg["fc_checkpoint"], dtype=dtype)
        except OSError as err:
            raise RunError(f"cannot read checkpoint {cfg['fc_checkpoint']}: {err.strerror or err}") from None
    history_path = out / "history.jsonl"
    with open(history_path, "w") as fh:
        def record(row):
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.flush()

        train(model, dataset, tcfg, fc_model=fc_model, callback=record)
    save_checkpoint(model, model.optimizer_state, out / "checkpoint.bin")
    print(json.dumps({"checkpoint": str(out / "checkpoint.bin"), "epochs": cfg["epochs"]}))
    return EXIT_OK


def _subset_windows(cfg: RunConfig, dataset, window: int):
    if cfg["subset"] not in ("train", "test", "all"):
        raise UsageError("--subset must be train, test or all")
    seqs = {"train": dataset.train, "test": dataset.test, "all": dataset.train + dataset.test}[cfg["subset"]]
    windows = all_windows(seqs, window)
    if not windows:
        raise UsageError(f"the {cfg['subset']} split has no windows of length {window}")
    return windows


def cmd_eval(cfg: RunConfig) -> int:
    dtype = _dtype(cfg)
    if cfg["aggregation"] not in ("micro", "macro"):
        raise UsageError("--aggregation must be micro or macro")
    if cfg["dump_masks"] and cfg["out"] is None:
        raise UsageError("--dump-masks needs --out")
    model = _load_model(cfg, dtype)
    windows = _subset_windows(cfg, _load_data(cfg), model.spec.window)
    out = _out_dir(cfg, required=False)
    if cfg["aggregation"] == "micro" and not cfg["dump_masks"]:
        report, loss = evaluate(model, windows, cfg["threshold"])
    else:
        reports, losses = [], []
        with no_record():
            for w in windows:
                pred = forward_window(model, w.frames)
                reports.append(score(pred, w.target, cfg["threshold"]))
                losses.append(logistic_loss(pred, w.target)[0])
                if cfg["dump_masks"]:
                    mask_dir = out / "masks"
                    mask_dir.mkdir(exist_ok=True)
                    name = f"{w.seq_id.replace('/', '_')}_{w.last_index:04d}.pgm"
                    write_gray(mask_dir / name, (np.squeeze(pred.data) > cfg["threshold"]).astype(float))
        report, loss = aggregate(reports, cfg["aggregation"]), float(np.mean(losses))
    result = {**report.as_dict(), "loss": loss, "windows": len(windows), "aggregation": cfg["aggregation"]}
    text = json.dumps(result, sort_keys=True)
    if out is not None:
        (out / "metrics.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_predict(cfg: RunConfig) -> int:
    dtype = _dtype(cfg)
    if not cfg["frames"]:
        raise UsageError("predict needs --frames")
    model = _load_model(cfg, dtype)
    if len(cfg["frames"]) != model.spec.window:
        raise UsageError(f"{len(cfg['frames'])} frames given, the model expects L={model.spec.window}")
    frames = [read_gray(p) for p in cfg["frames"]]
    out = _out_dir(cfg)
    with no_record():
        prob = np.squeeze(forward_window(model, frames).data)
    mask = (prob > cfg["threshold"]).astype(float)
    write_gray(out / "mask.pgm", mask)
    write_gray(out / "probability.pgm", prob)
    print(json.dumps({"mask": str(out / "mask.pgm"), "foreground_fraction": float(mask.mean())}))
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    from .checks import COMPONENTS, run_checks

    names = cfg["component"] or list(COMPONENTS)
    unknown = [n for n in names if n not in COMPONENTS]
    if unknown:
        raise UsageError(f"unknown component {unknown[0]!r}; choose from {', '.join(COMPONENTS)}")
    out = _out_dir(cfg, required=False)
    rows = []
    print(f"{'component':<14}{'max rel error':>16}{'checked':>10}  result")
    for r in run_checks(names, seed=cfg["seed"]):
        print(f"{r.component:<14}{r.max_rel_error:>16.3e}{r.checked:>10}  {'pass' if r.passed else 'FAIL'}")
        rows.append(r)
    failed = [r.component for r in rows if not r.passed]
    if out is not None:
        with open(out / "gradcheck.jsonl", "w") as fh:
            for r in rows:
                fh.write(json.dumps({"component": r.component, "max_rel_error": r.max_rel_error,
                                     "checked": r.checked, "passed": r.passed}) + "\n")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_inspect(cfg: RunConfig) -> int:
    if cfg["arch"]:
        specs = [_architecture(cfg)]
    elif cfg["preset"] == "all":
        specs = [build_preset(p, cfg["scale"], cfg["window"]) for p in PRESETS]
    else:
        specs = [_architecture(cfg)]
    tables = [format_shape_table(s) for s in specs]
    text = "\n\n".join(tables) + "\n"
    out = _out_dir(cfg, required=False)
    if out is not None:
        (out / "shapes.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
    "predict": cmd_predict, "gradcheck": cmd_gradcheck, "inspect": cmd_inspect,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
        for key in ("component", "frames"):
            if key in flags:
                flags[key] = _names(flags[key])
        cfg = resolve(args.command, flags, args.config)
        return COMMANDS[args.command](cfg)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (RunError, DataError, CheckpointError, DimensionError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

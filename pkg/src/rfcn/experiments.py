"""Seeded fc-versus-recurrent comparisons on synthetic moving sprites."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

from .data import MovingSpriteConfig, split, synthesize_dataset
from .model import Model, build_preset
from .training import TrainConfig, train


@dataclass
class ComparisonConfig:
    fc_preset: str = "fc-lenet"
    rfc_preset: str = "rfc-lenet"
    scale: float = 1.0
    sequences: int = 12  # 70/30 by sequence gives 8 train, 4 test
    length: int = 20
    window: int = 3
    epochs: int = 25
    seeds: tuple[int, ...] = (1, 2, 3)
    precision: int = 32
    eval_every: int = 0  # 0 scores the test split after the last epoch only


@dataclass
class SeedResult:
    seed: int
    fc_f: float
    rfc_f: float
    fc_seconds: float
    rfc_seconds: float
    fc_history: list = field(repr=False, default_factory=list)
    rfc_history: list = field(repr=False, default_factory=list)


@dataclass
class ComparisonResult:
    config: ComparisonConfig
    runs: list[SeedResult]

    @property
    def fc_median(self) -> float:
        return statistics.median(r.fc_f for r in self.runs)

    @property
    def rfc_median(self) -> float:
        return statistics.median(r.rfc_f for r in self.runs)

    @property
    def seconds(self) -> float:
        return sum(r.fc_seconds + r.rfc_seconds for r in self.runs)

    def summary(self) -> dict:
        return {
            "fc_preset": self.config.fc_preset, "rfc_preset": self.config.rfc_preset,
            "scale": self.config.scale, "epochs": self.config.epochs,
            "fc_f": [r.fc_f for r in self.runs], "rfc_f": [r.rfc_f for r in self.runs],
            "fc_median": self.fc_median, "rfc_median": self.rfc_median, "seconds": self.seconds,
        }


def seed_dataset(cfg: ComparisonConfig, seed: int, input_hw: tuple[int, int]):
    sprites = MovingSpriteConfig(height=input_hw[0], width=input_hw[1], length=cfg.length, seed=seed)
    return split(synthesize_dataset(sprites, cfg.sequences), "seventy_thirty_by_sequence", seed=seed)


def _fit(preset: str, cfg: ComparisonConfig, dataset, seed: int, log=None):
    spec = build_preset(preset, cfg.scale, cfg.window)
    tcfg = TrainConfig(max_epochs=cfg.epochs, window=cfg.window, seed=seed, precision=cfg.precision,
                       eval_every=cfg.eval_every or cfg.epochs)
    model = Model(spec, seed=seed, dtype=tcfg.dtype)
    start = time.perf_counter()
    history = train(model, dataset, tcfg, callback=(lambda row: log(preset, seed, row)) if log else None)
    return history, time.perf_counter() - start


def compare(cfg: ComparisonConfig, log=None) -> ComparisonResult:
    """Train both presets on the same split for every seed; score the final epoch on the test split.

    ``log(preset, seed, row)`` is called with every history row.
    """
    input_hw = build_preset(cfg.rfc_preset, cfg.scale, cfg.window).input_hw
    if build_preset(cfg.fc_preset, cfg.scale, cfg.window).input_hw != input_hw:
        raise ValueError("the two presets must share an input size")
    runs = []
    for seed in cfg.seeds:
        dataset = seed_dataset(cfg, seed, input_hw)
        fc_hist, fc_s = _fit(cfg.fc_preset, cfg, dataset, seed, log)
        rfc_hist, rfc_s = _fit(cfg.rfc_preset, cfg, dataset, seed, log)
        runs.append(SeedResult(seed, fc_hist[-1]["test_f_measure"], rfc_hist[-1]["test_f_measure"],
                               fc_s, rfc_s, fc_hist, rfc_hist))
    return ComparisonResult(cfg, runs)


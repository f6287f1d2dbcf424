"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (visible even
under output capture) and then asserts. The two training comparisons take
roughly a quarter of an hour together on one core.
"""

import io
import subprocess
import sys
import time
from contextlib import redirect_stdout
from pathlib import Path

import numpy as np
import pytest

from rfcn import recurrent as R
from rfcn.checks import COMPONENTS, REL_TOL, run_checks
from rfcn.cli import main
from rfcn.experiments import ComparisonConfig, compare
from rfcn.metrics import f_measure
from rfcn.model import PRESETS, build_preset, check_dense_prediction, format_shape_table, infer_shapes
from rfcn.tensor import Tensor, orthogonal

TESTS = Path(__file__).parent


@pytest.fixture
def report(capsys):
    def emit(number, passed, text):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if passed else 'FAIL'}  {text}")

    return emit


# 1 ----------------------------------------------------------------------------------------


def test_gradient_fidelity(report):
    start = time.perf_counter()
    results = run_checks(list(COMPONENTS), seed=0, tolerance=REL_TOL)
    seconds = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    failed = [r.component for r in results if not r.passed]
    ok = not failed and seconds < 300
    report(1, ok, f"{len(results)} components, worst {worst.component} {worst.max_rel_error:.2e} "
                  f"(tolerance {REL_TOL:.0e}), {seconds:.0f}s; failures: {failed or 'none'}")
    assert ok


# 2 ----------------------------------------------------------------------------------------

# (label, precision, recall, reported F)
REPORTED_ROWS = [
    ("sprites FC-Lenet", 0.868, 0.922, 0.894),
    ("sprites LSTM", 0.941, 0.786, 0.856),
    ("sprites GRU", 0.955, 0.877, 0.914),
    ("sprites RFC-Lenet", 0.96, 0.877, 0.916),
    ("SegTrack FC-VGG", 0.7759, 0.6810, 0.7254),
    ("SegTrack RFC-VGG", 0.8325, 0.7280, 0.7767),
    ("DAVIS FC-VGG", 0.6834, 0.5454, 0.6066),
    ("DAVIS RFC-VGG", 0.7233, 0.5586, 0.6304),
    ("motion FC-12s", 0.827, 0.585, 0.685),
    ("motion RFC-12s (D)", 0.835, 0.587, 0.69),
    ("motion RFC-12s (EE)", 0.797, 0.623, 0.7),
]


def test_reported_f_measures_follow_from_precision_and_recall(report):
    misses = []
    for label, p, r, f in REPORTED_ROWS:
        gap = abs(f_measure(p, r) - f)
        if gap > 5e-4:
            misses.append(f"{label} {f_measure(p, r):.4f} vs {f} (gap {gap:.1e})")
    report(2, not misses, f"{len(REPORTED_ROWS) - len(misses)}/{len(REPORTED_ROWS)} rows within 5e-4"
                          + (f"; off: {'; '.join(misses)}" if misses else ""))
    assert not misses


# 3 ----------------------------------------------------------------------------------------


def _describe(result):
    fc = ", ".join(f"{r.fc_f:.3f}" for r in result.runs)
    rfc = ", ".join(f"{r.rfc_f:.3f}" for r in result.runs)
    return (f"median F rfc {result.rfc_median:.4f} vs fc {result.fc_median:.4f} "
            f"(per seed rfc [{rfc}], fc [{fc}]), {result.config.epochs} epochs, {result.seconds / 60:.1f} min")


def test_recurrent_lenet_beats_fc_lenet_on_sprites(report):
    cfg = ComparisonConfig("fc-lenet", "rfc-lenet", scale=1.0, epochs=25, seeds=(1, 2, 3))
    result = compare(cfg)
    ok = (result.rfc_median >= result.fc_median and min(result.rfc_median, result.fc_median) > 0.80
          and result.seconds < 30 * 60)
    report(3, ok, "28x28 canvas, 8/4 sequences, T=20, L=3; " + _describe(result))
    assert ok


# 4 ----------------------------------------------------------------------------------------


def test_conv_gru_vgg_beats_fc_vgg_on_sprites(report):
    cfg = ComparisonConfig("fc-vgg", "rfc-vgg", scale=0.25, epochs=25, seeds=(1, 2, 3))
    result = compare(cfg)
    ok = result.rfc_median >= result.fc_median
    report(4, ok, "60x90 canvas, scale 0.25; " + _describe(result))
    assert ok


# 5 ----------------------------------------------------------------------------------------


def test_plain_recurrence_vanishes_and_gating_preserves_flow(report):
    rng = np.random.default_rng(0)
    n, T_steps = 8, 30
    theta = orthogonal(rng, (n, n)) * 0.9  # spectral norm exactly 0.9
    rnn = R.SimpleRnnParams(Tensor(theta), Tensor(np.eye(n)), Tensor(np.eye(n)), "tanh")
    h0 = rng.uniform(-1, 1, n)
    norms = R.gradient_flow_norms(rnn, T_steps, h0)  # norms[k-1] = |dh_T/dh_k|, k = 1..T-1
    bound_ok = all(v <= 0.9 ** (T_steps - k) * (1 + 1e-12) for k, v in enumerate(norms, 1))
    vanish_ok = norms[0] < 0.9 ** 30

    gru = R.GruParams.init(rng, n, n)
    gru.b_z.data[...] = -8.0  # update gate near 0: the state is carried over
    x = Tensor(np.zeros(n))
    gru_norms = R.state_flow_norms(lambda xx, hp: R.gru_step(gru, xx, hp), x, T_steps, h0)
    keep_ok = gru_norms[0] >= 0.5

    ok = bound_ok and vanish_ok and keep_ok
    report(5, ok, f"tanh RNN |dh_T/dh_1| = {norms[0]:.2e} (< 0.9^30 = {0.9 ** 30:.4f}: {vanish_ok}), "
                  f"geometric bound at all k: {bound_ok}; gated GRU |dh_T/dh_1| = {gru_norms[0]:.3f} (>= 0.5)")
    assert ok


# 6 ----------------------------------------------------------------------------------------

PROPERTY_TESTS = [
    "test_tensor.py::test_transposed_conv_is_adjoint_of_conv",
    "test_tensor.py::test_conv_gradient_matches_differences",
    "test_tensor.py::test_gradient_linearity",
    "test_tensor.py::test_determinism",
    "test_recurrent.py::test_conv_gru_preserves_spatial_size",
    "test_recurrent.py::test_conv_gru_reduces_to_dense_gru",
    "test_recurrent.py::test_gru_state_is_convex_blend",
    "test_recurrent.py::test_shared_weight_gradient_is_sum_of_untied_steps",
    "test_data.py::test_windows_align_and_never_straddle_the_split",
    "test_data.py::test_seventy_thirty_is_a_disjoint_partition",
    "test_data.py::test_sprite_support_is_constant",
    "test_data.py::test_same_seed_same_sequence",
    "test_metrics.py::test_iou_is_f_over_two_minus_f",
    "test_metrics.py::test_f_lies_between_precision_and_recall",
    "test_metrics.py::test_raising_threshold_never_adds_positives",
    "test_model.py::test_dense_prediction_wherever_the_chain_fits",
    "test_training.py::test_checkpoint_round_trip",
    "test_training.py::test_training_is_deterministic",
    "test_training.py::test_adadelta_moves_against_the_gradient",
    "test_cli.py::test_rerun_from_config_is_bitwise_identical",
]


def test_property_suites(report):
    ids = [str(TESTS / t) for t in PROPERTY_TESTS]
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *ids],
                          capture_output=True, text=True, cwd=TESTS.parent)
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    ok = proc.returncode == 0
    report(6, ok, f"{len(PROPERTY_TESTS)} invariant tests: {tail}")
    assert ok, proc.stdout[-3000:]


# 7 ----------------------------------------------------------------------------------------


def test_inspect_shape_ledger(report):
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = main(["inspect"])
    text = buf.getvalue()
    problems = []
    for name in PRESETS:
        spec = build_preset(name)
        check_dense_prediction(spec)
        if infer_shapes(spec)[-1].out_shape != (1,) + spec.input_hw:
            problems.append(f"{name} output differs from input")
        if format_shape_table(spec) not in text:
            problems.append(f"{name} table missing from inspect output")
    for name in ("rfc-lenet", "fc-lenet", "rfc-12s", "fc-12s"):
        if "P(2) added" not in format_shape_table(build_preset(name)):
            problems.append(f"{name} padding deviation not annotated")
    ok = code == 0 and not problems
    report(7, ok, f"inspect printed {text.count('total parameters')} tables, all dense; "
                  f"problems: {problems or 'none'}")
    assert ok

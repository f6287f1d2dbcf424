"""Named gradient checks for every layer, cell and full network.

Each component builds a small 64-bit problem, reduces its output to a scalar
with a fixed random projection (or the logistic loss for whole networks) and
compares reverse-mode gradients against central differences.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .gradcheck import REL_TOL, GradCheckResult, check_scalar_function
from .model import Model, build_preset, forward_window
from .recurrent import ConvGruParams, GruParams, LstmParams, SimpleRnnParams, unroll
from .tensor import Tensor


def _leaf(rng, shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _projected(forward: Callable[[], Tensor], rng) -> Callable:
    """Turn ``forward`` into the (output, seed, loss) triple with loss = <out, R>."""
    proj = {}

    def run():
        out = forward()
        if "R" not in proj:
            proj["R"] = rng.standard_normal(out.shape)
        return out, proj["R"], float(np.sum(out.data * proj["R"]))

    return run


def _check(name, forward, params, rng, budget=200) -> GradCheckResult:
    return check_scalar_function(name, _projected(forward, rng), params, budget=budget)


def check_conv(rng) -> GradCheckResult:
    x, k, b = _leaf(rng, (2, 7, 7)), _leaf(rng, (3, 2, 3, 3)), _leaf(rng, (3,))
    return _check("conv", lambda: T.conv2d(x, k, b, stride=2, pad=3), [x, k, b], rng)


def check_deconv(rng) -> GradCheckResult:
    x, k = _leaf(rng, (2, 4, 4)), _leaf(rng, (2, 3, 4, 4))
    return _check("deconv", lambda: T.transposed_conv2d(x, k, 2, target_hw=(9, 9)), [x, k], rng)


def check_pool(rng) -> GradCheckResult:
    # distinct values spaced well beyond the difference step keep argmax fixed
    x = Tensor(rng.permutation(2 * 7 * 7).reshape(2, 7, 7) * 0.01, requires_grad=True)

    a = _check("pool", lambda: T.maxpool2d(x, 2), [x], rng)
    b = _check("pool", lambda: T.maxpool2d(x, 3, 2), [x], rng)
    return GradCheckResult("pool", max(a.max_rel_error, b.max_rel_error), a.checked + b.checked)


def check_dense(rng) -> GradCheckResult:
    x, w, b = _leaf(rng, (5,)), _leaf(rng, (4, 5)), _leaf(rng, (4,))
    return _check("dense", lambda: T.dense(x, w, b), [x, w, b], rng)


def check_activations(rng) -> GradCheckResult:
    # keep relu inputs away from its kink
    x = Tensor(rng.uniform(0.1, 2.0, size=12) * rng.choice([-1, 1], size=12), requires_grad=True)

    def forward():
        parts = [T.apply_activation(k, x) for k in ("sigmoid", "tanh", "relu", "identity")]
        return T.add_n(*parts)

    return _check("activations", forward, [x], rng)


def check_simple_rnn(rng) -> GradCheckResult:
    p = SimpleRnnParams.init(rng, 3, 4, 2)
    xs = [_leaf(rng, (3,)) for _ in range(4)]
    return _check("simple-rnn", lambda: unroll(p, xs)[1], p.tensors() + xs, rng)


def check_lstm(rng) -> GradCheckResult:
    worst, count = 0.0, 0
    for cand in ("sigmoid", "tanh"):
        p = LstmParams.init(rng, 3, 4, candidate_activation=cand)
        for t in p.tensors():
            t.data += rng.normal(0, 0.1, size=t.shape)
        xs = [_leaf(rng, (3,)) for _ in range(4)]
        r = _check("lstm", lambda: unroll(p, xs)[1], p.tensors() + xs, rng)
        worst, count = max(worst, r.max_rel_error), count + r.checked
    return GradCheckResult("lstm", worst, count)


def check_gru(rng) -> GradCheckResult:
    p = GruParams.init(rng, 3, 4)
    for t in p.tensors():
        t.data += rng.normal(0, 0.1, size=t.shape)
    xs = [_leaf(rng, (3,)) for _ in range(4)]
    return _check("gru", lambda: unroll(p, xs)[1], p.tensors() + xs, rng)


def check_conv_gru(rng) -> GradCheckResult:
    p = ConvGruParams.init(rng, 2, 3, 3)
    for t in p.tensors():
        t.data += rng.normal(0, 0.1, size=t.shape)
    xs = [_leaf(rng, (2, 5, 5)) for _ in range(3)]
    return _check("conv-gru", lambda: unroll(p, xs)[1], p.tensors() + xs, rng)


def _network(name: str, preset: str, scale: float, rng, budget: int) -> GradCheckResult:
    from .training import logistic_loss

    model = Model(build_preset(preset, scale), seed=int(rng.integers(1 << 31)))
    # zero biases put zero-padded borders exactly on the relu kink; move to a generic point
    for pname, t in model.params.items():
        if pname.endswith("bias") or ".b" in pname:
            t.data += rng.uniform(-0.1, 0.1, size=t.shape)
    shape = (model.spec.in_channels,) + tuple(model.spec.input_hw)
    frames = [rng.uniform(0, 1, size=shape) for _ in range(model.spec.window)]
    target = (rng.uniform(size=shape[1:]) > 0.7).astype(float)

    def run():
        out = forward_window(model, frames)
        loss, seed = logistic_loss(out, target)
        return out, seed, loss

    return check_scalar_function(name, run, list(model.params.values()), budget=budget)


def check_rfc_lenet(rng) -> GradCheckResult:
    return _network("rfc-lenet", "rfc-lenet", 1.0, rng, budget=150)


def check_rfc_vgg(rng) -> GradCheckResult:
    return _network("rfc-vgg@0.25", "rfc-vgg", 0.25, rng, budget=120)


COMPONENTS: dict[str, Callable[[np.random.Generator], GradCheckResult]] = {
    "conv": check_conv,
    "deconv": check_deconv,
    "pool": check_pool,
    "dense": check_dense,
    "activations": check_activations,
    "simple-rnn": check_simple_rnn,
    "lstm": check_lstm,
    "gru": check_gru,
    "conv-gru": check_conv_gru,
    "rfc-lenet": check_rfc_lenet,
    "rfc-vgg": check_rfc_vgg,
}


def run_checks(names=None, seed: int = 0, tolerance: float = REL_TOL) -> list[GradCheckResult]:
    """Run the named components (all by default) in registry order."""
    names = list(COMPONENTS) if not names else list(names)
    unknown = [n for n in names if n not in COMPONENTS]
    if unknown:
        raise KeyError(f"unknown component {unknown[0]!r}; choose from {', '.join(COMPONENTS)}")
    results = []
    for k, name in enumerate(COMPONENTS):
        if name in names:
            r = COMPONENTS[name](np.random.default_rng([seed, k]))
            results.append(GradCheckResult(name, r.max_rel_error, r.checked, tolerance))
    return results

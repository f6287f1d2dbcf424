"""Central finite differences and analytic-vs-numeric comparison helpers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Record, Tensor, backward

REL_TOL = 1e-4
ABS_FLOOR = 1e-6


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, eps: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences ``(f(x+eps e_i) - f(x-eps e_i)) / 2eps``.

    ``x`` is perturbed in place and restored, so ``f`` may close over it.
    With ``indices`` (flat positions) only those coordinates are evaluated
    and the rest of the result is NaN.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    arr = x.data if isinstance(x, Tensor) else x
    flat = arr.reshape(-1)
    if not np.shares_memory(flat, arr):
        raise ValueError("x must be contiguous so that perturbations are visible to f")
    out = np.full(flat.shape, np.nan) if indices is not None else np.zeros(flat.shape)
    todo = range(flat.size) if indices is None else indices
    for i in todo:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(arr)
        flat[i] = orig - eps
        fm = f(arr)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(arr.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> np.ndarray:
    """Elementwise |a-n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dividing by ~0."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def within_tolerance(analytic, numeric, rel: float = REL_TOL, floor: float = ABS_FLOOR) -> bool:
    return bool(np.all(relative_error(analytic, numeric, floor) <= rel))


@dataclass
class GradCheckResult:
    component: str
    max_rel_error: float
    checked: int
    tolerance: float = REL_TOL

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def sample_indices(rng: np.random.Generator, tensors: Sequence[Tensor], budget: int) -> list[np.ndarray]:
    """Spread ``budget`` coordinates over ``tensors`` with at least one per tensor."""
    sizes = np.array([t.size for t in tensors])
    share = np.maximum(1, np.floor(budget * sizes / sizes.sum()).astype(int))
    while share.sum() > max(budget, len(tensors)):
        share[np.argmax(share)] -= 1
    return [rng.choice(n, size=min(n, s), replace=False) for n, s in zip(sizes, share)]


def check_scalar_function(
    component: str,
    loss_and_seed: Callable[[], tuple[Tensor, np.ndarray | None, float]],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    budget: int = 200,
    seed: int = 0,
) -> GradCheckResult:
    """Compare reverse-mode gradients against central differences.

    ``loss_and_seed`` runs the forward computation and returns
    ``(output tensor, seed for backward, scalar loss)``; it is called once
    under a record for the analytic pass and repeatedly for the numeric one.
    """
    with Record() as rec:
        out, seed_arr, _ = loss_and_seed()
    analytic = backward(rec, out, seed_arr, wrt=params)

    def value(_):
        return loss_and_seed()[2]

    rng = np.random.default_rng(seed)
    picks = sample_indices(rng, params, budget)
    worst, count = 0.0, 0
    for p, g, idx in zip(params, analytic, picks):
        num = finite_difference_gradient(value, p, eps, indices=idx)
        err = relative_error(g.reshape(-1)[idx], num.reshape(-1)[idx])
        worst = max(worst, float(err.max(initial=0.0)))
        count += len(idx)
    return GradCheckResult(component, worst, count)


def jacobian(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    """Dense Jacobian d fn(x) / dx via one reverse pass per output coordinate."""
    leaf = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with Record() as rec:
        y = fn(leaf)
    rows = []
    for i in range(y.size):
        seed = np.zeros(y.size)
        seed[i] = 1.0
        if len(rec) == 0:
            rows.append(np.zeros(leaf.size))
            continue
        (g,) = backward(rec, y, seed.reshape(y.shape), wrt=[leaf])
        rows.append(g.reshape(-1))
    return np.array(rows)

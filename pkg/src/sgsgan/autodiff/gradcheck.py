"""Central finite-difference validation of backward rules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], arr: np.ndarray, eps: float, coords=None) -> np.ndarray:
    """d fn() / d arr by central differences, perturbing ``arr`` in place.

    With ``coords`` (flat indices) only those entries are computed; the
    rest of the result is zero.
    """
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(fn().data)
        flat[i] = orig - eps
        minus = float(fn().data)
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                    eps: float = 1e-4, seed: int = 0, max_coords: int | None = None) -> float:
    """Compare analytic and central-difference gradients of ``fn`` w.r.t. every input.

    ``fn`` maps float64 tensors to a tensor of any shape; non-scalar outputs
    are contracted against a fixed random projection so every output element
    contributes. Returns the max relative error
    ``|analytic - numeric| / max(1, |numeric|)`` over all input elements,
    or over ``max_coords`` seeded random entries per input when given.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probe = None

    def scalar(*tensors):
        nonlocal probe
        out = fn(*tensors)
        if out.data.size == 1:
            return out.reshape(()) if out.ndim else out
        if probe is None:
            probe = np.random.default_rng(seed).standard_normal(out.shape)
        return (out * Tensor(probe)).sum()

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    scalar(*leaves).backward()
    worst = 0.0
    pick = np.random.default_rng([seed, 1])
    for leaf, arr in zip(leaves, arrays):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        coords = None
        if max_coords is not None and arr.size > max_coords:
            coords = np.sort(pick.choice(arr.size, size=max_coords, replace=False))
        numeric = numerical_grad(lambda: scalar(*[Tensor(a) for a in arrays]), arr, eps, coords)
        if coords is not None:
            analytic, numeric = analytic.reshape(-1)[coords], numeric.reshape(-1)[coords]
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst


@dataclass
class GradCase:
    name: str
    fn: Callable[..., Tensor]
    inputs: Callable[[np.random.Generator], list[np.ndarray]]
    eps: float = 1e-4
    tol: float = 1e-4
    max_coords: int | None = None


@dataclass
class GradResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error < self.tol


def run_cases(cases: Sequence[GradCase], seed: int = 0) -> list[GradResult]:
    results = []
    for i, case in enumerate(cases):
        rng = np.random.default_rng([seed, i])
        err = check_gradients(case.fn, case.inputs(rng), eps=case.eps, seed=seed + i, max_coords=case.max_coords)
        results.append(GradResult(case.name, err, case.tol))
    return results

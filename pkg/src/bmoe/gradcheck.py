"""Finite-difference gradient verification.

The central-difference oracle is intentionally independent of the tape:
it only calls a loss function and perturbs parameter values in place.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteLossError(ArithmeticError):
    """The loss evaluated to a non-finite value at a perturbed point."""


def finite_difference_gradient(
    f: Callable[[], float],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    coords_per_param: int | None = None,
    seed: int = 0,
) -> list[np.ndarray]:
    """Central-difference estimate of df/dp for every parameter coordinate.

    ``f`` must be a deterministic scalar function of the current parameter
    values. When ``coords_per_param`` is set, at most that many coordinates
    per parameter are probed (a seeded choice); unprobed entries are NaN.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    rng = np.random.default_rng(seed)
    grads = []
    for p in params:
        if not p.data.flags["C_CONTIGUOUS"]:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        g = np.full(flat.shape, np.nan)
        idx = np.arange(flat.size)
        if coords_per_param is not None and flat.size > coords_per_param:
            idx = rng.choice(flat.size, size=coords_per_param, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f())
            flat[i] = orig - eps
            f_minus = float(f())
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteLossError(
                    f"loss non-finite at perturbed coordinate {i} of parameter shape {p.shape}"
                )
            g[i] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(g.reshape(p.shape))
    return grads


def max_relative_error(
    analytic: Sequence[np.ndarray],
    numeric: Sequence[np.ndarray],
    floor: float = 1e-4,
) -> float:
    """Worst relative disagreement; NaNs in ``numeric`` mark unprobed entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        mask = ~np.isnan(n)
        if not mask.any():
            continue
        av, nv = a[mask], n[mask]
        denom = np.maximum(np.maximum(np.abs(av), np.abs(nv)), floor)
        worst = max(worst, float(np.max(np.abs(av - nv) / denom)))
    return worst


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    coords_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Run backward on ``loss_fn`` and compare against the FD oracle.

    Returns the max relative error over all probed coordinates.
    """
    from .tensor import backward, no_grad, tape, zero_grads

    zero_grads(params)
    with tape():
        loss = loss_fn()
        backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    def f() -> float:
        with no_grad():
            return loss_fn().item()

    numeric = finite_difference_gradient(
        f, params, eps=eps, coords_per_param=coords_per_param, seed=seed
    )
    zero_grads(params)
    return max_relative_error(analytic, numeric)

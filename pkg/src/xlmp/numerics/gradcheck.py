"""Finite-difference gradient checking against tape adjoints."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


class GradCheckError(RuntimeError):
    pass


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor).

    The floor keeps near-zero gradients from turning round-off into a
    spurious failure.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-4,
    fraction: float = 1.0,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
    min_per_param: int = 1,
    order: int = 4,
) -> float:
    """Return the worst relative error between adjoints and central differences.

    ``loss_fn`` must rebuild the scalar loss from the current parameter
    values each call. With ``fraction < 1`` a random subset of each
    parameter's entries is checked (at least ``min_per_param``).

    ``order=4`` uses the five-point stencil, whose O(eps^4) truncation error
    matters for the many entries whose gradient is only ~1e-6 while the
    loss itself is O(1); ``order=2`` is the plain central difference.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    for p in params:
        if p.dtype != np.float64:
            raise GradCheckError(f"grad_check needs 64-bit parameters, {p.name or p} is {p.dtype}")
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise GradCheckError("loss is not finite")
    tape.backward(loss)

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        if fraction >= 1.0:
            idx = np.arange(n)
        else:
            k = min(n, max(min_per_param, int(round(fraction * n))))
            idx = np.sort(rng.choice(n, size=k, replace=False))
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            vals = {}
            for h in ((1, -1) if order == 2 else (1, -1, 2, -2)):
                flat[i] = orig + h * epsilon
                vals[h] = float(loss_fn().data)
            flat[i] = orig
            if not all(np.isfinite(v) for v in vals.values()):
                raise GradCheckError(f"loss became non-finite while perturbing {p.name}[{i}]")
            d1 = (vals[1] - vals[-1]) / (2 * epsilon)
            if order == 2:
                numeric[j] = d1
            else:
                d2 = (vals[2] - vals[-2]) / (4 * epsilon)
                numeric[j] = (4 * d1 - d2) / 3
        err = relative_error(analytic.reshape(-1)[idx], numeric, floor)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst

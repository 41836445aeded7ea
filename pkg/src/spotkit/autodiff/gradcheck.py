"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class GradCheckError(FloatingPointError):
    pass


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = 64,
    seed: int = 0,
) -> float:
    """Max over sampled coordinates of |analytic - numeric| / max(1, |analytic|).

    ``f`` rebuilds the scalar loss from the current ``params`` data each call.
    Parameters must hold float64 data; at most ``max_coords`` coordinates per
    parameter are probed (all of them when ``None``).
    """
    rng = np.random.default_rng(seed)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, got {p.dtype} for {p.name or p.shape}")
        p.grad = None
    loss = f()
    loss.backward()
    worst = 0.0
    for i, p in enumerate(params):
        label = p.name or f"param[{i}] shape={p.shape}"
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(analytic)):
            raise GradCheckError(f"non-finite analytic gradient for {label}")
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        g_flat = analytic.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = f().item()
            flat[c] = orig - step
            down = f().item()
            flat[c] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise GradCheckError(f"non-finite loss while perturbing {label} at index {int(c)}")
            numeric = (up - down) / (2 * step)
            err = abs(g_flat[c] - numeric) / max(1.0, abs(g_flat[c]))
            worst = max(worst, err)
    return worst

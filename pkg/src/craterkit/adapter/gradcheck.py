"""Central-difference validation of analytic gradients."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np


class NumericalError(ValueError):
    """Non-finite loss encountered while probing."""


def grad_check(
    loss_at: Callable[[np.ndarray], float],
    grad_at: Callable[[np.ndarray], np.ndarray],
    params: np.ndarray,
    step: float = 1e-5,
) -> float:
    """Max relative error between grad_at and central differences of loss_at.

    Relative error uses max(|analytic|, |fd|, 1e-8) as denominator, so
    components where both sides vanish contribute zero.
    """
    params = np.asarray(params, dtype=np.float64)
    analytic = np.asarray(grad_at(params.copy()), dtype=np.float64)
    if analytic.shape != params.shape:
        raise NumericalError(
            f"gradient shape {analytic.shape} != parameter shape {params.shape}"
        )
    max_rel = 0.0
    for k in range(params.size):
        plus = params.copy()
        minus = params.copy()
        plus.flat[k] += step
        minus.flat[k] -= step
        lp, lm = float(loss_at(plus)), float(loss_at(minus))
        if not (math.isfinite(lp) and math.isfinite(lm)):
            raise NumericalError(f"non-finite loss while probing parameter {k}")
        fd = (lp - lm) / (2.0 * step)
        ga = float(analytic.flat[k])
        rel = abs(ga - fd) / max(abs(ga), abs(fd), 1e-8)
        if rel > max_rel:
            max_rel = rel
    return max_rel

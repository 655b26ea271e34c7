"""Per-iteration step machinery for the adaptive-gradient box solver.

One iteration at any level: project the gradient step to get the criticality
direction d, grow the componentwise weights, intersect the feasible box with
the scaled trust box |y - x| <= Delta, take the projected linear step, and
scale it back along the arc with a curvature (Cauchy) factor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "StepParams",
    "cauchy_scaling",
    "linear_step",
    "nogain_check",
    "readjust_level_entry",
    "taylor_step",
    "update_weights",
]


@dataclass(frozen=True)
class StepParams:
    """Constants shared by all solvers.

    init_weight seeds the weight accumulators (squared on entry at the top
    level).  gain_fraction and scale_growth build the contract passed to a
    lower level; slope_fraction controls the early-return slope test below the
    top.  step_cap bounds first-order steps relative to Delta.
    """

    init_weight: float = 0.01
    gain_fraction: float = 0.95
    scale_growth: float = 10.0
    slope_fraction: float = 1.0
    step_cap: float = 1.0
    weight_floor: float = 1e-12
    first_order_only: bool = False
    learning_rate: float = 1e-2

    def validate(self):
        if not (self.init_weight > 0):
            raise ValueError("init_weight must be positive")
        if not (0 < self.gain_fraction < 1):
            raise ValueError("gain_fraction must lie in (0, 1)")
        if not (self.scale_growth > 0):
            raise ValueError("scale_growth must be positive")
        if not (0 < self.slope_fraction <= 1):
            raise ValueError("slope_fraction must lie in (0, 1]")
        if not (self.step_cap > 0):
            raise ValueError("step_cap must be positive")
        if not (self.weight_floor > 0):
            raise ValueError("weight_floor must be positive")
        if self.first_order_only and not (self.learning_rate > 0):
            raise ValueError("learning_rate must be positive")
        return self


def update_weights(prev_w, d, floor=1e-12):
    """Accumulate weights and form the scaled trust radii.

    w_i = sqrt(prev_w_i^2 + d_i^2), Delta_i = |d_i| / w_i in [0, 1].
    Weights are floored at ``floor`` so later divisions are safe; when both
    the previous weight and d vanish the radius is 0.
    """
    w = np.sqrt(prev_w * prev_w + d * d)
    w = np.maximum(w, floor)
    delta = np.abs(d) / w
    return w, delta


def readjust_level_entry(w0, delta0, cap):
    """Rescale entry weights so that ||Delta|| <= cap, keeping w * Delta fixed.

    Applied once on entering a lower level; with an infinite cap (top level)
    this is the identity.  A zero Delta is returned unchanged.
    """
    if not (cap > 0):
        raise ValueError(f"delta cap must be positive, got {cap}")
    nd = float(np.linalg.norm(delta0))
    if nd == 0.0 or nd <= cap:
        return w0, delta0
    return w0 * (nd / cap), delta0 * (cap / nd)


def nogain_check(d0, delta0, gain_floor):
    """True when the first-order decrease |d . Delta| falls below the floor.

    The product is a sum of d_i^2 / w_i terms, hence nonnegative; the floor is
    0 at the top level, so the check never fires there.
    """
    return float(np.abs(d0) @ delta0) < gain_floor


def linear_step(x, g, delta, box):
    """Projected gradient step restricted to the scaled trust box.

    Componentwise clip of -g to [max(l - x, -Delta), min(u - x, Delta)].
    Satisfies ||s|| <= ||Delta|| and g . s <= -||s||^2.
    """
    lo = np.maximum(box.lower - x, -delta)
    hi = np.minimum(box.upper - x, delta)
    return np.clip(-g, lo, hi)


def cauchy_scaling(g, s_lin, curv):
    """Backtracking factor along the linear step from one curvature sample.

    gamma = min(1, -g.s / curv) for positive curvature, else 1.  Non-finite
    curvature falls back to 1 with a logged diagnostic.
    """
    if not np.isfinite(curv):
        log.warning("non-finite curvature %r; using unscaled step", curv)
        return 1.0
    if curv > 0.0:
        slope = -float(g @ s_lin)
        gamma = min(1.0, slope / curv)
        return max(gamma, 0.0)
    return 1.0


def taylor_step(x, g, delta, box, objective, params):
    """Candidate step for one smoothing iteration.

    Default: the linear step scaled by the Cauchy factor from one directional
    curvature evaluation.  In first-order mode the curvature oracle is never
    called and the step is learning_rate * s_lin, capped inside step_cap*Delta
    and the feasible box.

    Returns (s, gamma, curvature_or_None).
    """
    s_lin = linear_step(x, g, delta, box)
    if not np.any(s_lin):
        return s_lin, 1.0, None
    if params.first_order_only:
        s = params.learning_rate * s_lin
        if params.learning_rate > 1.0:
            cap = params.step_cap * delta
            s = np.clip(s, -cap, cap)
            s = np.clip(s, box.lower - x, box.upper - x)
        return s, 1.0, None
    curv = objective.curvature(x, s_lin)
    gamma = cauchy_scaling(g, s_lin, curv)
    return gamma * s_lin, gamma, curv

"""Synthetic gradient noise with splittable, replayable random streams.

Each perturbation is a pure function of (seed, stream id, call index): the
counter-based Philox generator is re-keyed per call, so concurrent oracles
draw from disjoint stream regions and replay bit-identically regardless of
evaluation order or threading.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Objective

__all__ = ["NoiseSchedule", "NoisyObjective", "gaussian_draw"]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-call variance of the additive gradient perturbation.

    kind "none": exact gradients.  "constant": variance sigma2 every call.
    "exponential": sigma2 * exp(-decay * k) at the wrapper's k-th call.
    """

    kind: str = "none"
    sigma2: float = 0.0
    decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "constant", "exponential"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind != "none" and self.sigma2 < 0:
            raise ValueError("noise variance must be nonnegative")
        if self.kind == "exponential" and self.decay < 0:
            raise ValueError("decay rate must be nonnegative")

    @property
    def active(self):
        return self.kind != "none" and self.sigma2 > 0

    def variance(self, k):
        if self.kind == "none":
            return 0.0
        if self.kind == "constant":
            return self.sigma2
        return self.sigma2 * np.exp(-self.decay * k)


def gaussian_draw(seed, stream, call_index, n):
    """Standard normal vector for one oracle call, replayable by key.

    The Philox key carries (seed, stream); the call index is planted in the
    high counter word so successive calls use disjoint counter ranges.
    """
    key = np.array([seed, stream], dtype=np.uint64)
    counter = np.array([0, 0, 0, call_index], dtype=np.uint64)
    bitgen = np.random.Philox(counter=counter, key=key)
    return np.random.Generator(bitgen).standard_normal(n)


class NoisyObjective(Objective):
    """Objective whose gradient is perturbed by scheduled Gaussian noise.

    Curvature stays noise-free (differencing a perturbed gradient would
    estimate nothing); the perturbation applies to the gradients the solver
    steps on.  The call counter driving the schedule is local to the wrapper.
    """

    def __init__(self, problem, counter, schedule, seed, stream=0):
        super().__init__(problem.n, counter)
        self.problem = problem
        self.schedule = schedule
        self.seed = int(seed) & (2**64 - 1)
        self.stream = int(stream)
        self.calls = 0
        if problem.hess_vec is not None:
            self.curvature_charge = 1

    def _gradient(self, x):
        k = self.calls
        self.calls += 1
        g = self.problem.gradient(x)
        var = self.schedule.variance(k)
        if var > 0.0:
            g = g + np.sqrt(var) * gaussian_draw(self.seed, self.stream, k,
                                                 g.size)
        return g

    def _hess_action(self, x, v):
        if self.problem.hess_vec is not None:
            return self.problem.hess_vec(x, v)
        ns = float(np.linalg.norm(v))
        if ns == 0.0:
            return np.zeros_like(v)
        h = np.sqrt(np.finfo(float).eps) * max(1.0, float(np.linalg.norm(x)))
        u = v / ns
        dg = self.problem.gradient(x + h * u) - self.problem.gradient(x - h * u)
        return dg * (ns / (2.0 * h))

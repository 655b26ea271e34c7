"""Box bounds, projections, criticality measures and counted oracles.

Solvers in this package never read objective values: they see gradients (and
directional curvature) through the :class:`Objective` interface, which charges
every evaluation to a cost ledger.  Objective *values* exist only on problem
objects for reporting, and a guard raises if solver code touches them.
"""

from __future__ import annotations

import contextlib
import contextvars
import threading

import numpy as np

__all__ = [
    "BoundBox",
    "CostLedger",
    "EvalCounter",
    "Objective",
    "ProblemObjective",
    "criticality_d",
    "criticality_xi",
    "fd_curvature",
    "objective_guard",
    "project_box",
    "reporting_pass",
]

#: slack used when asserting feasibility of iterates (machine-tolerance scale)
FEAS_TOL = 1e-12


def as_vector(x, n=None, name="x"):
    """Coerce ``x`` to a 1-D float64 array, optionally checking its length."""
    v = np.asarray(x, dtype=float)
    if v.ndim == 0:
        v = v.reshape(1)
    if v.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {v.shape}")
    if n is not None and v.size != n:
        raise ValueError(f"{name} has length {v.size}, expected {n}")
    return v


class BoundBox:
    """Per-variable interval bounds ``lower <= x <= upper``.

    Infinite entries mark unconstrained sides.  Equal entries pin a variable.
    """

    __slots__ = ("lower", "upper")

    def __init__(self, lower, upper):
        lower = as_vector(lower, name="lower")
        upper = as_vector(upper, n=lower.size, name="upper")
        if np.any(np.isnan(lower)) or np.any(np.isnan(upper)):
            raise ValueError("bounds must not contain NaN")
        if np.any(lower > upper):
            bad = int(np.argmax(lower > upper))
            raise ValueError(
                f"lower bound exceeds upper bound at index {bad}: "
                f"{lower[bad]} > {upper[bad]}"
            )
        self.lower = lower
        self.upper = upper

    @classmethod
    def unbounded(cls, n):
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    @property
    def dimension(self):
        return self.lower.size

    def project(self, x):
        """Euclidean projection onto the box (componentwise clip)."""
        return np.clip(x, self.lower, self.upper)

    def contains(self, x, tol=0.0):
        return bool(
            np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol)
        )

    def violation(self, x):
        """Largest bound violation of ``x`` (0 when feasible)."""
        below = np.max(self.lower - x, initial=0.0)
        above = np.max(x - self.upper, initial=0.0)
        return float(max(below, above))

    def subset(self, idx):
        """Box over the subvector selected by ``idx``."""
        return BoundBox(self.lower[idx], self.upper[idx])

    def active_mask(self, x):
        """Boolean mask of variables sitting exactly on a finite bound."""
        return (x == self.lower) | (x == self.upper)

    def __eq__(self, other):
        if not isinstance(other, BoundBox):
            return NotImplemented
        return bool(
            np.array_equal(self.lower, other.lower)
            and np.array_equal(self.upper, other.upper)
        )

    def __repr__(self):
        return f"BoundBox(n={self.dimension})"


def project_box(x, box):
    """Project ``x`` onto ``box``."""
    return box.project(as_vector(x, box.dimension))


def criticality_d(x, g, box, tol=FEAS_TOL):
    """Projected criticality step ``P(x - g) - x`` for a feasible ``x``.

    This is the working measure driving the adaptive weights: zero exactly at
    first-order critical points of the box-constrained problem.
    """
    x = as_vector(x)
    g = as_vector(g, x.size, name="g")
    if not box.contains(x, tol):
        raise ValueError(
            f"point is infeasible by {box.violation(x):.3e}; "
            "criticality is only defined on the feasible set"
        )
    return box.project(x - g) - x


def criticality_xi(x, exact_g, box):
    """Norm of the projected criticality step computed from an exact gradient.

    Reporting/stopping quantity only; in noisy runs it is evaluated with the
    noise-free gradient and never charged to the evaluation ledger.
    """
    return float(np.linalg.norm(criticality_d(x, exact_g, box)))


# ---------------------------------------------------------------------------
# evaluation counting


class EvalCounter:
    """Thread-safe accumulator of gradient-evaluation-equivalent charges."""

    def __init__(self, name=""):
        self.name = name
        self._lock = threading.Lock()
        self._count = 0

    def add(self, amount=1):
        with self._lock:
            self._count += amount

    @property
    def count(self):
        return self._count

    def __repr__(self):
        return f"EvalCounter({self.name!r}, count={self._count})"


class CostLedger:
    """Per-stream evaluation counts with fine-level-equivalent weighting.

    Each stream (a level, or the pooled subdomain work) gets a counter and a
    weight, typically ``n_stream / n_finest``.  The weighted total is always
    recomputed from the raw counts so the incremental value and the recomputed
    value agree exactly.
    """

    def __init__(self):
        self._streams = {}  # name -> (EvalCounter, weight)
        self.metadata = {}

    def counter(self, name, weight=1.0):
        if name in self._streams:
            return self._streams[name][0]
        c = EvalCounter(name)
        self._streams[name] = (c, float(weight))
        return c

    def counts(self):
        return {name: c.count for name, (c, _) in self._streams.items()}

    def weights(self):
        return {name: w for name, (_, w) in self._streams.items()}

    def total(self):
        """Weighted cost in units of one finest-level gradient evaluation."""
        return float(
            sum(w * c.count for c, w in self._streams.values())
        )

    def snapshot(self):
        return {"counts": self.counts(), "weights": self.weights(),
                "total": self.total()}


# ---------------------------------------------------------------------------
# guard separating solver paths from reporting paths


_guard_depth = contextvars.ContextVar("offobox_objective_guard", default=0)
_reporting = contextvars.ContextVar("offobox_reporting_pass", default=False)


class ObjectiveValueError(RuntimeError):
    """Raised when solver code evaluates an objective value."""


@contextlib.contextmanager
def objective_guard():
    """Mark a region as solver code: objective values may not be read."""
    token = _guard_depth.set(_guard_depth.get() + 1)
    try:
        yield
    finally:
        _guard_depth.reset(token)


@contextlib.contextmanager
def reporting_pass():
    """Mark a region as reporting: objective values may be read."""
    token = _reporting.set(True)
    try:
        yield
    finally:
        _reporting.reset(token)


def check_value_allowed():
    if _guard_depth.get() > 0 and not _reporting.get():
        raise ObjectiveValueError(
            "objective value requested from solver code; solvers are "
            "gradient-only and values exist for reporting passes alone"
        )


# ---------------------------------------------------------------------------
# curvature fallback


def fd_curvature(grad_fn, x, s):
    """Directional curvature ``s^T H s`` from two gradient evaluations.

    Central difference along the unit direction of ``s`` with step
    ``sqrt(eps) * max(1, |x|)``.  Returns 0 for a zero direction.
    """
    ns = float(np.linalg.norm(s))
    if ns == 0.0:
        return 0.0
    h = np.sqrt(np.finfo(float).eps) * max(1.0, float(np.linalg.norm(x)))
    u = s / ns
    dg = grad_fn(x + h * u) - grad_fn(x - h * u)
    return float(dg @ s) * ns / (2.0 * h)


# ---------------------------------------------------------------------------
# counted objectives


class Objective:
    """Counted gradient/curvature access used by the solvers.

    Subclasses implement ``_gradient`` (and optionally ``_hess_action``); the
    public methods charge the attached counter.  ``anchor`` support lets a
    wrapper serve the gradient at a known entry point without any evaluation,
    so an immediate early return at a lower level costs nothing.
    """

    #: counter charge of one ``curvature``/Hessian-action call
    curvature_charge = 2

    def __init__(self, n, counter):
        self.n = n
        self.counter = counter
        self._anchor_x = None
        self._anchor_g = None

    def set_anchor(self, x, g):
        self._anchor_x = np.array(x, dtype=float, copy=True)
        self._anchor_g = np.array(g, dtype=float, copy=True)

    def gradient(self, x):
        if self._anchor_x is not None and np.array_equal(x, self._anchor_x):
            return self._anchor_g.copy()
        self.counter.add(1)
        return self._gradient(x)

    def curvature(self, x, s):
        """Directional curvature ``s^T H s`` at ``x``; charged per call."""
        self.counter.add(self.curvature_charge)
        return float(s @ self._hess_action(x, s))

    def _gradient(self, x):  # pragma: no cover - interface
        raise NotImplementedError

    def _hess_action(self, x, v):  # pragma: no cover - interface
        raise NotImplementedError


class ProblemObjective(Objective):
    """Objective backed by a problem's raw gradient and Hessian action."""

    def __init__(self, problem, counter):
        super().__init__(problem.n, counter)
        self.problem = problem
        if problem.hess_vec is not None:
            self.curvature_charge = 1

    def _gradient(self, x):
        return self.problem.gradient(x)

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

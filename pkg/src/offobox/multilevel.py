"""Objective-free box-constrained solvers: single level and multilevel.

The per-level iteration never looks at objective values.  Each step is built
from the projected-gradient direction d, accumulated per-coordinate weights,
and a trust region Delta = |d|/w; curvature along the candidate step scales
it back (Cauchy point) unless first-order mode is on.  Lower levels run the
same loop on a restricted problem with a gradient-matching coarse model and
send back a prolongated correction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import (
    CostLedger,
    Objective,
    ProblemObjective,
    as_vector,
    criticality_d,
    criticality_xi,
    objective_guard,
    reporting_pass,
)
from .noise import NoiseSchedule, NoisyObjective
from .problems import Hierarchy
from .steps import (
    StepParams,
    linear_step,
    nogain_check,
    readjust_level_entry,
    taylor_step,
    update_weights,
)
from .trace import Trace, config_hash, git_revision
from .transfer import lower_level_bounds, restrict_state, truncate

__all__ = [
    "StopRule",
    "IterationState",
    "IterationContext",
    "LevelResult",
    "InvariantChecks",
    "run_level",
    "TauCorrectedObjective",
    "GalerkinObjective",
    "MultilevelEngine",
    "SingleLevelSolver",
    "MultilevelSolver",
]


@dataclass(frozen=True)
class StopRule:
    """Stop on criticality: absolute, or relative to the initial point."""

    tol_abs: float = 1e-7
    tol_rel: float = 1e-9
    max_cycles: int = 20000

    def met(self, xi, xi0):
        return xi <= self.tol_abs or (xi0 > 0 and xi / xi0 <= self.tol_rel)


@dataclass
class IterationState:
    """Quantities of one iteration at one level, before the step is taken."""

    g: np.ndarray
    d: np.ndarray
    w: np.ndarray
    delta: np.ndarray
    s_lin: np.ndarray
    first_order: float

    @property
    def d_norm(self):
        return float(np.linalg.norm(self.d))


@dataclass
class IterationContext:
    """What a recursive step callback gets to see."""

    k: int
    x: np.ndarray
    box: object
    objective: Objective
    state: IterationState


@dataclass
class LevelResult:
    x: np.ndarray
    w: np.ndarray
    status: str  # "budget" | "nogain" | "slope"
    iterations: int
    last: IterationState | None = None


class InvariantChecks:
    """Feasibility watchdog applied to every accepted iterate.

    With ``collect=True`` violations are recorded instead of raised, which
    tests use to assert that nothing was recorded.
    """

    def __init__(self, tol=1e-12, collect=False):
        self.tol = tol
        self.collect = collect
        self.violations = []
        self.checked = 0

    def iterate(self, tag, x, box):
        self.checked += 1
        v = box.violation(x)
        if v > self.tol:
            if self.collect:
                self.violations.append((tag, float(v)))
            else:
                raise AssertionError(
                    f"iterate at {tag} violates bounds by {v:.3e}")


def run_level(objective, box, x0, w_prev, gain_floor, delta_cap, schedule,
              params, *, top, recurse=None, checks=None, monitor=None,
              level_tag="level"):
    """Run the per-level iteration over ``schedule``.

    ``schedule`` is a sequence of "taylor" / "recursive" tokens.  Below the
    top level the first iteration readjusts the entry weights against
    ``delta_cap`` and may return immediately (no-gain: predicted first-order
    decrease below ``gain_floor``); later iterations may stop early when the
    accumulated step no longer realizes a fraction of the first slope.
    ``recurse`` maps an IterationContext to a step in this level's variables.
    """
    x = np.array(x0, dtype=float, copy=True)
    x_entry = x.copy()
    w = np.asarray(w_prev, dtype=float)
    g0 = None
    slope_ref = 0.0
    travelled = np.zeros_like(x)  # exact sum of accepted steps
    state = None
    for k, kind in enumerate(schedule):
        g = objective.gradient(x)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"non-finite gradient at {level_tag}, iteration {k}")
        d = criticality_d(x, g, box)
        w, delta = update_weights(w, d, params.weight_floor)
        if not top and k == 0:
            w, delta = readjust_level_entry(w, delta, delta_cap)
            if nogain_check(d, delta, gain_floor):
                return LevelResult(x=x_entry, w=w, status="nogain",
                                   iterations=0)
        s_lin = linear_step(x, g, delta, box)
        state = IterationState(g=g, d=d, w=w, delta=delta, s_lin=s_lin,
                               first_order=float(np.abs(d) @ delta))
        if kind == "recursive" and recurse is not None:
            ctx = IterationContext(k=k, x=x, box=box, objective=objective,
                                   state=state)
            s = recurse(ctx)
            kind_used = "recursive"
        else:
            s, _, _ = taylor_step(x, g, delta, box, objective, params)
            kind_used = "taylor"
        if k == 0:
            g0 = g
            slope_ref = float(g0 @ s)
        # the projected travel is summed separately from x: forming
        # (x + s) - x_entry instead loses the low bits of s and lets the
        # comparison fire on rounding noise (always at k = 0, where both
        # sides are equal by construction)
        if not top and float(g0 @ (travelled + s)) > \
                params.slope_fraction * slope_ref:
            return LevelResult(x=x, w=w, status="slope", iterations=k,
                               last=state)
        x = x + s
        travelled += s
        if checks is not None:
            checks.iterate(level_tag, x, box)
        if monitor is not None:
            monitor(k, kind_used, state, x)
    return LevelResult(x=x, w=w, status="budget", iterations=len(schedule),
                       last=state)


class TauCorrectedObjective(Objective):
    """Lower-level objective whose gradient is shifted to match the upper one.

    At the entry point the corrected gradient is the restricted upper-level
    gradient, known without evaluating anything; away from it the native
    gradient is offset by a constant, computed lazily on first use (one
    charged evaluation).  Curvature is the native one.
    """

    def __init__(self, base, x0, g_target):
        super().__init__(base.n, base.counter)
        self.base = base
        self.curvature_charge = base.curvature_charge
        self._x0 = np.array(x0, dtype=float, copy=True)
        self._g_target = np.array(g_target, dtype=float, copy=True)
        self._shift = None
        self.set_anchor(self._x0, self._g_target)

    def _ensure_shift(self):
        if self._shift is None:
            self.counter.add(1)
            self._shift = self._g_target - self.base._gradient(self._x0)

    def _gradient(self, y):
        self._ensure_shift()
        return self.base._gradient(y) + self._shift

    def _hess_action(self, y, v):
        return self.base._hess_action(y, v)


class GalerkinObjective(Objective):
    """Quadratic coarse model: the upper-level model at prolongated points.

    h(y) = (Rg_f)ᵀ(y - y0) + ½ (y - y0)ᵀ R H P (y - y0) for a restriction R.
    The default takes R = Pᵀ, so the entry gradient is Pᵀ g_f — the same
    first-order anchor the shifted coarse objective uses, which keeps the
    no-gain measures of the two coarse models on one scale.  Passing an
    explicit ``restriction`` (for example the pair's scaled transpose)
    gives the plain restricted model instead.  Curvature goes through the
    upper level's Hessian action at the entry point; evaluations are
    charged to this level's counter.  Composes when the upper level is
    itself such a model.
    """

    def __init__(self, counter, parent, pair, x_fine, y0, g_fine,
                 restriction=None):
        super().__init__(pair.n_coarse, counter)
        self.parent = parent
        self.curvature_charge = parent.curvature_charge
        self.P = pair.P
        self.Rt = restriction
        self.x_fine = np.array(x_fine, dtype=float, copy=True)
        self.y0 = np.array(y0, dtype=float, copy=True)
        self.g0 = np.asarray(self._restrict(np.asarray(g_fine, dtype=float)))
        self.set_anchor(self.y0, self.g0)

    def _restrict(self, v):
        return self.P.T @ v if self.Rt is None else self.Rt @ v

    def _gradient(self, y):
        dy = np.asarray(y, dtype=float) - self.y0
        return self.g0 + self._restrict(self.parent._hess_action(
            self.x_fine, self.P @ dy))

    def _hess_action(self, y, v):
        return self._restrict(self.parent._hess_action(self.x_fine,
                                                       self.P @ v))


class MultilevelEngine:
    """Per-level objectives, schedules, and the recursive descent step."""

    def __init__(self, hierarchy, params, ledger, *, pre=3, post=3,
                 coarsest=5, coarse_model="tau", truncation=False,
                 noise=None, seed=0, checks=None):
        if coarse_model not in ("tau", "galerkin"):
            raise ValueError(f"unknown coarse model {coarse_model!r}")
        self.hierarchy = hierarchy
        self.params = params
        self.ledger = ledger
        self.pre = int(pre)
        self.post = int(post)
        self.coarsest = int(coarsest)
        self.coarse_model = coarse_model
        self.truncation = bool(truncation)
        self.noise = noise if noise is not None else NoiseSchedule()
        self.seed = int(seed)
        self.checks = checks
        n_top = hierarchy.finest.n
        self.counters = {
            k: ledger.counter(f"level_{k}", p.n / n_top)
            for k, p in enumerate(hierarchy.levels)
        }
        self._objectives = {}

    def level_objective(self, k):
        if k not in self._objectives:
            problem = self.hierarchy.levels[k]
            if self.noise.active:
                obj = NoisyObjective(problem, self.counters[k], self.noise,
                                     self.seed, stream=k)
            else:
                obj = ProblemObjective(problem, self.counters[k])
            self._objectives[k] = obj
        return self._objectives[k]

    def schedule_for(self, level):
        if level == 0 and self.hierarchy.depth > 1:
            return ["taylor"] * self.coarsest
        if level == 0:
            return ["taylor"] * (self.pre + self.post)
        return ["taylor"] * self.pre + ["recursive"] + ["taylor"] * self.post

    def recurse_callback(self, level):
        if level == 0:
            return None
        return lambda ctx: self.descend(ctx, level)[0]

    def descend(self, ctx, level):
        """One recursive step from ``level``; returns (step, lower status)."""
        st = ctx.state
        zero = np.zeros_like(ctx.x)
        if st.first_order <= 0.0 or not np.any(st.s_lin):
            return zero, "skip"
        pair = self.hierarchy.transfers[level]
        if self.truncation:
            active = ctx.box.active_mask(ctx.x)
            pair = truncate(pair, active)
        x0c, w0c = restrict_state(pair, ctx.x, st.w, self.params.weight_floor)
        box_c = lower_level_bounds(pair.P, pair.sigma, ctx.x, x0c, ctx.box)
        gain_floor = self.params.gain_fraction * st.first_order
        delta_cap = self.params.scale_growth * float(np.linalg.norm(st.s_lin))
        if self.coarse_model == "galerkin":
            obj_c = GalerkinObjective(self.counters[level - 1], ctx.objective,
                                      pair, ctx.x, x0c, st.g)
        else:
            base = self.level_objective(level - 1)
            obj_c = TauCorrectedObjective(base, x0c, pair.P.T @ st.g)
        res = run_level(
            obj_c, box_c, x0c, w0c, gain_floor, delta_cap,
            self.schedule_for(level - 1), self.params,
            top=False, recurse=self.recurse_callback(level - 1),
            checks=self.checks, level_tag=f"level_{level - 1}",
        )
        if res.status == "nogain":
            return zero, "nogain"
        return np.asarray(pair.P @ (res.x - x0c)), res.status


class _SolverBase:
    """Shared configuration and the top-level cycle loop."""

    cycle_kind = "cycle"

    def __init__(self, params=None, stop=None, noise=None, seed=0,
                 record_values=False, debug_checks=False):
        self.params = params if params is not None else StepParams()
        self.params.validate()
        self.stop = stop if stop is not None else StopRule()
        self.noise = noise if noise is not None else NoiseSchedule()
        self.seed = int(seed)
        self.record_values = bool(record_values)
        self.debug_checks = bool(debug_checks)

    def get_params(self):
        out = {
            "seed": self.seed,
            "record_values": self.record_values,
            "stop": {"tol_abs": self.stop.tol_abs,
                     "tol_rel": self.stop.tol_rel,
                     "max_cycles": self.stop.max_cycles},
            "noise": {"kind": self.noise.kind,
                      "sigma2": self.noise.sigma2,
                      "decay": self.noise.decay},
        }
        out.update({k: getattr(self.params, k)
                    for k in self.params.__dataclass_fields__})
        return out

    def _meta(self, problem, extra=None):
        cfg = self.get_params()
        if extra:
            cfg.update(extra)
        meta = {
            "solver": self.name,
            "problem": problem.name,
            "n": problem.n,
            "config": cfg,
            "config_hash": config_hash({"solver": self.name, **cfg}),
        }
        rev = git_revision()
        if rev:
            meta["git_revision"] = rev
        return meta

    def _run_cycles(self, engine, problem, x, w, trace, cycle_body):
        """Drive cycles until the stop rule fires; fill the trace."""
        box = problem.box
        ledger = engine.ledger
        xi0 = criticality_xi(x, problem.gradient(x), box)
        trace.meta["xi_initial"] = xi0
        event_large_d0 = None
        converged = xi0 <= self.stop.tol_abs
        cycle = 0
        t0 = time.perf_counter()
        with objective_guard():
            while not converged and cycle < self.stop.max_cycles:
                seen = {}

                def monitor(k, kind, state, x_new, _seen=seen):
                    _seen["d_norm"] = state.d_norm
                    if "d0_norm" not in _seen:
                        _seen["d0_norm"] = state.d_norm

                extra = {}
                x, w = cycle_body(cycle, x, w, monitor, extra)
                if event_large_d0 is None and "d0_norm" in seen:
                    event_large_d0 = bool(
                        seen["d0_norm"] ** 2 >= self.params.init_weight)
                xi = criticality_xi(x, problem.gradient(x), box)
                f = None
                if self.record_values:
                    with reporting_pass():
                        f = problem.value(x)
                kind = extra.pop("kind", self.cycle_kind)
                trace.add_cycle(cycle=cycle, kind=kind,
                                d_norm=seen.get("d_norm", np.nan), xi=xi,
                                cost=ledger.total(),
                                wall=time.perf_counter() - t0, f=f, **extra)
                cycle += 1
                converged = self.stop.met(xi, xi0)
        xi_final = trace.cycles[-1]["xi"] if trace.cycles else xi0
        trace.final = {
            "converged": bool(converged),
            "reason": "tolerance" if converged else "budget",
            "cycles": cycle,
            "xi": float(xi_final),
            "cost": ledger.total(),
            "counts": ledger.counts(),
            "event_large_initial_d": event_large_d0,
        }
        return x


class SingleLevelSolver(_SolverBase):
    """Plain one-level loop; one trace row per iteration."""

    name = "adagb2"
    cycle_kind = "taylor"

    def solve(self, problem, x0=None):
        box = problem.box
        ledger = CostLedger()
        ledger.metadata["curvature_fd_charge"] = (
            "finite-difference curvature charged as 2 evaluation "
            "equivalents; 1 with an analytic Hessian action")
        hierarchy = Hierarchy([problem], [])
        checks = InvariantChecks() if self.debug_checks else None
        engine = MultilevelEngine(hierarchy, self.params, ledger, pre=1,
                                  post=0, noise=self.noise, seed=self.seed,
                                  checks=checks)
        obj = engine.level_objective(0)
        x = box.project(as_vector(x0, problem.n, "x0") if x0 is not None
                        else problem.initial_point())
        w = np.full(problem.n, self.params.init_weight ** 2)
        trace = Trace(meta=self._meta(problem))

        def cycle_body(cycle, x, w, monitor, extra):
            res = run_level(obj, box, x, w, 0.0, np.inf, ["taylor"],
                            self.params, top=True, checks=checks,
                            monitor=monitor, level_tag="level_0")
            return res.x, res.w

        x = self._run_cycles(engine, problem, x, w, trace, cycle_body)
        trace.final["x"] = x
        return trace


class MultilevelSolver(_SolverBase):
    """Recursive multilevel loop; one trace row per V-cycle."""

    name = "ml"
    cycle_kind = "vcycle"

    def __init__(self, pre=3, post=3, coarsest=5, coarse_model="tau",
                 truncation=False, **kwargs):
        super().__init__(**kwargs)
        self.pre = int(pre)
        self.post = int(post)
        self.coarsest = int(coarsest)
        self.coarse_model = coarse_model
        self.truncation = bool(truncation)

    def get_params(self):
        out = super().get_params()
        out.update({"pre": self.pre, "post": self.post,
                    "coarsest": self.coarsest,
                    "coarse_model": self.coarse_model,
                    "truncation": self.truncation})
        return out

    def solve(self, hierarchy, x0=None):
        problem = hierarchy.finest
        box = problem.box
        top = hierarchy.depth - 1
        ledger = CostLedger()
        ledger.metadata["curvature_fd_charge"] = (
            "finite-difference curvature charged as 2 evaluation "
            "equivalents; 1 with an analytic Hessian action")
        checks = InvariantChecks() if self.debug_checks else None
        engine = MultilevelEngine(
            hierarchy, self.params, ledger, pre=self.pre, post=self.post,
            coarsest=self.coarsest, coarse_model=self.coarse_model,
            truncation=self.truncation, noise=self.noise, seed=self.seed,
            checks=checks)
        obj = engine.level_objective(top)
        x = box.project(as_vector(x0, problem.n, "x0") if x0 is not None
                        else problem.initial_point())
        w = np.full(problem.n, self.params.init_weight ** 2)
        trace = Trace(meta=self._meta(
            problem, extra={"depth": hierarchy.depth,
                            "level_sizes": [p.n for p in hierarchy.levels]}))
        schedule = engine.schedule_for(top)
        rec = engine.recurse_callback(top)

        def cycle_body(cycle, x, w, monitor, extra):
            res = run_level(obj, box, x, w, 0.0, np.inf, schedule,
                            self.params, top=True, recurse=rec,
                            checks=checks, monitor=monitor,
                            level_tag=f"level_{top}")
            return res.x, res.w

        x = self._run_cycles(engine, problem, x, w, trace, cycle_body)
        trace.final["x"] = x
        return trace

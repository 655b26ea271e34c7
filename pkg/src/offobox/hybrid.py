"""Hybrid solver: coarse-level blocks interleaved with decomposition blocks.

On a two-level hierarchy (coarse grid typically 8x coarser), each block of
top-level iterations runs one recursive iteration into the tau-corrected
coarse model followed by a train of decomposition iterations.  When either
branch reports no gain, a plain fine-level Taylor iteration is substituted,
so progress never stalls on a skipped descent.  With no decomposition
iterations the method is the two-level multilevel solver; with no coarse
budget it is the decomposition solver — both degeneracies delegate.
"""

from __future__ import annotations

import numpy as np

from .core import CostLedger, as_vector
from .multilevel import (
    InvariantChecks,
    MultilevelEngine,
    MultilevelSolver,
    _SolverBase,
    run_level,
)
from .schwarz import (
    VARIANTS,
    DecompositionSolver,
    DecompositionStepper,
    build_block_covering,
    build_operators,
)
from .steps import taylor_step
from .trace import Trace

__all__ = ["HybridSolver"]


class HybridSolver(_SolverBase):
    """Alternating coarse-level and decomposition iterations on two levels."""

    name = "ml-dd"
    cycle_kind = "coarse"

    def __init__(self, num_subdomains=4, overlap=2, variant="wras",
                 coarse_iters=10, dd_iters=10, subdomain_steps=10,
                 divide_gain=True, n_workers=0, coarse_first=True, **kwargs):
        super().__init__(**kwargs)
        self.num_subdomains = int(num_subdomains)
        self.overlap = int(overlap)
        self.variant = str(variant).lower()
        self.coarse_iters = int(coarse_iters)
        self.dd_iters = int(dd_iters)
        self.subdomain_steps = int(subdomain_steps)
        self.divide_gain = bool(divide_gain)
        self.n_workers = int(n_workers)
        self.coarse_first = bool(coarse_first)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown Schwarz variant {variant!r}")
        if self.coarse_iters < 0 or self.dd_iters < 0:
            raise ValueError("iteration counts must be nonnegative")

    def get_params(self):
        out = super().get_params()
        out.update({
            "num_subdomains": self.num_subdomains,
            "overlap": self.overlap,
            "variant": self.variant,
            "coarse_iters": self.coarse_iters,
            "dd_iters": self.dd_iters,
            "subdomain_steps": self.subdomain_steps,
            "divide_gain": self.divide_gain,
            "n_workers": self.n_workers,
            "coarse_first": self.coarse_first,
        })
        return out

    def _shared_kwargs(self):
        return dict(params=self.params, stop=self.stop, noise=self.noise,
                    seed=self.seed, record_values=self.record_values,
                    debug_checks=self.debug_checks)

    def solve(self, hierarchy, x0=None):
        if hierarchy.depth != 2:
            raise ValueError(
                f"hybrid solver needs a 2-level hierarchy, got depth "
                f"{hierarchy.depth}")
        problem = hierarchy.finest
        if self.dd_iters == 0:
            ml = MultilevelSolver(pre=0, post=0, coarsest=self.coarse_iters,
                                  coarse_model="tau", **self._shared_kwargs())
            trace = ml.solve(hierarchy, x0)
            trace.meta["requested_solver"] = self.name
            return trace
        if self.coarse_iters == 0:
            dd = DecompositionSolver(
                num_subdomains=self.num_subdomains, overlap=self.overlap,
                variant=self.variant, subdomain_steps=self.subdomain_steps,
                dd_per_taylor=self.dd_iters, divide_gain=self.divide_gain,
                n_workers=self.n_workers, **self._shared_kwargs())
            trace = dd.solve(problem, x0)
            trace.meta["requested_solver"] = self.name
            return trace

        box = problem.box
        covering = build_block_covering(problem.n, self.num_subdomains,
                                        self.overlap,
                                        coords=problem.strip_coords)
        ops = build_operators(covering, self.variant)
        ledger = CostLedger()
        ledger.metadata["curvature_fd_charge"] = (
            "finite-difference curvature charged as 2 evaluation "
            "equivalents; 1 with an analytic Hessian action")
        checks = InvariantChecks() if self.debug_checks else None
        engine = MultilevelEngine(
            hierarchy, self.params, ledger, pre=0, post=0,
            coarsest=self.coarse_iters, coarse_model="tau",
            noise=self.noise, seed=self.seed, checks=checks)
        obj = engine.level_objective(1)
        sub_counter = ledger.counter("subdomains",
                                     covering.max_size / problem.n)
        stepper = DecompositionStepper(
            problem, ops, self.params, sub_counter,
            subdomain_steps=self.subdomain_steps,
            divide_gain=self.divide_gain, n_workers=self.n_workers,
            checks=checks, noise=self.noise if self.noise.active else None,
            seed=self.seed)
        x = box.project(as_vector(x0, problem.n, "x0") if x0 is not None
                        else problem.initial_point())
        w = np.full(problem.n, self.params.init_weight ** 2)
        trace = Trace(meta=self._meta(
            problem, extra={"level_sizes": [p.n for p in hierarchy.levels],
                            "subdomain_sizes": [op.size for op in ops]}))
        block = ["coarse"] + ["dd"] * self.dd_iters
        if not self.coarse_first:
            block = block[1:] + block[:1]

        def cycle_body(cycle, x, w, monitor, extra):
            token = block[cycle % len(block)]
            note = {}

            def coarse_cb(ctx):
                s, status = engine.descend(ctx, 1)
                if status == "nogain":
                    note["substituted"] = True
                    s, _, _ = taylor_step(ctx.x, ctx.state.g,
                                          ctx.state.delta, ctx.box,
                                          ctx.objective, self.params)
                return s

            def dd_cb(ctx):
                s = stepper(ctx)
                if stepper.last["all_nogain"]:
                    note["substituted"] = True
                    s, _, _ = taylor_step(ctx.x, ctx.state.g,
                                          ctx.state.delta, ctx.box,
                                          ctx.objective, self.params)
                return s

            recurse = coarse_cb if token == "coarse" else dd_cb
            res = run_level(obj, box, x, w, 0.0, np.inf, ["recursive"],
                            self.params, top=True, recurse=recurse,
                            checks=checks, monitor=monitor,
                            level_tag="level_1")
            extra["kind"] = token
            if note.get("substituted"):
                extra["taylor_substitute"] = True
            if token == "dd" and stepper.last:
                extra["sub_nogain"] = int(sum(
                    t == "nogain" for t in stepper.last["statuses"]))
                if stepper.last["unequal_counts"]:
                    extra["unequal_counts"] = True
            return res.x, res.w

        x = self._run_cycles(engine, problem, x, w, trace, cycle_body)
        trace.final["x"] = x
        return trace

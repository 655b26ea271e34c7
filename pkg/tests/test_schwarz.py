"""Coverings, Schwarz operator algebra, subdomain solves, the DD driver."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from offobox.core import BoundBox, EvalCounter, ProblemObjective, \
    criticality_d
from offobox.multilevel import IterationContext, IterationState, StopRule, \
    run_level
from offobox.noise import NoiseSchedule
from offobox.schwarz import (
    VARIANTS,
    Covering,
    DecompositionSolver,
    DecompositionStepper,
    SubdomainObjective,
    assembled_prolongation,
    bound_identity_error,
    build_block_covering,
    build_operators,
    restrict_bounds,
)
from offobox.steps import StepParams, linear_step, update_weights
from offobox.problems import membrane, random_obstacle_instance, \
    synthetic_quadratic_obstacle


def quad_problem(A, b, lower=None, upper=None):
    n = len(b)
    if lower is None:
        lower = np.full(n, -np.inf)
    if upper is None:
        upper = np.full(n, np.inf)
    return synthetic_quadratic_obstacle(A, b, lower, upper)


def make_context(problem, x, w_prev=None, params=None):
    """Genuine top-level iteration quantities at x, as the driver sees them."""
    params = params or StepParams()
    g = problem.gradient(x)
    d = criticality_d(x, g, problem.box)
    w0 = w_prev if w_prev is not None else np.full(problem.n,
                                                   params.init_weight ** 2)
    w, delta = update_weights(w0, d, params.weight_floor)
    s_lin = linear_step(x, g, delta, problem.box)
    state = IterationState(g=g, d=d, w=w, delta=delta, s_lin=s_lin,
                           first_order=float(np.abs(d) @ delta))
    obj = ProblemObjective(problem, EvalCounter())
    return IterationContext(k=0, x=x, box=problem.box, objective=obj,
                            state=state)


def random_covering(rng):
    n = int(rng.integers(4, 40))
    m = int(rng.integers(1, min(n, 6) + 1))
    o = int(rng.integers(0, 3))
    return build_block_covering(n, m, o)


class TestCovering:
    def test_two_blocks_no_overlap(self):
        cov = build_block_covering(8, 2, 0)
        assert_array_equal(cov.domains[0], np.arange(4))
        assert_array_equal(cov.domains[1], np.arange(4, 8))
        assert_array_equal(cov.partition[0], np.arange(4))
        assert_array_equal(cov.theta, np.ones(8))

    def test_one_overlap_layer(self):
        cov = build_block_covering(8, 2, 1)
        assert_array_equal(cov.domains[0], np.arange(5))  # extends to node 4
        assert_array_equal(cov.domains[1], np.arange(3, 8))
        assert_array_equal(cov.partition[0], np.arange(4))  # unchanged
        assert_array_equal(cov.theta, [1, 1, 1, 2, 2, 1, 1, 1])
        assert cov.max_size == 5

    def test_layer_coordinates_stay_together(self):
        # grid strips: both dof of one layer land in the same block
        coords = np.array([0, 0, 1, 1, 2, 2])
        cov = build_block_covering(6, 3, 0, coords=coords)
        assert [d.tolist() for d in cov.domains] == [[0, 1], [2, 3], [4, 5]]

    def test_oversplit_rejected(self):
        with pytest.raises(ValueError):
            build_block_covering(4, 5, 0)
        with pytest.raises(ValueError):
            build_block_covering(4, 3, 0, coords=np.array([0, 0, 1, 1]))

    def test_validation(self):
        idx = np.arange(4)
        with pytest.raises(ValueError):  # gap at variable 3
            Covering(n=4, domains=[idx[:2], idx[2:3]],
                     partition=[idx[:2], idx[2:3]])
        with pytest.raises(ValueError):  # partition overlaps
            Covering(n=4, domains=[idx, idx],
                     partition=[idx[:3], idx[2:]])
        with pytest.raises(ValueError):  # partition outside its domain
            Covering(n=4, domains=[idx[:2], idx[2:]],
                     partition=[idx[2:], idx[:2]])


class TestOperators:
    def test_sum_pr_is_multiplicity_or_identity(self):
        rng = np.random.default_rng(60)
        for _ in range(25):
            cov = random_covering(rng)
            theta = cov.theta.astype(float)
            for variant in VARIANTS:
                ops = build_operators(cov, variant)
                total = sum((op.P @ op.R).toarray() for op in ops)
                expect = np.diag(theta) if variant == "as" else np.eye(cov.n)
                assert_allclose(total, expect, atol=1e-14)

    def test_weighted_rows_halve_on_double_coverage(self):
        cov = build_block_covering(8, 2, 1)
        ops = build_operators(cov, "wras")
        P0 = ops[0].P.toarray()
        assert P0[3, 3] == 0.5 and P0[4, 4] == 0.5  # theta = 2 there
        assert P0[0, 0] == 1.0

    def test_restricted_prolongation_supported_on_partition(self):
        cov = build_block_covering(8, 2, 2)
        for op in build_operators(cov, "ras"):
            rows = np.flatnonzero(np.diff(op.P.tocsr().indptr))
            assert np.all(np.isin(rows, op.own))

    def test_assembled_infinity_norm(self):
        rng = np.random.default_rng(61)
        for _ in range(25):
            cov = random_covering(rng)
            theta_max = float(cov.theta.max())
            for variant in VARIANTS:
                ops = build_operators(cov, variant)
                norm = np.abs(assembled_prolongation(ops)).sum(axis=1).max()
                expect = 1.0 if variant in ("ras", "rash", "wras") \
                    else theta_max
                assert norm == expect

    def test_restriction_picks_subvector(self):
        cov = Covering(n=6, domains=[np.array([2, 5]),
                                     np.array([0, 1, 3, 4])],
                       partition=[np.array([2, 5]),
                                  np.array([0, 1, 3, 4])])
        op = build_operators(cov, "as")[0]
        x = np.array([9.0, 8.0, 7.0, 6.0, 5.0, 4.0])
        assert_array_equal(op.R @ x, [7.0, 4.0])

    def test_bound_scale_by_variant(self):
        cov = build_block_covering(8, 2, 1)
        for variant in VARIANTS:
            op = build_operators(cov, variant)[0]
            if variant == "wash":
                assert_array_equal(op.bound_scale, cov.theta.astype(float))
            else:
                assert_array_equal(op.bound_scale, np.ones(8))

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            build_operators(build_block_covering(4, 2, 0), "jacobi")


class TestRestrictBounds:
    def test_selection_keeps_bounds(self):
        cov = build_block_covering(6, 2, 1)
        op = build_operators(cov, "as")[0]
        lo = np.array([-1.0, -2.0, -np.inf, -4.0, -5.0, -6.0])
        hi = np.array([1.0, np.inf, 3.0, 4.0, 5.0, 6.0])
        sub = restrict_bounds(op.R, BoundBox(lo, hi))
        assert_array_equal(sub.lower, lo[op.indices])
        assert_array_equal(sub.upper, hi[op.indices])

    def test_harmonic_weights_divide_bounds(self):
        cov = build_block_covering(8, 2, 1)
        op = build_operators(cov, "wash")[0]  # R = W^T
        lo = -np.arange(1.0, 9.0)
        sub = restrict_bounds(op.R, BoundBox(lo, np.full(8, np.inf)))
        expect = lo[op.indices] / cov.theta[op.indices]
        assert_array_equal(sub.lower, expect)  # the doubly covered rows halve
        assert np.all(np.isinf(sub.upper))

    def test_direct_and_derived_bounds_agree(self):
        # the restricted box equals the generic interlevel construction:
        # exactly for the selection variants, to rounding for the weighted one
        rng = np.random.default_rng(62)
        for _ in range(60):
            cov = random_covering(rng)
            lo = rng.normal(size=cov.n) - rng.uniform(0.05, 1.0, cov.n)
            hi = lo + rng.uniform(0.1, 2.0, cov.n)
            lo[rng.random(cov.n) < 0.2] = -np.inf
            hi[rng.random(cov.n) < 0.2] = np.inf
            box = BoundBox(lo, hi)
            for variant in VARIANTS:
                for op in build_operators(cov, variant):
                    err = bound_identity_error(op, box)
                    if variant == "wash":
                        assert err < 1e-14
                    else:
                        assert err == 0.0


class TestSubdomainObjective:
    def setup_method(self):
        rng = np.random.default_rng(63)
        A = rng.normal(size=(6, 6))
        self.A = A @ A.T + 6 * np.eye(6)
        self.b = rng.normal(size=6)
        self.problem = quad_problem(self.A, self.b)
        self.x = rng.normal(size=6)

    def test_whole_domain_is_identity_splice(self):
        idx = np.arange(6)
        obj = SubdomainObjective(self.problem, idx, self.x, self.x[idx],
                                 EvalCounter())
        y = self.x + 0.3
        assert_array_equal(obj.splice(y), y)
        assert_allclose(obj.gradient(y), self.problem.gradient(y),
                        rtol=1e-15)

    def test_frozen_complement_block_gradient(self):
        idx = np.array([1, 3, 4])
        obj = SubdomainObjective(self.problem, idx, self.x, self.x[idx],
                                 EvalCounter())
        y = self.x[idx] + np.array([0.2, -0.1, 0.4])
        full = self.x.copy()
        full[idx] = y
        assert_array_equal(obj.splice(y), full)
        assert_allclose(obj.gradient(y),
                        (self.A @ full - self.b)[idx], rtol=1e-13)

    def test_offset_entry_point_recovers_x(self):
        # a weighted restriction hands over y0 != x[D]; splicing y0 back
        # must reproduce the untouched fine point
        idx = np.array([0, 2, 5])
        y0 = 0.5 * self.x[idx]
        obj = SubdomainObjective(self.problem, idx, self.x, y0,
                                 EvalCounter())
        assert_array_equal(obj.splice(y0), self.x)

    def test_curvature_matches_block_quadratic(self):
        idx = np.array([1, 2])
        obj = SubdomainObjective(self.problem, idx, self.x, self.x[idx],
                                 EvalCounter())
        v = np.array([0.7, -1.1])
        expect = float(v @ (self.A[np.ix_(idx, idx)] @ v))
        assert_allclose(obj.curvature(self.x[idx], v), expect, rtol=1e-13)

    def test_finite_difference_fallback(self):
        prob = quad_problem(self.A, self.b)
        prob.hess_vec = None
        idx = np.array([0, 3])
        obj = SubdomainObjective(prob, idx, self.x, self.x[idx],
                                 EvalCounter())
        v = np.array([1.0, -2.0])
        expect = float(v @ (self.A[np.ix_(idx, idx)] @ v))
        assert_allclose(obj.curvature(self.x[idx], v), expect, rtol=1e-6)


class TestDecompositionStepper:
    def make_stepper(self, problem, variant="wras", m=3, overlap=1,
                     params=None, **kw):
        cov = build_block_covering(problem.n, m, overlap)
        ops = build_operators(cov, variant)
        counter = EvalCounter("subdomains")
        stepper = DecompositionStepper(problem, ops, params or StepParams(),
                                       counter, **kw)
        return stepper, counter

    def test_all_nogain_returns_zero_at_zero_cost(self):
        prob = random_obstacle_instance(4, n=9)
        ctx = make_context(prob, prob.initial_point())
        ctx.state.first_order = 1e12  # inflate the contract beyond reach
        stepper, counter = self.make_stepper(prob)
        s = stepper(ctx)
        assert_array_equal(s, np.zeros(prob.n))
        assert stepper.last["all_nogain"] is True
        assert counter.count == 0

    def test_critical_point_skips(self):
        prob = random_obstacle_instance(4, n=9)
        ctx = make_context(prob, prob.initial_point())
        ctx.state.first_order = 0.0
        stepper, _ = self.make_stepper(prob)
        assert not np.any(stepper(ctx))
        assert stepper.last["statuses"] == ["skip"] * 3

    def test_single_domain_equals_plain_budgeted_loop(self):
        # M=1 with a selection restriction: the decomposition step is the
        # inherited-contract loop on the whole problem, verbatim
        prob = random_obstacle_instance(7, n=6)
        x = prob.box.project(np.full(6, 0.1))
        ctx = make_context(prob, x)
        # re-accumulating the entry direction shrinks the radii by ~1/sqrt 2,
        # so a floor fraction below that keeps the subdomain engaged
        params = StepParams(gain_fraction=0.5)
        stepper, _ = self.make_stepper(prob, variant="as", m=1, overlap=0,
                                       subdomain_steps=4, params=params)
        corr = stepper(ctx)
        st = ctx.state
        gain_floor = 0.5 * st.first_order
        delta_cap = 10.0 * float(np.linalg.norm(st.s_lin))
        obj = ProblemObjective(prob, EvalCounter())
        obj.set_anchor(x, st.g)
        res = run_level(obj, prob.box, x, st.w, gain_floor, delta_cap,
                        ["taylor"] * 4, params, top=False)
        assert_array_equal(corr, res.x - x)
        assert np.any(corr)

    def test_separable_blocks_solve_independently(self):
        # diagonal quadratic + disjoint blocks: freezing the complement
        # changes nothing, so each block matches its solo run
        rng = np.random.default_rng(64)
        A = np.diag(rng.uniform(0.5, 3.0, size=6))
        prob = quad_problem(A, rng.normal(size=6),
                            lower=np.full(6, -2.0), upper=np.full(6, 2.0))
        x = prob.box.project(rng.normal(size=6))
        ctx = make_context(prob, x)
        params = StepParams(gain_fraction=0.3)
        stepper, _ = self.make_stepper(prob, variant="as", m=3, overlap=0,
                                       subdomain_steps=3, divide_gain=False,
                                       params=params)
        corr = stepper(ctx)
        assert np.any(corr)  # at least one block must do real work
        st = ctx.state
        gain_floor = 0.3 * st.first_order
        delta_cap = 10.0 * float(np.linalg.norm(st.s_lin))
        for op in stepper.ops:
            sub = SubdomainObjective(prob, op.indices, x, x[op.indices],
                                     EvalCounter())
            sub.set_anchor(x[op.indices], st.g[op.indices])
            res = run_level(sub, restrict_bounds(op.R, prob.box),
                            x[op.indices],
                            np.maximum(op.R @ st.w, 1e-12),
                            gain_floor, delta_cap, ["taylor"] * 3,
                            params, top=False)
            expect = np.zeros(6) if res.status == "nogain" \
                else res.x - x[op.indices]
            if res.status == "nogain":
                assert not np.any(corr[op.indices])
            else:
                assert_array_equal(corr[op.indices], expect)

    def test_worker_count_invariance(self):
        prob = membrane(8)
        x = prob.initial_point()
        ctx = make_context(prob, x)
        serial, c0 = self.make_stepper(prob, m=4, overlap=1, n_workers=0)
        threaded, c1 = self.make_stepper(prob, m=4, overlap=1, n_workers=4)
        assert_array_equal(serial(ctx), threaded(ctx))
        assert serial.last == threaded.last
        assert c0.count == c1.count

    def test_parallel_cost_is_the_largest_count(self):
        prob = membrane(8)
        ctx = make_context(prob, prob.initial_point())
        stepper, counter = self.make_stepper(prob, m=4, overlap=1)
        stepper(ctx)
        assert counter.count == max(stepper.last["counts"])

    def test_unequal_counts_flagged(self):
        # one block sits at its unconstrained optimum and no-gains early
        A = np.eye(4)
        b = np.array([0.0, 0.0, 3.0, 3.0])
        prob = quad_problem(A, b)
        x = np.zeros(4)  # first block solved, second far off
        ctx = make_context(prob, x)
        stepper, _ = self.make_stepper(prob, variant="as", m=2, overlap=0,
                                       subdomain_steps=3, divide_gain=True)
        stepper(ctx)
        assert stepper.last["unequal_counts"] is True
        assert stepper.last["counts"][0] < stepper.last["counts"][1]


class TestDecompositionSolver:
    def test_block_structure_and_extras(self):
        prob = random_obstacle_instance(11, n=10)
        tr = DecompositionSolver(
            num_subdomains=2, overlap=1, dd_per_taylor=2,
            stop=StopRule(tol_abs=1e-14, max_cycles=6)).solve(prob)
        kinds = [row["kind"] for row in tr.cycles]
        assert kinds == ["dd", "dd", "taylor", "dd", "dd", "taylor"]
        for row in tr.cycles:
            assert ("sub_nogain" in row) == (row["kind"] == "dd")

    def test_cost_pools_parallel_subdomain_stream(self):
        prob = membrane(8)
        tr = DecompositionSolver(num_subdomains=4, overlap=1,
                                 stop=StopRule(max_cycles=20),
                                 debug_checks=True).solve(prob)
        counts = tr.final["counts"]
        sizes = tr.meta["config"]["subdomain_sizes"]
        assert_allclose(tr.final["cost"],
                        counts["level_0"]
                        + counts["subdomains"] * max(sizes) / prob.n,
                        rtol=1e-12)
        assert tr.final["xi"] < tr.meta["xi_initial"]
        assert prob.box.contains(np.asarray(tr.final["x"]))

    def test_worker_count_and_noise_determinism(self):
        prob = membrane(8)
        sched = NoiseSchedule(kind="constant", sigma2=1e-8)
        kw = dict(num_subdomains=4, overlap=1,
                  stop=StopRule(max_cycles=10), noise=sched, seed=3)
        a = DecompositionSolver(n_workers=0, **kw).solve(prob)
        b = DecompositionSolver(n_workers=4, **kw).solve(prob)
        assert_array_equal(a.final["x"], b.final["x"])
        assert a.series("d_norm").tolist() == b.series("d_norm").tolist()

    def test_pure_taylor_mode_matches_single_level(self):
        from offobox.multilevel import SingleLevelSolver
        prob = random_obstacle_instance(2, n=7)
        stop = StopRule(tol_abs=1e-9, max_cycles=40)
        a = SingleLevelSolver(stop=stop).solve(prob)
        b = DecompositionSolver(dd_per_taylor=0, stop=stop).solve(prob)
        assert_array_equal(a.final["x"], b.final["x"])
        assert a.series("xi").tolist() == b.series("xi").tolist()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DecompositionSolver(variant="gauss")
        with pytest.raises(ValueError):
            DecompositionSolver(subdomain_steps=0)
        with pytest.raises(ValueError):
            DecompositionSolver(dd_per_taylor=-1)

"""Hybrid coarse + decomposition driver and its degenerate delegations."""

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from offobox.hybrid import HybridSolver
from offobox.multilevel import MultilevelSolver, StopRule
from offobox.problems import build_hierarchy
from offobox.schwarz import DecompositionSolver


def two_level(n_cells=16, family="membrane"):
    return build_hierarchy(family, n_cells, 2)


class TestDelegation:
    def test_no_dd_budget_is_the_two_level_solver(self):
        hier = two_level()
        stop = StopRule(tol_abs=1e-8, max_cycles=25)
        a = HybridSolver(dd_iters=0, coarse_iters=5, stop=stop).solve(hier)
        b = MultilevelSolver(pre=0, post=0, coarsest=5, coarse_model="tau",
                             stop=stop).solve(hier)
        assert_array_equal(a.final["x"], b.final["x"])
        assert a.series("xi").tolist() == b.series("xi").tolist()
        assert a.series("cost").tolist() == b.series("cost").tolist()
        assert a.meta["requested_solver"] == "ml-dd"
        assert a.meta["solver"] == "ml"

    def test_no_coarse_budget_is_the_decomposition_solver(self):
        hier = two_level()
        stop = StopRule(tol_abs=1e-8, max_cycles=25)
        kw = dict(num_subdomains=4, overlap=1, subdomain_steps=5)
        a = HybridSolver(coarse_iters=0, dd_iters=3, stop=stop,
                         **kw).solve(hier)
        b = DecompositionSolver(dd_per_taylor=3, stop=stop,
                                **kw).solve(hier.finest)
        assert_array_equal(a.final["x"], b.final["x"])
        assert a.series("xi").tolist() == b.series("xi").tolist()
        assert a.meta["requested_solver"] == "ml-dd"
        assert a.meta["solver"] == "dd"


class TestHybridCycle:
    def test_block_order_and_kinds(self):
        hier = two_level()
        stop = StopRule(tol_abs=1e-14, max_cycles=8)
        tr = HybridSolver(coarse_iters=3, dd_iters=3, num_subdomains=4,
                          overlap=1, stop=stop).solve(hier)
        kinds = [row["kind"] for row in tr.cycles]
        assert kinds == ["coarse", "dd", "dd", "dd", "coarse", "dd", "dd",
                         "dd"]
        for row in tr.cycles:
            assert ("sub_nogain" in row) == (row["kind"] == "dd")

    def test_rotated_block_when_dd_first(self):
        hier = two_level()
        tr = HybridSolver(coarse_iters=2, dd_iters=2, num_subdomains=4,
                          overlap=1, coarse_first=False,
                          stop=StopRule(tol_abs=1e-14,
                                        max_cycles=4)).solve(hier)
        assert [row["kind"] for row in tr.cycles] == ["dd", "dd", "coarse",
                                                      "dd"]

    def test_progress_and_feasibility(self):
        hier = two_level()
        tr = HybridSolver(coarse_iters=4, dd_iters=4, num_subdomains=4,
                          overlap=1, debug_checks=True,
                          stop=StopRule(max_cycles=40)).solve(hier)
        assert tr.final["xi"] < tr.meta["xi_initial"]
        assert hier.finest.box.contains(np.asarray(tr.final["x"]))
        counts = tr.final["counts"]
        sizes = tr.meta["config"]["subdomain_sizes"]
        n0 = hier.levels[0].n
        n1 = hier.finest.n
        expect = (counts["level_1"] + counts["level_0"] * n0 / n1
                  + counts["subdomains"] * max(sizes) / n1)
        assert abs(tr.final["cost"] - expect) < 1e-9 * max(1.0, expect)

    def test_substitution_keeps_cycles_moving(self):
        # a near-one gain fraction without the per-block division makes
        # every decomposition block report no gain; the cycle must then fall
        # back to a plain smoothing step instead of stalling
        from offobox.steps import StepParams
        hier = two_level(8)
        tr = HybridSolver(coarse_iters=2, dd_iters=2, num_subdomains=2,
                          overlap=1, divide_gain=False,
                          params=StepParams(gain_fraction=0.999999),
                          stop=StopRule(max_cycles=6)).solve(hier)
        for row in tr.cycles:
            if row["kind"] == "dd":
                assert row.get("sub_nogain") == 2
                assert row.get("taylor_substitute") is True
        # the flat start rejects the first coarse descent as well
        assert tr.cycles[0]["kind"] == "coarse"
        assert tr.cycles[0].get("taylor_substitute") is True
        assert tr.final["xi"] < tr.meta["xi_initial"]

    def test_depth_guard(self):
        hier = build_hierarchy("membrane", 16, 3)
        with pytest.raises(ValueError):
            HybridSolver().solve(hier)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            HybridSolver(variant="smooth")
        with pytest.raises(ValueError):
            HybridSolver(coarse_iters=-1)

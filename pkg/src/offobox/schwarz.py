"""Additive-Schwarz coverings, transfer operators, and the decomposition driver.

Subdomains are contiguous coordinate blocks, optionally extended by overlap
layers; the disjoint unextended blocks form the restriction partition.  Six
classic prolongation/restriction pairings (AS, RAS, WRAS, ASH, RASH, WASH)
are built from the selection matrix U_p, its partition-supported variant
Uhat_p, and the multiplicity-weighted W_p.  The driver runs independent
budgeted solves on frozen-complement subdomain objectives and synchronizes
the prolongated corrections in a fixed order, so results do not depend on
the number of worker threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import BoundBox, CostLedger, EvalCounter, Objective, as_vector
from .multilevel import (
    InvariantChecks,
    MultilevelEngine,
    _SolverBase,
    run_level,
)
from .noise import gaussian_draw
from .problems import Hierarchy
from .trace import Trace
from .transfer import lower_level_bounds

__all__ = [
    "VARIANTS",
    "Covering",
    "DecompositionSolver",
    "DecompositionStepper",
    "SchwarzOperator",
    "SubdomainObjective",
    "assembled_prolongation",
    "bound_identity_error",
    "build_block_covering",
    "build_operators",
    "restrict_bounds",
]

VARIANTS = ("as", "ras", "wras", "ash", "rash", "wash")

#: noise streams for subdomain oracles start here (levels use small ids)
SUBDOMAIN_STREAM_BASE = 1000


@dataclass
class Covering:
    """Overlapping subdomains D_p with a disjoint restriction partition."""

    n: int
    domains: list  # index arrays, possibly overlapping, union = {0..n-1}
    partition: list  # disjoint index arrays, partition[p] subset of domains[p]

    def __post_init__(self):
        seen = np.concatenate(self.domains) if self.domains else np.array([])
        if len(self.domains) != len(self.partition):
            raise ValueError("one partition block per domain required")
        for p, (dom, own) in enumerate(zip(self.domains, self.partition)):
            if dom.size == 0:
                raise ValueError(f"subdomain {p} is empty")
            if not np.all(np.isin(own, dom)):
                raise ValueError(
                    f"partition block {p} is not contained in its domain")
        if not np.array_equal(np.unique(seen), np.arange(self.n)):
            raise ValueError("subdomains do not cover all variables")
        stacked = np.concatenate(self.partition)
        if stacked.size != self.n or np.unique(stacked).size != self.n:
            raise ValueError("restriction partition is not a disjoint cover")

    @property
    def num_subdomains(self):
        return len(self.domains)

    @property
    def theta(self):
        """Per-variable subdomain multiplicity."""
        t = np.zeros(self.n, dtype=int)
        for dom in self.domains:
            t[dom] += 1
        return t

    @property
    def max_size(self):
        return max(dom.size for dom in self.domains)


def build_block_covering(n, num_subdomains, overlap, coords=None):
    """Contiguous coordinate blocks extended by ``overlap`` layers per side.

    ``coords`` assigns each variable a layer coordinate (for grid problems,
    one spatial index); the default chains variables by index.  Blocks split
    the distinct layers evenly; the unextended blocks form the partition.
    """
    n = int(n)
    m = int(num_subdomains)
    o = int(overlap)
    if m < 1 or o < 0:
        raise ValueError("need num_subdomains >= 1 and overlap >= 0")
    if m > n:
        raise ValueError(f"cannot split {n} variables into {m} subdomains")
    coords = np.arange(n) if coords is None else np.asarray(coords)
    if coords.size != n:
        raise ValueError("one coordinate per variable required")
    vals = np.unique(coords)
    if m > vals.size:
        raise ValueError(
            f"cannot split {vals.size} coordinate layers into {m} subdomains")
    layer = np.searchsorted(vals, coords)
    chunks = np.array_split(np.arange(vals.size), m)
    domains, partition = [], []
    for chunk in chunks:
        lo, hi = chunk[0], chunk[-1]
        partition.append(np.flatnonzero((layer >= lo) & (layer <= hi)))
        lo_ext = max(lo - o, 0)
        hi_ext = min(hi + o, vals.size - 1)
        domains.append(np.flatnonzero((layer >= lo_ext) & (layer <= hi_ext)))
    return Covering(n=n, domains=domains, partition=partition)


@dataclass
class SchwarzOperator:
    """Per-subdomain prolongation/restriction with its bound scaling.

    ``bound_scale`` is the per-fine-variable divisor under which the direct
    restriction of bounds (R l, R u) coincides with the generic interlevel
    bound construction: all ones, except the multiplicity for WASH.
    """

    variant: str
    indices: np.ndarray  # D_p
    own: np.ndarray  # partition block
    P: sp.csr_matrix
    R: sp.csr_matrix
    bound_scale: np.ndarray = field(repr=False)

    @property
    def size(self):
        return self.indices.size


def build_operators(covering, variant):
    """The (P, R) pair of every subdomain for one Schwarz variant.

    AS: (U, U^T); RAS: (Uhat, U^T); WRAS: (W, U^T); ASH: (U, Uhat^T);
    RASH: (Uhat, Uhat^T); WASH: (U, W^T), with W = diag(theta)^-1 U and
    Uhat the copy of U supported on the partition rows only.  All entries
    are nonnegative and every column of P has at most one nonzero, so
    products with infinite bounds are safe.
    """
    variant = str(variant).lower()
    if variant not in VARIANTS:
        raise ValueError(f"unknown Schwarz variant {variant!r}; "
                         f"choose from {VARIANTS}")
    n = covering.n
    theta = covering.theta.astype(float)
    ops = []
    for dom, own in zip(covering.domains, covering.partition):
        n_p = dom.size
        cols = np.arange(n_p)
        u = sp.csr_matrix((np.ones(n_p), (dom, cols)), shape=(n, n_p))
        own_mask = np.isin(dom, own)
        uhat = sp.csr_matrix(
            (np.ones(int(own_mask.sum())),
             (dom[own_mask], cols[own_mask])), shape=(n, n_p))
        w = sp.csr_matrix((1.0 / theta[dom], (dom, cols)), shape=(n, n_p))
        pick = {
            "as": (u, u.T),
            "ras": (uhat, u.T),
            "wras": (w, u.T),
            "ash": (u, uhat.T),
            "rash": (uhat, uhat.T),
            "wash": (u, w.T),
        }
        P, R = pick[variant]
        P = P.tocsr()
        P.eliminate_zeros()
        R = R.tocsr()
        R.eliminate_zeros()
        if np.any(np.diff(P.tocsc().indptr) > 1):
            raise AssertionError("prolongation column with several nonzeros")
        scale = theta if variant == "wash" else np.ones(n)
        ops.append(SchwarzOperator(variant=variant, indices=dom, own=own,
                                   P=P, R=R, bound_scale=scale))
    return ops


def assembled_prolongation(ops):
    """Horizontal concatenation [P^(1) ... P^(M)] of the prolongations."""
    return sp.hstack([op.P for op in ops], format="csr")


def restrict_bounds(R, box):
    """Directly restricted subdomain box (R l, R u).

    Every row of R has at most one nonnegative entry, so products with
    infinite bounds are well defined; zero rows pin their variable at 0.
    """
    return BoundBox(R @ box.lower, R @ box.upper)


def _relative_gap(a, b):
    """Componentwise relative deviation; infinities must match exactly."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = np.zeros(a.shape)
    inf_a, inf_b = np.isinf(a), np.isinf(b)
    matched = inf_a & inf_b & (np.sign(a) == np.sign(b))
    out[(inf_a | inf_b) & ~matched] = np.inf
    fin = ~inf_a & ~inf_b
    diff = np.abs(a[fin] - b[fin])
    denom = np.maximum(np.abs(a[fin]), np.abs(b[fin]))
    nz = diff > 0
    out_fin = np.zeros(diff.shape)
    out_fin[nz] = diff[nz] / np.where(denom[nz] > 0, denom[nz], 1.0)
    out[fin] = out_fin
    return out


def bound_identity_error(op, box, x=None):
    """Largest relative gap between direct and derived subdomain bounds.

    Compares (R l, R u) with the generic interlevel bound construction for
    (P, bound_scale) at base point ``x`` (default 0).  Subdomain variables
    whose restriction row is zero are pinned at 0 by the direct route and
    excluded; empty prolongation columns fall back to the direct bounds.
    """
    n = op.P.shape[0]
    x = np.zeros(n) if x is None else np.asarray(x, dtype=float)
    direct = restrict_bounds(op.R, box)
    y0 = op.R @ x
    derived = lower_level_bounds(op.P, op.bound_scale, x, y0, box,
                                 fallback=(direct.lower, direct.upper))
    row_nnz = np.diff(op.R.tocsr().indptr)
    comparable = row_nnz > 0
    gap_lo = _relative_gap(direct.lower, derived.lower)[comparable]
    gap_hi = _relative_gap(direct.upper, derived.upper)[comparable]
    if gap_lo.size == 0:
        return 0.0
    return float(max(gap_lo.max(), gap_hi.max()))


class SubdomainObjective(Objective):
    """Frozen-complement restriction of a problem to one subdomain.

    Subdomain variables move as corrections around the restricted entry
    point: local coordinate j maps to ``x[idx_j] + (y_j - y0_j)`` while all
    other variables stay frozen at x.  When the entry point is the plain
    subvector of x (AS/RAS/WRAS restrictions) this is the direct splice of
    y into x.  Gradients and curvature come from the raw fine problem at
    the spliced point, restricted to the subdomain, and are charged to the
    subdomain's own counter — never to a fine-level stream.
    """

    def __init__(self, problem, indices, x, y0, counter,
                 noise=None, seed=0, stream=0):
        indices = np.asarray(indices)
        super().__init__(indices.size, counter)
        self.problem = problem
        self.indices = indices
        self.x = np.array(x, dtype=float, copy=True)
        self.offset = self.x[indices] - np.asarray(y0, dtype=float)
        self.noise = noise
        self.seed = int(seed) & (2**64 - 1)
        self.stream = int(stream)
        self.calls = 0
        if problem.hess_vec is not None:
            self.curvature_charge = 1

    def splice(self, y):
        full = self.x.copy()
        full[self.indices] = self.offset + y
        return full

    def _raw_gradient(self, y):
        return self.problem.gradient(self.splice(y))[self.indices]

    def _gradient(self, y):
        g = self._raw_gradient(y)
        if self.noise is not None and self.noise.active:
            k = self.calls
            self.calls += 1
            var = self.noise.variance(k)
            if var > 0.0:
                g = g + np.sqrt(var) * gaussian_draw(self.seed, self.stream,
                                                     k, g.size)
        return g

    def _hess_action(self, y, v):
        if self.problem.hess_vec is not None:
            full_v = np.zeros(self.x.size)
            full_v[self.indices] = v
            return self.problem.hess_vec(self.splice(y), full_v)[self.indices]
        ns = float(np.linalg.norm(v))
        if ns == 0.0:
            return np.zeros_like(v)
        h = np.sqrt(np.finfo(float).eps) * max(1.0, float(np.linalg.norm(y)))
        u = v / ns
        dg = self._raw_gradient(y + h * u) - self._raw_gradient(y - h * u)
        return dg * (ns / (2.0 * h))


class DecompositionStepper:
    """One synchronized decomposition step from an iteration context.

    Every subdomain restricts the current point, weights and bounds, runs a
    budgeted Taylor-only loop on its frozen-complement objective under the
    inherited contract, and sends back a prolongated correction; no-gain
    subdomains contribute zero at zero cost.  The corrections are summed in
    ascending subdomain order, so traces are identical for any worker count.
    The pooled counter is charged with the largest per-subdomain count (the
    parallel cost model); unequal counts are flagged.
    """

    def __init__(self, problem, ops, params, counter, subdomain_steps=10,
                 divide_gain=True, n_workers=0, checks=None,
                 noise=None, seed=0):
        self.problem = problem
        self.ops = ops
        self.params = params
        self.counter = counter
        self.steps = int(subdomain_steps)
        self.divide_gain = bool(divide_gain)
        self.n_workers = int(n_workers)
        self.checks = checks
        self.noise = noise
        self.seed = int(seed)
        self.last = {}

    def _solve_one(self, p, ctx, gain_floor, delta_cap):
        op = self.ops[p]
        st = ctx.state
        local = EvalCounter(f"subdomain_{p}")
        y0 = op.R @ ctx.x
        w0 = np.maximum(op.R @ st.w, self.params.weight_floor)
        sub_box = restrict_bounds(op.R, ctx.box)
        obj = SubdomainObjective(self.problem, op.indices, ctx.x, y0, local,
                                 noise=self.noise, seed=self.seed,
                                 stream=SUBDOMAIN_STREAM_BASE + p)
        obj.set_anchor(y0, st.g[op.indices])
        res = run_level(obj, sub_box, y0, w0, gain_floor, delta_cap,
                        ["taylor"] * self.steps, self.params, top=False,
                        checks=self.checks, level_tag=f"subdomain_{p}")
        corr = None if res.status == "nogain" else res.x - y0
        return corr, res.status, local.count

    def __call__(self, ctx):
        st = ctx.state
        m = len(self.ops)
        zero = np.zeros_like(ctx.x)
        delta_cap = self.params.scale_growth * float(np.linalg.norm(st.s_lin))
        if st.first_order <= 0.0 or delta_cap <= 0.0:
            self.last = {"statuses": ["skip"] * m, "counts": [0] * m,
                         "all_nogain": True, "unequal_counts": False}
            return zero
        gain_floor = self.params.gain_fraction * st.first_order
        if self.divide_gain:
            gain_floor /= m
        if self.n_workers > 1:
            with ThreadPoolExecutor(max_workers=self.n_workers) as pool:
                results = list(pool.map(
                    lambda p: self._solve_one(p, ctx, gain_floor, delta_cap),
                    range(m)))
        else:
            results = [self._solve_one(p, ctx, gain_floor, delta_cap)
                       for p in range(m)]
        s = zero.copy()
        for op, (corr, _, _) in zip(self.ops, results):
            if corr is not None:
                s += op.P @ corr
        statuses = [r[1] for r in results]
        counts = [r[2] for r in results]
        self.counter.add(max(counts))
        self.last = {
            "statuses": statuses,
            "counts": counts,
            "all_nogain": all(t == "nogain" for t in statuses),
            "unequal_counts": len(set(counts)) > 1,
        }
        return s


class DecompositionSolver(_SolverBase):
    """Fine-level loop alternating decomposition and Taylor iterations.

    Each block runs ``dd_per_taylor`` decomposition iterations followed by
    one Taylor iteration; the stop rule is checked after every iteration.
    Cost pools the fine stream at weight 1 with the subdomain stream at
    weight (largest subdomain size) / n, matching a parallel execution in
    which all subdomains advance together.
    """

    name = "dd"
    cycle_kind = "dd"

    def __init__(self, num_subdomains=4, overlap=2, variant="wras",
                 subdomain_steps=10, dd_per_taylor=10, divide_gain=True,
                 n_workers=0, **kwargs):
        super().__init__(**kwargs)
        self.num_subdomains = int(num_subdomains)
        self.overlap = int(overlap)
        self.variant = str(variant).lower()
        self.subdomain_steps = int(subdomain_steps)
        self.dd_per_taylor = int(dd_per_taylor)
        self.divide_gain = bool(divide_gain)
        self.n_workers = int(n_workers)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown Schwarz variant {variant!r}")
        if self.subdomain_steps < 1:
            raise ValueError("subdomain_steps must be at least 1")
        if self.dd_per_taylor < 0:
            raise ValueError("dd_per_taylor must be nonnegative")

    def get_params(self):
        out = super().get_params()
        out.update({
            "num_subdomains": self.num_subdomains,
            "overlap": self.overlap,
            "variant": self.variant,
            "subdomain_steps": self.subdomain_steps,
            "dd_per_taylor": self.dd_per_taylor,
            "divide_gain": self.divide_gain,
            "n_workers": self.n_workers,
        })
        return out

    def solve(self, problem, x0=None):
        covering = build_block_covering(problem.n, self.num_subdomains,
                                        self.overlap,
                                        coords=problem.strip_coords)
        ops = build_operators(covering, self.variant)
        ledger = CostLedger()
        ledger.metadata["curvature_fd_charge"] = (
            "finite-difference curvature charged as 2 evaluation "
            "equivalents; 1 with an analytic Hessian action")
        checks = InvariantChecks() if self.debug_checks else None
        engine = MultilevelEngine(Hierarchy([problem], []), self.params,
                                  ledger, noise=self.noise, seed=self.seed,
                                  checks=checks)
        obj = engine.level_objective(0)
        sub_counter = ledger.counter("subdomains",
                                     covering.max_size / problem.n)
        stepper = DecompositionStepper(
            problem, ops, self.params, sub_counter,
            subdomain_steps=self.subdomain_steps,
            divide_gain=self.divide_gain, n_workers=self.n_workers,
            checks=checks, noise=self.noise if self.noise.active else None,
            seed=self.seed)
        x = problem.box.project(
            as_vector(x0, problem.n, "x0") if x0 is not None
            else problem.initial_point())
        w = np.full(problem.n, self.params.init_weight ** 2)
        trace = Trace(meta=self._meta(
            problem, extra={"subdomain_sizes": [op.size for op in ops]}))
        block = self.dd_per_taylor + 1

        def cycle_body(cycle, x, w, monitor, extra):
            dd_turn = cycle % block < self.dd_per_taylor
            token = "recursive" if dd_turn else "taylor"
            res = run_level(obj, problem.box, x, w, 0.0, np.inf, [token],
                            self.params, top=True, recurse=stepper,
                            checks=checks, monitor=monitor,
                            level_tag="level_0")
            if dd_turn:
                info = stepper.last
                extra["kind"] = "dd"
                extra["sub_nogain"] = int(
                    sum(t == "nogain" for t in info["statuses"]))
                if info["unequal_counts"]:
                    extra["unequal_counts"] = True
            else:
                extra["kind"] = "taylor"
            return res.x, res.w

        x = self._run_cycles(engine, problem, x, w, trace, cycle_body)
        trace.final["x"] = x
        return trace

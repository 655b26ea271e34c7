"""Benchmark problems: obstacle membrane, minimum-surface energy, random QPs.

Every problem exposes raw callables (gradient, Hessian action, value) plus a
feasible box; solvers wrap the gradient behind counted oracles.  Objective
values are guarded: they are reporting quantities, never read by solver code.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import BoundBox, check_value_allowed
from .transfer import TensorGrid, build_linear_interpolation

__all__ = [
    "GridProblem",
    "Hierarchy",
    "build_hierarchy",
    "kkt_enumeration_solution",
    "membrane",
    "minsurf",
    "random_obstacle_instance",
    "synthetic_quadratic_obstacle",
]


@dataclass
class GridProblem:
    """A box-constrained problem with raw gradient/curvature callables."""

    name: str
    n: int
    box: BoundBox
    gradient: callable
    hess_vec: callable | None
    _value: callable = field(repr=False)
    grid: TensorGrid | None = None
    strip_coords: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def value(self, x):
        """Objective value; raises inside solver code (reporting only)."""
        check_value_allowed()
        return self._value(x)

    def initial_point(self):
        """Zero vector projected onto the box."""
        return self.box.project(np.zeros(self.n))


class Hierarchy:
    """Nested discretizations of one problem.

    ``levels[0]`` is the coarsest and ``levels[-1]`` the finest, matching the
    level indices of the recursive solver; ``transfers[k]`` connects level k
    (its fine side) with level k-1.
    """

    def __init__(self, levels, transfers):
        if len(transfers) != len(levels) - 1:
            raise ValueError("need exactly one transfer pair per level gap")
        for k, pair in enumerate(transfers, start=1):
            if pair.n_fine != levels[k].n or pair.n_coarse != levels[k - 1].n:
                raise ValueError(f"transfer {k} does not match level sizes")
        self.levels = list(levels)
        self.transfers = [None] + list(transfers)  # indexed by the fine level

    @property
    def depth(self):
        return len(self.levels)

    @property
    def finest(self):
        return self.levels[-1]


# ---------------------------------------------------------------------------
# obstacle membrane: quadratic Dirichlet energy plus load, Q1 elements


def _membrane_lower_bound(x2):
    # upper half of a circle touching -0.3 at the edge midpoint
    return (-2.6 + np.sqrt(2.6**2 - 4.0 * ((x2 - 0.5) ** 2 - 1.0 + 1.3**2))) / 2.0


def _q1_stiffness(n):
    """Assembled bilinear stiffness on an n x n cell grid (all nodes)."""
    ke = np.array(
        [
            [4.0, -1.0, -2.0, -1.0],
            [-1.0, 4.0, -1.0, -2.0],
            [-2.0, -1.0, 4.0, -1.0],
            [-1.0, -2.0, -1.0, 4.0],
        ]
    ) / 6.0
    m = n + 1
    cx, cy = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    sw = (cy * m + cx).ravel()
    corners = np.stack([sw, sw + 1, sw + 1 + m, sw + m], axis=1)  # SW SE NE NW
    rows = np.repeat(corners, 4, axis=1).ravel()
    cols = np.tile(corners, (1, 4)).ravel()
    vals = np.tile(ke.ravel(), corners.shape[0])
    K = sp.coo_matrix((vals, (rows, cols)), shape=(m * m, m * m)).tocsr()
    K.eliminate_zeros()
    return K


def membrane(n_cells):
    """Membrane pressed down by a unit load, obstacle along the right edge.

    Energy 0.5 * int |grad z|^2 + int z on the unit square, z = 0 on the left
    edge, all other nodes free.  The lower bound is a circular arc on the
    right edge (tightest at the midpoint, -0.3) and -inf elsewhere.

    The load enters in nodal units (each node weighted by its share of
    adjacent cells: 1 inside, 1/2 on edges, 1/4 at corners), so gradient
    entries are O(1) regardless of the mesh, matching the h-free scaling of
    the Q1 stiffness stencil.  At z = 0 the gradient is exactly that share
    vector.
    """
    n = n_cells
    if n < 2:
        raise ValueError("membrane needs at least 2 cells per side")
    m = n + 1
    h = 1.0 / n
    ix = np.tile(np.arange(m), m)
    iy = np.repeat(np.arange(m), m)
    free = ix >= 1
    grid = TensorGrid(n_cells=n, dim=2, free=free)
    free_idx = np.flatnonzero(free)

    K = _q1_stiffness(n)
    # unit load in nodal units: each cell contributes 1/4 to its 4 corners
    b = np.zeros(m * m)
    cx, cy = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    sw = (cy * m + cx).ravel()
    for off in (0, 1, m, m + 1):
        np.add.at(b, sw + off, 0.25)

    lower = np.full(m * m, -np.inf)
    right = ix == n
    lower[right] = _membrane_lower_bound(iy[right] * h)
    box = BoundBox(lower[free_idx], np.full(free_idx.size, np.inf))

    def scatter(z):
        z_full = np.zeros(m * m)
        z_full[free_idx] = z
        return z_full

    def gradient(z):
        return (K @ scatter(z))[free_idx] + b[free_idx]

    def hess_vec(z, v):
        return (K @ scatter(v))[free_idx]

    def value(z):
        z_full = scatter(z)
        return 0.5 * float(z_full @ (K @ z_full)) + float(b @ z_full)

    return GridProblem(
        name="membrane",
        n=free_idx.size,
        box=box,
        gradient=gradient,
        hess_vec=hess_vec,
        _value=value,
        grid=grid,
        # strips run parallel to the clamped edge so each subdomain keeps
        # the same anchoring to the boundary data
        strip_coords=iy[free_idx],
        meta={"n_cells": n, "h": h, "stiffness": K, "load": b,
              "free_idx": free_idx},
    )


# ---------------------------------------------------------------------------
# minimum-surface energy: int (1 + |grad z|^2), P1 triangles, full Dirichlet


def _minsurf_boundary(x1, x2):
    g = np.zeros_like(x1)
    g = np.where(x1 == 0.0, -0.3 * np.sin(2.0 * np.pi * x2), g)
    g = np.where(x1 == 1.0, 0.3 * np.sin(2.0 * np.pi * x2), g)
    g = np.where(x2 == 0.0, -0.3 * np.sin(2.0 * np.pi * x1), g)
    g = np.where(x2 == 1.0, 0.3 * np.sin(2.0 * np.pi * x1), g)
    return g


def _p1_triangulation(n):
    """Two right triangles per cell (diagonal SW-NE); returns index triples,
    constant basis-gradient matrices (per triangle, 2x3) and areas."""
    m = n + 1
    cx, cy = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    sw = (cy * m + cx).ravel()
    lower_tri = np.stack([sw, sw + 1, sw + 1 + m], axis=1)  # SW SE NE
    upper_tri = np.stack([sw, sw + 1 + m, sw + m], axis=1)  # SW NE NW
    tris = np.concatenate([lower_tri, upper_tri], axis=0)
    h = 1.0 / n
    # gradients of the nodal basis on each triangle are constant; both
    # orientations share the same area h^2/2
    g_lower = np.array([[-1.0, 1.0, 0.0], [0.0, -1.0, 1.0]]) / h
    g_upper = np.array([[0.0, 1.0, -1.0], [-1.0, 0.0, 1.0]]) / h
    grads = np.concatenate(
        [np.broadcast_to(g_lower, (lower_tri.shape[0], 2, 3)),
         np.broadcast_to(g_upper, (upper_tri.shape[0], 2, 3))],
        axis=0,
    )
    areas = np.full(tris.shape[0], h * h / 2.0)
    return tris, np.ascontiguousarray(grads), areas


def minsurf(n_cells, sqrt_energy=False):
    """Surface over oscillating boundary data, squeezed between two bowls.

    The discrete energy integrates 1 + |grad z|^2 over P1 triangles; with
    ``sqrt_energy`` the classical area integrand sqrt(1 + |grad z|^2) is used
    instead (the one-point rule per triangle is exact for P1 either way).
    """
    n = n_cells
    if n < 2:
        raise ValueError("minsurf needs at least 2 cells per side")
    m = n + 1
    h = 1.0 / n
    ix = np.tile(np.arange(m), m)
    iy = np.repeat(np.arange(m), m)
    interior = (ix >= 1) & (ix <= n - 1) & (iy >= 1) & (iy <= n - 1)
    grid = TensorGrid(n_cells=n, dim=2, free=interior)
    free_idx = np.flatnonzero(interior)

    x1 = ix * h
    x2 = iy * h
    z_bd = np.where(interior, 0.0, _minsurf_boundary(x1, x2))

    tris, tgrads, areas = _p1_triangulation(n)

    lower = 0.25 - 8.0 * (x1 - 0.7) ** 2 - 8.0 * (x2 - 0.7) ** 2
    upper = -(0.4 - 8.0 * (x1 - 0.3) ** 2 - 8.0 * (x2 - 0.3) ** 2)
    box = BoundBox(lower[free_idx], upper[free_idx])

    def scatter(z):
        z_full = z_bd.copy()
        z_full[free_idx] = z
        return z_full

    def tri_gradients(z_full):
        return np.einsum("tij,tj->ti", tgrads, z_full[tris])

    if not sqrt_energy:
        # quadratic energy: assemble the stiffness of int grad.grad once
        rows = np.repeat(tris, 3, axis=1).ravel()
        cols = np.tile(tris, (1, 3)).ravel()
        vals = (np.einsum("tia,tib->tab", tgrads, tgrads)
                * areas[:, None, None]).ravel()
        K = sp.coo_matrix((vals, (rows, cols)), shape=(m * m, m * m)).tocsr()
        K.eliminate_zeros()

        def gradient(z):
            return 2.0 * (K @ scatter(z))[free_idx]

        def hess_vec(z, v):
            v_full = np.zeros(m * m)
            v_full[free_idx] = v
            return 2.0 * (K @ v_full)[free_idx]

        def value(z):
            z_full = scatter(z)
            return 1.0 + float(z_full @ (K @ z_full))

        meta = {"n_cells": n, "h": h, "stiffness": K, "boundary": z_bd,
                "free_idx": free_idx}
    else:

        def gradient(z):
            g_t = tri_gradients(scatter(z))
            wq = areas / np.sqrt(1.0 + (g_t * g_t).sum(axis=1))
            contrib = np.einsum("tia,ti->ta", tgrads, wq[:, None] * g_t)
            out = np.zeros(m * m)
            np.add.at(out, tris, contrib)
            return out[free_idx]

        def hess_vec(z, v):
            z_full = scatter(z)
            v_full = np.zeros(m * m)
            v_full[free_idx] = v
            g_t = tri_gradients(z_full)
            gv_t = tri_gradients(v_full)
            q = 1.0 + (g_t * g_t).sum(axis=1)
            w1 = areas / np.sqrt(q)
            w3 = areas * (g_t * gv_t).sum(axis=1) / q**1.5
            vec = w1[:, None] * gv_t - w3[:, None] * g_t
            contrib = np.einsum("tia,ti->ta", tgrads, vec)
            out = np.zeros(m * m)
            np.add.at(out, tris, contrib)
            return out[free_idx]

        def value(z):
            g_t = tri_gradients(scatter(z))
            return float(areas @ np.sqrt(1.0 + (g_t * g_t).sum(axis=1)))

        meta = {"n_cells": n, "h": h, "boundary": z_bd, "free_idx": free_idx}

    return GridProblem(
        name="minsurf",
        n=free_idx.size,
        box=box,
        gradient=gradient,
        hess_vec=hess_vec,
        _value=value,
        grid=grid,
        strip_coords=ix[free_idx],
        meta=meta,
    )


_FAMILIES = {"membrane": membrane, "minsurf": minsurf}


def build_hierarchy(family, n_cells, depth, coarsening=2, **kwargs):
    """Nested hierarchy of a grid problem family, finest at ``n_cells``.

    ``coarsening`` must be a power of two; larger factors are realized by
    composing factor-2 interpolations through the intermediate grids.
    """
    if isinstance(family, str):
        family = _FAMILIES[family]
    steps = int(np.log2(coarsening))
    if 2**steps != coarsening or coarsening < 2:
        raise ValueError("coarsening factor must be a power of two >= 2")
    total = coarsening ** (depth - 1)
    if depth < 1 or n_cells % total != 0:
        raise ValueError(
            f"{n_cells} cells cannot be coarsened {depth - 1} times "
            f"by factor {coarsening}"
        )
    levels = [family(n_cells // coarsening**k, **kwargs)
              for k in range(depth)][::-1]
    transfers = []
    for k in range(1, depth):
        fine_cells = levels[k].grid.n_cells
        pair = None
        for s in range(steps):
            f = family(fine_cells // 2**s, **kwargs).grid
            c = family(fine_cells // 2 ** (s + 1), **kwargs).grid
            leg = build_linear_interpolation(f, c)
            pair = leg if pair is None else pair.compose(leg)
        transfers.append(pair)
    return Hierarchy(levels, transfers)


# ---------------------------------------------------------------------------
# random bound-constrained quadratics with an enumeration oracle


def synthetic_quadratic_obstacle(A, b, lower, upper, name="quadratic"):
    """Problem 0.5 x^T A x - b^T x over a box, from explicit data."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    n = b.size
    box = BoundBox(lower, upper)

    def gradient(x):
        return A @ x - b

    def hess_vec(x, v):
        return A @ v

    def value(x):
        return 0.5 * float(x @ (A @ x)) - float(b @ x)

    return GridProblem(
        name=name,
        n=n,
        box=box,
        gradient=gradient,
        hess_vec=hess_vec,
        _value=value,
        grid=None,
        strip_coords=np.arange(n),
        meta={"A": A, "b": b},
    )


def random_obstacle_instance(seed, n=None, max_cond=50.0):
    """Random SPD quadratic with a random box around its free minimizer."""
    rng = np.random.default_rng(seed)
    if n is None:
        n = int(rng.integers(2, 9))
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eigs = np.exp(rng.uniform(0.0, np.log(max_cond), size=n))
    A = (q * eigs) @ q.T
    A = 0.5 * (A + A.T)
    b = rng.normal(size=n)
    center = np.linalg.solve(A, b)
    lower = center - rng.uniform(0.05, 1.5, size=n)
    upper = center + rng.uniform(0.05, 1.5, size=n)
    # push some bounds into the minimizer and open some sides completely
    squeeze = rng.random(n) < 0.4
    lower[squeeze] = center[squeeze] + rng.uniform(0.0, 0.5, size=n)[squeeze]
    open_lo = rng.random(n) < 0.15
    open_hi = rng.random(n) < 0.15
    lower[open_lo] = -np.inf
    upper[open_hi] = np.inf
    lower = np.minimum(lower, upper - 1e-3)
    return synthetic_quadratic_obstacle(A, b, lower, upper,
                                        name=f"quadratic[{seed}]")


def kkt_enumeration_solution(problem, tol=1e-10):
    """Exact minimizer of a convex box-constrained QP by active-set search.

    Brute force over the 3^n lower/free/upper patterns; for a positive
    definite Hessian the first pattern passing the sign conditions is the
    unique solution.  Independent of the iterative machinery on purpose.
    """
    A = problem.meta["A"]
    b = problem.meta["b"]
    lo, hi = problem.box.lower, problem.box.upper
    n = b.size
    if n > 12:
        raise ValueError("enumeration oracle is limited to n <= 12")
    for pattern in itertools.product((0, 1, 2), repeat=n):
        pat = np.array(pattern)
        if np.any((pat == 1) & ~np.isfinite(lo)):
            continue
        if np.any((pat == 2) & ~np.isfinite(hi)):
            continue
        x = np.where(pat == 1, lo, 0.0)
        x = np.where(pat == 2, hi, x)
        free = pat == 0
        if np.any(free):
            idx = np.flatnonzero(free)
            rhs = b[idx] - A[np.ix_(idx, ~free)] @ x[~free]
            x[idx] = np.linalg.solve(A[np.ix_(idx, idx)], rhs)
            if np.any(x[idx] < lo[idx] - tol) or np.any(x[idx] > hi[idx] + tol):
                continue
        grad = A @ x - b
        if np.any(grad[pat == 1] < -tol) or np.any(grad[pat == 2] > tol):
            continue
        return problem.box.project(x)
    raise RuntimeError("no pattern satisfied the optimality conditions")

"""Grid transfer operators and the interlevel bound mapping.

Prolongation P interpolates coarse corrections piecewise (bi)linearly onto the
next finer tensor grid; restriction is the scaled transpose R = 2^{-dim} P^T.
Bounds are never restricted directly: the lower level gets the tightest box
around the restricted point such that any prolongated correction stays inside
the fine box (the row sums of P set the scale).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import BoundBox

__all__ = [
    "TensorGrid",
    "TransferPair",
    "build_linear_interpolation",
    "lower_level_bounds",
    "prolong_step",
    "restrict_state",
    "truncate",
]


@dataclass(frozen=True)
class TensorGrid:
    """Uniform tensor-product grid on the unit interval/square.

    ``free`` flags the nodes that are unknowns (True) versus eliminated
    Dirichlet nodes, in lexicographic node order (x fastest).
    """

    n_cells: int
    dim: int
    free: np.ndarray = field(repr=False)

    def __post_init__(self):
        nodes = (self.n_cells + 1) ** self.dim
        if self.free.size != nodes:
            raise ValueError(
                f"free mask has {self.free.size} entries, grid has {nodes} nodes"
            )

    @property
    def n_nodes(self):
        return (self.n_cells + 1) ** self.dim

    @property
    def n_free(self):
        return int(np.count_nonzero(self.free))

    def node_index(self):
        """Map node -> free-dof index (-1 for eliminated nodes)."""
        idx = np.full(self.n_nodes, -1, dtype=int)
        idx[self.free] = np.arange(self.n_free)
        return idx


@dataclass
class TransferPair:
    """Prolongation/restriction pair between two consecutive levels.

    R is always a positive multiple of P^T (``rt_scale``), so truncation can
    rebuild it from a masked P.  ``sigma`` holds the row sums of P (one per
    fine variable; empty rows get 1 by convention).
    """

    P: sp.csr_matrix
    R: sp.csr_matrix
    sigma: np.ndarray
    rt_scale: float

    @property
    def n_fine(self):
        return self.P.shape[0]

    @property
    def n_coarse(self):
        return self.P.shape[1]

    def compose(self, other):
        """Pair mapping through an intermediate level: self (fine) o other."""
        P = (self.P @ other.P).tocsr()
        P.eliminate_zeros()
        scale = self.rt_scale * other.rt_scale
        R = (scale * P.T).tocsr()
        return TransferPair(P=P, R=R, sigma=row_sums(P), rt_scale=scale)


def row_sums(P):
    """Row sums of a nonnegative sparse matrix, with empty rows set to 1."""
    s = np.asarray(P.sum(axis=1)).ravel()
    counts = np.diff(P.tocsr().indptr)
    s[counts == 0] = 1.0
    return s


def _interp_stencil_1d(n_fine):
    """COO triplets of linear interpolation from n_fine//2 cells to n_fine."""
    if n_fine % 2 != 0:
        raise ValueError(f"fine grid with {n_fine} cells has no factor-2 parent")
    rows, cols, vals = [], [], []
    for i in range(n_fine + 1):
        if i % 2 == 0:
            rows.append(i)
            cols.append(i // 2)
            vals.append(1.0)
        else:
            rows.extend([i, i])
            cols.extend([i // 2, i // 2 + 1])
            vals.extend([0.5, 0.5])
    return np.array(rows), np.array(cols), np.array(vals)


def build_linear_interpolation(fine, coarse):
    """Piecewise (bi)linear interpolation between nested tensor grids.

    Rows/columns of eliminated Dirichlet nodes are dropped: corrections vanish
    there, so the reduced operator is exact on the unknowns.
    """
    if fine.dim != coarse.dim:
        raise ValueError("grids have different dimensions")
    if fine.n_cells != 2 * coarse.n_cells:
        raise ValueError(
            f"grids are not nested with factor 2: {fine.n_cells} fine cells "
            f"vs {coarse.n_cells} coarse cells"
        )
    r, c, v = _interp_stencil_1d(fine.n_cells)
    P1 = sp.coo_matrix((v, (r, c)),
                       shape=(fine.n_cells + 1, coarse.n_cells + 1)).tocsr()
    if fine.dim == 1:
        P_nodes = P1
    elif fine.dim == 2:
        # lexicographic node order, x fastest: tensor product acts as kron(y, x)
        P_nodes = sp.kron(P1, P1, format="csr")
    else:
        raise ValueError(f"unsupported grid dimension {fine.dim}")
    P = P_nodes[fine.free][:, coarse.free].tocsr()
    P.eliminate_zeros()
    scale = 2.0 ** (-fine.dim)
    R = (scale * P.T).tocsr()
    return TransferPair(P=P, R=R, sigma=row_sums(P), rt_scale=scale)


def restrict_state(pair, x, w, floor=1e-12):
    """Restrict point and weights to the lower level; weights are floored."""
    x0 = pair.R @ x
    w0 = np.maximum(pair.R @ w, floor)
    return x0, w0


def lower_level_bounds(P, sigma, x_fine, x0_coarse, box_fine, fallback=None):
    """Box for the lower level keeping every prolongated correction feasible.

    Column by column: the coarse variable i may move away from x0 by at most
    min/max over the rows q in its support of (bound_q - x_q) / sigma_q.  The
    result always contains x0.  Columns with empty support leave the fine
    point untouched; they default to unbounded, or to ``fallback`` bounds
    (lo, hi) when given.
    """
    P = P.tocsc()
    n_coarse = P.shape[1]
    lo_terms = (box_fine.lower - x_fine) / sigma
    hi_terms = (box_fine.upper - x_fine) / sigma

    lower = np.full(n_coarse, -np.inf)
    upper = np.full(n_coarse, np.inf)
    indptr, indices = P.indptr, P.indices
    col_nnz = np.diff(indptr)
    nonempty = col_nnz > 0
    if np.any(nonempty):
        # segment reduction over the CSC entry list; dropping empty columns
        # keeps consecutive starts strictly increasing, which reduceat needs
        starts = indptr[:-1][nonempty]
        lower[nonempty] = np.maximum.reduceat(lo_terms[indices], starts)
        upper[nonempty] = np.minimum.reduceat(hi_terms[indices], starts)
    lower = np.where(nonempty, x0_coarse + lower, -np.inf)
    upper = np.where(nonempty, x0_coarse + upper, np.inf)
    if fallback is not None:
        fb_lo, fb_hi = fallback
        lower = np.where(nonempty, lower, fb_lo)
        upper = np.where(nonempty, upper, fb_hi)
    return BoundBox(lower, upper)


def prolong_step(P, coarse_correction):
    """Interpolate a coarse correction to the finer level."""
    return P @ coarse_correction


def truncate(pair, active):
    """Zero the prolongation rows of actively bounded fine variables.

    The restriction is rebuilt as the same scaled transpose, and the row sums
    are recomputed, so the truncated pair is again internally consistent.
    Coarse variables whose whole column is cut keep moving but no longer
    contribute to the prolongated step.
    """
    active = np.asarray(active, dtype=bool)
    if active.size != pair.n_fine:
        raise ValueError("active mask length does not match the fine level")
    if not np.any(active):
        return pair
    keep = sp.diags((~active).astype(float))
    P = (keep @ pair.P).tocsr()
    P.eliminate_zeros()
    R = (pair.rt_scale * P.T).tocsr()
    return TransferPair(P=P, R=R, sigma=row_sums(P), rt_scale=pair.rt_scale)

"""Residual and Jacobian of the regularized arrival-time equation.

For parameters ``(eps, sigma, kappa)`` the discrete operator is

    F(u) = div_g(Du / W) + kappa / W - sigma u,    W = sqrt(eps^2 + |Du|_g^2),

evaluated in non-divergence form at the nodes,

    F(u) = (Lap u - Hess u(Du, Du) / W^2) / W + kappa / W - sigma u,

with the gradient, the compact Hessian and the metric all taken at the node.
The Jacobian is the exact derivative of this discrete map, which is the
node-centred discretization of the linearization

    L v = div(Dv / W - <Du, Dv> Du / W^3) - kappa <Du, Dv> / W^3 - sigma v.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .grid import Grid, ScalarField

__all__ = [
    "RegParams",
    "EvaluationError",
    "LinearSystem",
    "Discretization",
    "residual",
    "jacobian",
    "graph_form_check",
    "distance_barrier",
    "bent_barrier",
]

#: Nodes with |Du|_g below this are skipped when eps = sigma = 0.
DEGENERATE_GRAD = 1e-10


@dataclass(frozen=True)
class RegParams:
    eps: float
    sigma: float
    kappa: float = 1.0

    def __post_init__(self):
        if self.eps < 0 or self.sigma < 0:
            raise ValueError("eps and sigma must be nonnegative")
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError("kappa must lie in [0, 1]")

    @property
    def degenerate(self) -> bool:
        return self.eps == 0.0

    def sup_bound(self) -> float:
        """``kappa / (sigma eps)``, the maximum-principle bound."""
        if self.sigma <= 0 or self.eps <= 0:
            raise ValueError("sup bound needs eps > 0 and sigma > 0")
        return self.kappa / (self.sigma * self.eps)


class EvaluationError(FloatingPointError):
    def __init__(self, node, coords):
        super().__init__(f"non-finite field value at node {node} (x = {coords})")
        self.node = node


@dataclass
class LinearSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    nodes: np.ndarray  # row/column -> owned node index

    def to_triplets(self, path):
        coo = self.matrix.tocoo()
        with open(path, "w") as fh:
            fh.write("row col value\n")
            for r, c, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{r} {c} {v:.17g}\n")


def _one_sided(grid: Grid, frozen: np.ndarray):
    """Stencils that never read frozen nodes from an active node.

    Along an axis where an active node has a frozen neighbor, the first
    derivative becomes the one-sided ``(3 u0 - 4 u1 + u2) / 2h`` (or the
    two-point difference) taken from the active side, and the second
    derivative ``(u0 - 2 u1 + u2) / h^2`` (zero if only one node is
    available).  Mixed rows touching a frozen node use the product of the
    modified first derivatives.
    """
    n = grid.n_nodes
    d1 = [op.tolil() for op in grid.d1]
    hess = {k: op.tolil() for k, op in grid.hess_compact().items()}
    active = ~frozen
    touched = np.zeros(n, bool)
    for a in range(grid.dim):
        h = grid.spacing[a]
        for s in (0, 1):
            j = grid.nbr[a, s]
            rows = np.flatnonzero(active & (j >= 0))
            rows = rows[frozen[j[rows]]]
            for i in rows:
                o = grid.nbr[a, 1 - s, i]
                if o < 0 or frozen[o]:
                    continue  # pinched between frozen nodes and dK0; keep the row
                oo = grid.nbr[a, 1 - s, o]
                sign = 1.0 if s == 1 else -1.0
                d1[a].rows[i], d1[a].data[i] = [], []
                d2 = hess[(a, a)]
                d2.rows[i], d2.data[i] = [], []
                if oo >= 0 and active[oo]:
                    for c, w in ((i, 1.5), (o, -2.0), (oo, 0.5)):
                        d1[a][i, c] = sign * w / h
                    for c, w in ((i, 1.0), (o, -2.0), (oo, 1.0)):
                        d2[i, c] = w / h**2
                else:
                    d1[a][i, i] = sign / h
                    d1[a][i, o] = -sign / h
                touched[i] = True
    d1 = [op.tocsr() for op in d1]
    for (i, j), op in list(hess.items()):
        op = op.tocsr()
        if i != j:
            rows = np.flatnonzero(active & (touched | (abs(op) @ frozen.astype(float) > 0)))
            if len(rows):
                prod = (0.5 * (d1[i] @ d1[j] + d1[j] @ d1[i])).tocsr()
                keep = np.ones(n)
                keep[rows] = 0.0
                op = (sp.diags(keep) @ op + sp.diags(1.0 - keep) @ prod).tocsr()
        hess[(i, j)] = op
    return d1, hess


class Discretization:
    """Per-grid cache of stencil operators and the Jacobian sparsity pattern.

    With a ``frozen`` mask the operators are rebuilt so that active nodes
    use one-sided differences instead of reading frozen values.
    """

    def __init__(self, grid: Grid, frozen=None):
        self.grid = grid
        d = grid.dim
        if frozen is None or not np.any(frozen):
            self.d1 = grid.d1
            self.hess = grid.hess_compact()
        else:
            self.d1, self.hess = _one_sided(grid, np.asarray(frozen, bool))
        self.pairs = sorted(self.hess)
        ginv, gam, hid = grid.node_metric
        self.ginv = np.moveaxis(ginv, 0, -1)  # (d, d, N)
        self.gamma = np.moveaxis(gam, 0, -1)  # (k, i, j, N)
        self.hidden = grid.chart.hidden_dim * np.moveaxis(hid, 0, -1)  # (d, N)
        # Gamma contracted with ginv, and the full Laplacian first-order coefficient
        self.trace_gamma = np.einsum("ijn,kijn->kn", self.ginv, self.gamma)
        self.dim = d

    @cached_property
    def pattern(self):
        """Union sparsity pattern and each operator's data scattered onto it."""
        n = self.grid.n_nodes
        ops = list(self.d1) + [self.hess[p] for p in self.pairs] + [sp.identity(n, format="csr")]
        union = sum(abs(op) for op in ops).tocsr()
        union.sort_indices()
        rows = np.repeat(np.arange(n), np.diff(union.indptr))
        keys = rows * n + union.indices
        scattered = []
        for op in ops:
            coo = op.tocoo()
            pos = np.searchsorted(keys, coo.row.astype(np.int64) * n + coo.col)
            data = np.zeros(len(keys))
            np.add.at(data, pos, coo.data)
            scattered.append(data)
        return union.indptr.copy(), union.indices.copy(), rows, scattered

    def derivatives(self, u):
        p = np.stack([op @ u for op in self.d1])  # (d, N)
        s = np.empty((self.dim, self.dim, len(u)))
        for i, j in self.pairs:
            s[i, j] = s[j, i] = self.hess[(i, j)] @ u
        return p, s

    def evaluate(self, u, params: RegParams, want_jacobian=False):
        """Residual and, optionally, the pointwise Jacobian coefficients."""
        eps, sigma, kappa = params.eps, params.sigma, params.kappa
        p, s = self.derivatives(u)
        ginv = self.ginv
        hc = s - np.einsum("kijn,kn->ijn", self.gamma, p)
        q = np.einsum("ijn,jn->in", ginv, p)
        qq = np.einsum("in,in->n", p, q)
        w2 = eps**2 + qq
        skip = None
        if params.degenerate:
            skip = np.sqrt(np.maximum(qq, 0.0)) < DEGENERATE_GRAD
            w2 = np.where(skip, 1.0, w2)
        w = np.sqrt(w2)
        lap = np.einsum("ijn,ijn->n", ginv, hc) + np.einsum("kn,kn->n", self.hidden, p)
        hqq = np.einsum("ijn,in,jn->n", hc, q, q)
        f = lap / w - hqq / (w * w2) + kappa / w - sigma * u
        if skip is not None:
            f = np.where(skip, np.nan, f)
        if not want_jacobian:
            return f, None
        # d F / d S_ij  (symmetric; off-diagonal pairs carry both (i,j) and (j,i))
        a = (ginv - np.einsum("in,jn->ijn", q, q) / w2) / w
        # d F / d p_k
        dlap = -self.trace_gamma + self.hidden
        dhqq = -np.einsum("kijn,in,jn->kn", self.gamma, q, q) + 2.0 * np.einsum(
            "ijn,in,jkn->kn", hc, q, ginv
        )
        w3 = w * w2
        b = (
            dlap / w
            - lap * q / w3
            - dhqq / w3
            + 3.0 * hqq * q / (w3 * w2)
            - kappa * q / w3
        )
        coef = [b[k] for k in range(self.dim)]
        for i, j in self.pairs:
            coef.append(a[i, j] if i == j else 2.0 * a[i, j])
        coef.append(np.full(len(u), -sigma))
        return f, coef

    def assemble(self, coef):
        indptr, indices, rows, scattered = self.pattern
        data = np.zeros(len(indices))
        for c, op in zip(coef, scattered):
            data += c[rows] * op
        n = self.grid.n_nodes
        return sp.csr_matrix((data, indices, indptr), shape=(n, n))


def _disc(grid: Grid, frozen=None) -> Discretization:
    key = None if frozen is None or not np.any(frozen) else np.packbits(frozen).tobytes()
    cache = grid.__dict__.setdefault("_discretizations", {})
    disc = cache.get(key)
    if disc is None:
        if len(cache) > 4:
            cache.pop(next(k for k in cache if k is not None))
        disc = Discretization(grid, frozen)
        cache[key] = disc
    return disc


def _check_finite(fld: ScalarField):
    bad = np.flatnonzero(~np.isfinite(fld.values))
    if len(bad):
        raise EvaluationError(int(bad[0]), fld.grid.coords[bad[0]].tolist())


def residual(fld: ScalarField, params: RegParams, frozen=None) -> ScalarField:
    """``F(u)`` at every owned node.

    With ``eps = 0`` (degenerate limit equation) nodes where ``|Du|_g`` falls
    below ``1e-10`` are skipped and reported as NaN.  ``frozen`` switches the
    neighbors of frozen nodes to one-sided stencils.
    """
    _check_finite(fld)
    f, _ = _disc(fld.grid, frozen).evaluate(fld.values, params)
    return ScalarField(fld.grid, f)


def jacobian(fld: ScalarField, params: RegParams, frozen=None) -> LinearSystem:
    """Exact derivative of :func:`residual` as a sparse system ``J v = -F``."""
    if params.degenerate:
        raise ValueError("the Jacobian needs eps > 0")
    _check_finite(fld)
    disc = _disc(fld.grid, frozen)
    f, coef = disc.evaluate(fld.values, params, want_jacobian=True)
    return LinearSystem(disc.assemble(coef), -f, np.arange(fld.grid.n_nodes))


def graph_form_check(fld: ScalarField, params: RegParams, geometry=None) -> float:
    """``max |H_graph + sigma u - kappa V|`` over interior nodes.

    ``H_graph`` and ``V`` come from the curvature module, which uses the
    wide gradient-of-gradient Hessian; the residual uses the compact stencils,
    so the result measures the consistency of two discretizations.
    """
    from .curvature import graph_quantities

    if geometry is None:
        geometry = graph_quantities(fld, params)
    dev = geometry.H + params.sigma * fld.values - params.kappa * geometry.V
    mask = fld.grid.interior
    return float(np.max(np.abs(dev[mask]))) if mask.any() else 0.0


# -- barriers -----------------------------------------------------------------


def distance_barrier(grid: Grid, params: RegParams, delta: float, H0: float) -> ScalarField:
    """``v = C r`` with ``C = max(1/(sigma eps delta), 2/H0)``, ``r`` the boundary distance."""
    if grid.shape.distance is None:
        raise ValueError(f"domain '{grid.shape.name}' has no distance function")
    c = max(1.0 / (params.sigma * params.eps * delta), 2.0 / H0)
    return grid.sample(lambda x: c * grid.shape.distance(x))


def bent_barrier(arrival: ScalarField, T: float) -> ScalarField:
    """``phi(u) = 1/(T - u) - 1/T`` where ``u < T``; ``inf`` elsewhere."""
    u = arrival.values
    with np.errstate(divide="ignore"):
        v = np.where(u < T, 1.0 / (T - u) - 1.0 / T, np.inf)
    return ScalarField(arrival.grid, v)

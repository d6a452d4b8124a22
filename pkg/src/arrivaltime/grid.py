"""Cartesian grids with cut-cell (Shortley-Weller) Dirichlet boundaries.

The domain ``K0`` is described by an implicit function ``phi`` with
``phi < 0`` inside.  Nodes with ``phi >= 0`` are exterior and carry no
unknown; the Dirichlet value ``u = 0`` sits at the boundary crossings found by
root-finding ``phi`` along grid lines.

All derivative stencils are assembled once per grid as sparse matrices over
the owned (non-exterior) nodes.  Because the boundary value is zero they are
linear maps, which keeps the residual and Jacobian assembly simple.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .metric import MetricChart, norm_grad

__all__ = [
    "ConfigurationError",
    "NodeClass",
    "DomainShape",
    "ball",
    "band",
    "cassini_dumbbell",
    "implicit",
    "Grid",
    "ScalarField",
    "build_grid",
    "BoundaryTrace",
    "boundary_trace",
]


#: Boundary fractions below this are treated as nodes on the boundary.
THETA_MIN = 1e-6


class ConfigurationError(ValueError):
    """Grid or run configuration cannot produce a valid discretization."""


class NodeClass(IntEnum):
    INTERIOR = 0
    BOUNDARY_ADJACENT = 1
    EXTERIOR = 2


@dataclass(frozen=True)
class DomainShape:
    """Implicit description of ``K0``: ``phi(x) < 0`` inside.

    ``bbox`` bounds the domain along the non-periodic axes; ``distance``
    optionally returns the distance to the boundary (used by barrier tests).
    """

    name: str
    phi: Callable[[np.ndarray], np.ndarray]
    bbox: tuple
    distance: Callable | None = None
    params: dict = field(default_factory=dict)


def ball(radius=1.0, center=(0.0, 0.0)) -> DomainShape:
    center = np.asarray(center, dtype=float)

    def phi(x):
        return np.sqrt(np.sum((x - center) ** 2, axis=-1)) - radius

    def dist(x):
        return -phi(x)

    bbox = (center - radius, center + radius)
    return DomainShape(
        "ball", phi, bbox, dist, {"radius": float(radius), "center": center.tolist()}
    )


def band(half_width=1.0, axis=0, dim=2) -> DomainShape:
    """``|x_axis| <= half_width``; the remaining axes are expected to be periodic."""

    def phi(x):
        return np.abs(x[..., axis]) - half_width

    def dist(x):
        return -phi(x)

    lo = np.full(dim, -np.inf)
    hi = np.full(dim, np.inf)
    lo[axis], hi[axis] = -half_width, half_width
    return DomainShape("band", phi, (lo, hi), dist, {"half_width": float(half_width), "axis": axis})


def cassini_dumbbell(c=0.5, b=0.55) -> DomainShape:
    """Cassini oval ``(x^2+r^2)^2 - 2c^2(x^2-r^2) < b^4 - c^4`` in the meridian plane.

    For ``c < b < sqrt(2) c`` the oval is peanut shaped; rotated about the
    ``x`` axis it is a dumbbell with a neck of radius ``sqrt(b^2 - c^2)``.
    """
    if not c < b < np.sqrt(2.0) * c:
        raise ConfigurationError("Cassini dumbbell needs c < b < sqrt(2) c")
    scale = b**4

    def phi(x):
        s = x[..., 0] ** 2 + x[..., 1] ** 2
        return (s**2 - 2.0 * c**2 * (x[..., 0] ** 2 - x[..., 1] ** 2) - (b**4 - c**4)) / scale

    xmax = np.sqrt(c**2 + b**2)
    rmax = b**2 / (2.0 * c)
    bbox = (np.array([-xmax, -rmax]), np.array([xmax, rmax]))
    return DomainShape("dumbbell", phi, bbox, None, {"c": float(c), "b": float(b)})


def implicit(phi, lo, hi, name="implicit") -> DomainShape:
    return DomainShape(name, phi, (np.asarray(lo, float), np.asarray(hi, float)))


def _bisect_edges(phi, x0, x1, iters=60):
    """Fraction ``t`` in ``(0, 1]`` with ``phi(x0 + t (x1 - x0)) = 0`` per row."""
    lo = np.zeros(len(x0))
    hi = np.ones(len(x0))
    d = x1 - x0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        inside = phi(x0 + mid[:, None] * d) < 0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return hi


class Grid:
    """Uniform Cartesian grid over a chart, restricted to ``K0``.

    Use :func:`build_grid` to construct.  Owned nodes (interior and
    boundary-adjacent) are numbered ``0 .. n_nodes-1``; ``nbr[a, s]`` gives the
    neighbor of each owned node along axis ``a`` in direction ``s`` (0: minus,
    1: plus), or ``-1`` when the segment crosses ``dK0`` at fraction
    ``theta[a, s]`` of the spacing.
    """

    def __init__(self, chart, shape, spacing, origin, counts, periodic, reflect, inside):
        self.chart = chart
        self.shape = shape
        self.dim = chart.dim
        self.spacing = np.asarray(spacing, dtype=float)
        self.origin = np.asarray(origin, dtype=float)
        # origin in units of h (integer or half-integer) so that mirrored nodes round alike
        self._offset = np.round(2.0 * self.origin / self.spacing) / 2.0
        self.counts = tuple(int(c) for c in counts)
        self.periodic = tuple(periodic)
        self.reflect = tuple(reflect)
        self.box_inside = inside
        self._index_nodes()
        self._link_neighbors()

    # -- construction ------------------------------------------------------
    def box_coords(self, multi_index):
        return (self._offset + np.asarray(multi_index, dtype=float)) * self.spacing

    def _index_nodes(self):
        self.box_index = np.full(self.counts, -1, dtype=np.int64)
        idx = np.argwhere(self.box_inside)
        self.multi_index = idx
        self.n_nodes = len(idx)
        self.box_index[tuple(idx.T)] = np.arange(self.n_nodes)
        self.coords = self.box_coords(idx)

    def _shift(self, idx, axis, step):
        """Box multi-indices shifted along ``axis``; invalid rows get -1 everywhere."""
        out = idx.copy()
        out[:, axis] += step
        n = self.counts[axis]
        if self.periodic[axis]:
            out[:, axis] %= n
        else:
            if self.reflect[axis]:
                below = out[:, axis] < 0
                out[below, axis] = -out[below, axis] - 1
            bad = (out[:, axis] < 0) | (out[:, axis] >= n)
            out[bad] = -1
        return out

    def _lookup(self, idx):
        bad = np.any(idx < 0, axis=1)
        safe = np.where(bad[:, None], 0, idx)
        res = self.box_index[tuple(safe.T)]
        res[bad] = -2  # outside the box
        return res

    def _link_neighbors(self):
        d = self.dim
        n = self.n_nodes
        self.nbr = np.full((d, 2, n), -1, dtype=np.int64)
        self.theta = np.ones((d, 2, n))
        self.bpoints = []  # (node, axis, side, theta, point)
        for a in range(d):
            for s, step in enumerate((-1, 1)):
                j = self._lookup(self._shift(self.multi_index, a, step))
                if np.any(j == -2):
                    raise ConfigurationError(
                        "domain touches the edge of the grid box; increase padding"
                    )
                self.nbr[a, s] = j
                cut = np.flatnonzero(j < 0)
                if len(cut):
                    x0 = self.coords[cut]
                    x1 = x0.copy()
                    x1[:, a] += step * self.spacing[a]
                    t = _bisect_edges(self.shape.phi, x0, x1)
                    self.theta[a, s, cut] = t
                    pts = x0 + t[:, None] * (x1 - x0)
                    for k in range(len(cut)):
                        self.bpoints.append((int(cut[k]), a, s, float(t[k]), pts[k]))
        interior = np.all(self.nbr >= 0, axis=(0, 1))
        self.node_class = np.where(
            interior, NodeClass.INTERIOR, NodeClass.BOUNDARY_ADJACENT
        ).astype(np.int8)

    # -- convenience ---------------------------------------------------------
    @property
    def interior(self):
        return self.node_class == NodeClass.INTERIOR

    @property
    def h(self) -> float:
        return float(np.max(self.spacing))

    def zeros(self) -> "ScalarField":
        return ScalarField(self, np.zeros(self.n_nodes))

    def field(self, values) -> "ScalarField":
        return ScalarField(self, np.asarray(values, dtype=float))

    def sample(self, fn) -> "ScalarField":
        return ScalarField(self, np.asarray(fn(self.coords), dtype=float))

    def box_class(self):
        """Node class over the full box (exterior nodes included)."""
        cls = np.full(self.counts, int(NodeClass.EXTERIOR), dtype=np.int8)
        cls[tuple(self.multi_index.T)] = self.node_class
        return cls

    def diagonal_neighbor(self, axis_i, si, axis_j, sj):
        """Owned index of the node at offset ``si e_i + sj e_j``, -1 if none."""
        idx = self._shift(self._shift(self.multi_index, axis_i, si), axis_j, sj)
        j = self._lookup(idx)
        j[j < 0] = -1
        return j

    def boundary_band(self, layers=2):
        """Interior nodes within ``layers`` axis hops of a boundary-adjacent node."""
        mark = ~self.interior
        for _ in range(layers):
            nxt = mark.copy()
            for a in range(self.dim):
                for s in range(2):
                    j = self.nbr[a, s]
                    ok = j >= 0
                    nxt[ok] |= mark[j[ok]]
            mark = nxt
        return mark & self.interior

    # -- stencil operators ---------------------------------------------------
    def _mirror_sign(self, axis, side, parity):
        """Sign applied to the mirrored neighbor value across a reflect plane."""
        if parity == 1 or not self.reflect[axis] or side != 0:
            return np.ones(self.n_nodes)
        mirrored = self.multi_index[:, axis] == 0
        return np.where(mirrored, float(parity), 1.0)

    @cached_property
    def d1(self):
        """First derivatives along each axis (Shortley-Weller 3-point weights)."""
        ops = []
        rows = np.arange(self.n_nodes)
        for a in range(self.dim):
            h = self.spacing[a]
            hm, hp = self.theta[a, 0] * h, self.theta[a, 1] * h
            wm = -hp / (hm * (hm + hp))
            w0 = (hp - hm) / (hm * hp)
            wp = hm / (hp * (hm + hp))
            ops.append(self._assemble(rows, a, wm, w0, wp))
        return ops

    @cached_property
    def d2(self):
        """Pure second derivatives along each axis."""
        ops = []
        rows = np.arange(self.n_nodes)
        for a in range(self.dim):
            h = self.spacing[a]
            hm, hp = self.theta[a, 0] * h, self.theta[a, 1] * h
            wm = 2.0 / (hm * (hm + hp))
            wp = 2.0 / (hp * (hm + hp))
            ops.append(self._assemble(rows, a, wm, -(wm + wp), wp))
        return ops

    def _assemble(self, rows, a, wm, w0, wp):
        n = self.n_nodes
        r, c, v = [rows], [rows], [w0]
        for s, w in ((0, wm), (1, wp)):
            j = self.nbr[a, s]
            ok = j >= 0
            r.append(rows[ok])
            c.append(j[ok])
            v.append(w[ok])
        return sp.csr_matrix(
            (np.concatenate(v), (np.concatenate(r), np.concatenate(c))), shape=(n, n)
        )

    def d1_free(self, axis, parity=1):
        """First derivative of a field with no known boundary values.

        Central where both neighbors are owned, otherwise a one-sided
        second-order (or first-order, if only one node is available) difference.
        ``parity`` is the field's sign under reflection across a mirror axis.
        """
        n = self.n_nodes
        h = self.spacing[axis]
        rows = np.arange(n)
        jm, jp = self.nbr[axis, 0], self.nbr[axis, 1]
        sm = self._mirror_sign(axis, 0, parity)
        r, c, v = [], [], []

        both = (jm >= 0) & (jp >= 0)
        r += [rows[both]] * 2
        c += [jp[both], jm[both]]
        v += [np.full(both.sum(), 0.5 / h), -0.5 / h * sm[both]]

        for side, j, other in ((1, jp, jm), (0, jm, jp)):
            # neighbor on `side` missing, use nodes on the other side
            miss = (j < 0) & (other >= 0)
            sign = 1.0 if side == 1 else -1.0  # backward vs forward difference
            o = other[miss]
            oo = self.nbr[axis, 0 if side == 1 else 1][o]
            two = oo >= 0
            m_rows = rows[miss]
            # second order: (3 q0 - 4 q1 + q2) / 2h  (backward), mirrored for forward
            r += [m_rows[two]] * 3
            c += [m_rows[two], o[two], oo[two]]
            v += [
                np.full(two.sum(), sign * 1.5 / h),
                np.full(two.sum(), -sign * 2.0 / h),
                np.full(two.sum(), sign * 0.5 / h),
            ]
            one = ~two
            r += [m_rows[one]] * 2
            c += [m_rows[one], o[one]]
            v += [np.full(one.sum(), sign / h), np.full(one.sum(), -sign / h)]
        return sp.csr_matrix(
            (np.concatenate(v), (np.concatenate(r), np.concatenate(c))), shape=(n, n)
        )

    def _parity(self, axis):
        return -1 if self.reflect[axis] else 1

    @cached_property
    def dmix(self):
        """Mixed derivatives ``{(i, j): op}`` for ``i < j``.

        Standard 4-point cross at nodes whose axis neighbors and diagonal
        neighbors are all owned; elsewhere the symmetrized product of the
        boundary-free first derivative with the Shortley-Weller one.
        """
        ops = {}
        n = self.n_nodes
        rows = np.arange(n)
        for i in range(self.dim):
            for j in range(i + 1, self.dim):
                diag = {
                    (si, sj): self.diagonal_neighbor(i, si, j, sj)
                    for si in (-1, 1)
                    for sj in (-1, 1)
                }
                full = (
                    np.all(self.nbr[[i, j]] >= 0, axis=(0, 1))
                    & np.all([d >= 0 for d in diag.values()], axis=0)
                )
                w = 0.25 / (self.spacing[i] * self.spacing[j])
                r, c, v = [], [], []
                for (si, sj), d in diag.items():
                    r.append(rows[full])
                    c.append(d[full])
                    v.append(np.full(full.sum(), si * sj * w))
                cross = sp.csr_matrix(
                    (np.concatenate(v), (np.concatenate(r), np.concatenate(c))), shape=(n, n)
                )
                prod = 0.5 * (
                    self.d1_free(j, self._parity(i)) @ self.d1[i]
                    + self.d1_free(i, self._parity(j)) @ self.d1[j]
                )
                keep = sp.diags((~full).astype(float))
                ops[(i, j)] = (cross + keep @ prod).tocsr()
        return ops

    @cached_property
    def hess_wide(self):
        """Gradient-of-gradient Hessian ``{(i, j): op}`` for ``i <= j``.

        Independent of the compact stencils used by the PDE residual; the
        curvature module uses it for the graph-form consistency check.
        """
        ops = {}
        for i in range(self.dim):
            for j in range(i, self.dim):
                ops[(i, j)] = (
                    0.5
                    * (
                        self.d1_free(j, self._parity(i)) @ self.d1[i]
                        + self.d1_free(i, self._parity(j)) @ self.d1[j]
                    )
                ).tocsr()
        return ops

    def hess_compact(self):
        """Compact Hessian operators ``{(i, j): op}`` for ``i <= j``."""
        ops = {(i, i): self.d2[i] for i in range(self.dim)}
        ops.update(self.dmix)
        return ops

    # -- chart data at nodes ------------------------------------------------
    @cached_property
    def node_metric(self):
        """Cached ``(ginv, christoffel, hidden_weights)`` at owned nodes."""
        ch = self.chart
        x = self.coords
        ch.check(x)
        return ch.inverse(x), ch.christoffel(x), ch.hidden_weights(x)

    # -- I/O ------------------------------------------------------------------
    def to_csv(self, path):
        """Dump every box node: axis coordinates, class code, implicit value."""
        idx = np.indices(self.counts).reshape(self.dim, -1).T
        coords = self.box_coords(idx)
        cls = self.box_class().reshape(-1)
        phi = self.shape.phi(coords)
        header = [f"x{a}" for a in range(self.dim)] + ["class", "value"]
        _write_rows(path, header, coords, cls, phi)

    def describe(self) -> dict:
        return {
            "dim": self.dim,
            "spacing": self.spacing.tolist(),
            "origin": self.origin.tolist(),
            "counts": list(self.counts),
            "periodic": [p is not None for p in self.periodic],
            "n_nodes": int(self.n_nodes),
            "n_interior": int(self.interior.sum()),
        }


def _write_rows(path, header, coords, cls, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for x, c, v in zip(coords, cls, values):
            w.writerow([format(float(t), ".17g") for t in x] + [int(c), format(float(v), ".17g")])


@dataclass
class ScalarField:
    """Nodal values on the owned nodes of a grid; ``0`` is implied on ``dK0``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_nodes,):
            raise ValueError(
                f"field has shape {self.values.shape}, grid has {self.grid.n_nodes} nodes"
            )

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy())

    def gradient(self):
        """Coordinate gradient at every owned node, shape ``(N, dim)``."""
        return np.stack([op @ self.values for op in self.grid.d1], axis=1)

    def stencil_gradient(self, node):
        return self.gradient()[node]

    def stencil_second(self, node, i, j):
        i, j = min(i, j), max(i, j)
        return float((self.grid.hess_compact()[(i, j)] @ self.values)[node])

    def to_csv(self, path):
        header = [f"x{a}" for a in range(self.grid.dim)] + ["class", "value"]
        _write_rows(path, header, self.grid.coords, self.grid.node_class, self.values)

    @classmethod
    def from_csv(cls, grid, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if len(data) != grid.n_nodes or not np.allclose(data[:, : grid.dim], grid.coords):
            raise ConfigurationError(f"{path} does not match the grid")
        return cls(grid, data[:, -1])


def _axis_nodes(lo, hi, h, pad, reflect):
    if reflect:
        start = 0.5 * h
        count = int(np.ceil((hi - start) / h)) + 1 + pad
        return start, count
    k0 = int(np.floor(lo / h)) - pad
    k1 = int(np.ceil(hi / h)) + pad
    return k0 * h, k1 - k0 + 1


def build_grid(shape: DomainShape, chart: MetricChart, h, padding: int = 2) -> Grid:
    """Discretize ``shape`` on a uniform grid of spacing ``h`` (scalar or per axis).

    Non-periodic axes are aligned so that coordinate 0 is a node; reflecting
    axes start at ``h/2``; periodic axes use the closest spacing that divides
    the period.
    """
    d = chart.dim
    hs = np.broadcast_to(np.asarray(h, dtype=float), (d,)).copy()
    if np.any(hs <= 0):
        raise ConfigurationError("grid spacing must be positive")
    lo, hi = (np.asarray(b, dtype=float) for b in shape.bbox)
    origin = np.zeros(d)
    counts = []
    for a in range(d):
        period = chart.periodic[a]
        if period:
            n = max(int(round(period / hs[a])), 3)
            hs[a] = period / n
            origin[a] = 0.0
            counts.append(n)
            continue
        if not (np.isfinite(lo[a]) and np.isfinite(hi[a])):
            raise ConfigurationError(f"domain is unbounded along non-periodic axis {a}")
        o, n = _axis_nodes(lo[a], hi[a], hs[a], padding, chart.reflect[a])
        origin[a] = o
        counts.append(n)
    axes = [(np.round(2.0 * origin[a] / hs[a]) / 2.0 + np.arange(counts[a])) * hs[a] for a in range(d)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    inside = shape.phi(mesh.reshape(-1, d)).reshape(counts) < 0
    if not inside.any():
        raise ConfigurationError("no grid node lies inside the domain (h too coarse)")
    grid = Grid(chart, shape, hs, origin, counts, chart.periodic, chart.reflect, inside)
    # nodes sitting on the boundary up to rounding would get near-singular weights
    tiny = np.any((grid.nbr < 0) & (grid.theta < THETA_MIN), axis=(0, 1))
    if tiny.any():
        inside = inside.copy()
        inside[tuple(grid.multi_index[tiny].T)] = False
        if not inside.any():
            raise ConfigurationError("no grid node lies inside the domain (h too coarse)")
        grid = Grid(chart, shape, hs, origin, counts, chart.periodic, chart.reflect, inside)
    if not grid.interior.any():
        raise ConfigurationError("empty interior: every owned node touches the boundary")
    adj = sp.csr_matrix(
        (
            np.ones(int((grid.nbr >= 0).sum())),
            (
                np.tile(np.arange(grid.n_nodes), 2 * d)[grid.nbr.reshape(-1) >= 0],
                grid.nbr.reshape(-1)[grid.nbr.reshape(-1) >= 0],
            ),
        ),
        shape=(grid.n_nodes, grid.n_nodes),
    )
    ncomp, _ = connected_components(adj, directed=False)
    if ncomp != 1:
        raise ConfigurationError(f"owned nodes split into {ncomp} components; refine h")
    return grid


@dataclass
class BoundaryTrace:
    points: np.ndarray  # (M, dim) boundary crossings
    grad_norm: np.ndarray  # (M,) one-sided |Du|_g
    reliable: np.ndarray  # (M,) bool: normal well aligned with the grid line


def boundary_trace(fld: ScalarField, min_alignment: float = 0.5) -> BoundaryTrace:
    """One-sided metric gradient norm at each boundary crossing.

    The derivative along the crossing grid line comes from the quadratic
    through the crossing (value 0), the adjacent node and the next node
    inward.  Since ``u = 0`` on ``dK0`` the covector ``Du`` is parallel to
    ``d phi``, which fixes the remaining components.  Crossings whose grid line
    makes a shallow angle with the boundary (``|n_axis| < min_alignment``) are
    flagged unreliable.
    """
    g = fld.grid
    if not g.bpoints:
        return BoundaryTrace(np.zeros((0, g.dim)), np.zeros(0), np.zeros(0, bool))
    node = np.array([b[0] for b in g.bpoints])
    axis = np.array([b[1] for b in g.bpoints])
    side = np.array([b[2] for b in g.bpoints])
    theta = np.array([b[3] for b in g.bpoints])
    pts = np.array([b[4] for b in g.bpoints])
    u = fld.values
    h = g.spacing[axis]
    step = np.where(side == 1, 1.0, -1.0)
    inward = g.nbr[axis, 1 - side, node]
    u0 = u[node]
    # positions along the line measured from the boundary point, pointing inward
    s0 = theta * h
    s1 = s0 + h
    u1 = np.where(inward >= 0, u[np.maximum(inward, 0)], 0.0)
    quad = inward >= 0
    # derivative at s=0 of the interpolant through (0,0), (s0,u0), (s1,u1)
    d_quad = (u0 * s1 / s0 - u1 * s0 / s1) / (s1 - s0)
    d_lin = u0 / s0
    du_inward = np.where(quad, d_quad, d_lin)
    du_axis = -step * du_inward  # derivative along +axis

    # Du = lam * dphi, with lam fixed by the axis component
    eps = 1e-7 * np.maximum(g.spacing.max(), 1.0)
    dphi = np.zeros_like(pts)
    for a in range(g.dim):
        e = np.zeros(g.dim)
        e[a] = eps
        dphi[:, a] = (g.shape.phi(pts + e) - g.shape.phi(pts - e)) / (2 * eps)
    comp = dphi[np.arange(len(pts)), axis]
    lam = du_axis / comp
    du = lam[:, None] * dphi
    gn = norm_grad(g.chart, du, pts)
    align = np.abs(comp) / np.linalg.norm(dphi, axis=1)
    return BoundaryTrace(pts, gn, align >= min_alignment)

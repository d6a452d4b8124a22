"""Geometry of the graph of ``u / eps`` and of the level sets of ``u``.

Graph quantities use the wide gradient-of-gradient Hessian so that the
identity ``H + sigma u = kappa V`` can be checked against the residual's
compact stencils.  Level-set quantities interpolate the nodal gradient and
compact Hessian to the isocontour crossings of grid edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import ScalarField
from .pde import RegParams

__all__ = [
    "GraphGeometry",
    "LevelSetSample",
    "EstimateReport",
    "graph_quantities",
    "level_values",
    "level_sets",
    "verify_estimates",
    "g_boundary_max_check",
]

MIN_REGULAR_POINTS = 20
FIT_WINDOW = (0.1, 0.9)


@dataclass
class GraphGeometry:
    W: np.ndarray
    V: np.ndarray
    tau_nu: np.ndarray
    tau_top_sq: np.ndarray
    H: np.ndarray
    A: np.ndarray
    w: np.ndarray
    G: np.ndarray
    rho: float
    Lambda: float
    dim: int  # dimension of the graph (ambient dimension of N)


def _node_arrays(fld: ScalarField, wide: bool):
    g = fld.grid
    u = fld.values
    d = g.dim
    p = np.stack([op @ u for op in g.d1])
    ops = g.hess_wide if wide else g.hess_compact()
    s = np.empty((d, d, g.n_nodes))
    for (i, j), op in ops.items():
        s[i, j] = s[j, i] = op @ u
    ginv, gam, hid = (np.moveaxis(a, 0, -1) for a in g.node_metric)
    return p, s, ginv, gam, hid


def graph_quantities(
    fld: ScalarField, params: RegParams, rho: float = 0.0, Lambda: float = 0.0
) -> GraphGeometry:
    """Pointwise geometry of ``graph(u / eps)`` in ``N x R`` at every owned node.

    Second fundamental form ``h_ij = Hess f_ij / W`` with ``f = u / eps`` and
    induced inverse metric ``g^ij - f^i f^j / W^2``; ``H`` is taken with the
    sign that makes it positive on mean convex data (``H = kappa V - sigma u``
    for solutions).
    """
    eps, sigma = params.eps, params.sigma
    g = fld.grid
    u = fld.values
    p, s, ginv, gam, hid = _node_arrays(fld, wide=True)
    m = g.chart.hidden_dim
    hc = (s - np.einsum("kijn,kn->ijn", gam, p)) / eps
    pf = p / eps
    qf = np.einsum("ijn,jn->in", ginv, pf)
    grad_sq = np.einsum("in,in->n", pf, qf)
    W = np.sqrt(1.0 + grad_sq)
    h = hc / W
    ghat = ginv - np.einsum("in,jn->ijn", qf, qf) / W**2
    hid_h = np.einsum("kn,kn->n", hid, pf) / W
    trace = np.einsum("ijn,ijn->n", ghat, h) + m * hid_h
    a_sq = np.einsum("ikn,jln,ijn,kln->n", ghat, ghat, h, h) + m * hid_h**2
    A = np.sqrt(np.maximum(a_sq, 0.0))
    V = 1.0 / (eps * W)
    wgt = np.exp(rho * u)
    G = (A + Lambda * sigma * u) / (V * wgt)
    return GraphGeometry(
        W=W,
        V=V,
        tau_nu=1.0 / W,
        tau_top_sq=grad_sq / W**2,
        H=-trace,
        A=A,
        w=wgt,
        G=G,
        rho=rho,
        Lambda=Lambda,
        dim=g.chart.ambient_dim,
    )


@dataclass
class LevelSetSample:
    t: float
    points: np.ndarray
    grad_norm: np.ndarray
    H: np.ndarray
    A: np.ndarray
    regular: np.ndarray

    @property
    def n_regular(self) -> int:
        return int(self.regular.sum())

    @property
    def min_H(self) -> float:
        return float(np.min(self.H[self.regular])) if self.n_regular else np.nan

    @property
    def max_ratio(self) -> float:
        if not self.n_regular:
            return np.nan
        return float(np.max(self.A[self.regular] / self.H[self.regular]))


def level_values(fld: ScalarField, count: int, active=None) -> np.ndarray:
    """``count`` equally spaced levels strictly inside ``(0, max u)``."""
    u = fld.values if active is None else fld.values[active]
    t_max = float(np.max(u))
    return t_max * np.arange(1, count + 1) / (count + 1)


def level_sets(fld: ScalarField, levels, gamma: float, active=None) -> list:
    """Sample ``{u = t}`` at the crossings of grid edges joining interior nodes.

    Level mean curvature ``H = -div_g(Du/|Du|)`` and second fundamental form
    ``A = -Hess u|_tangent / |Du|`` (sign: positive on shrinking spheres).
    Points with ``|Du|_g < gamma`` are kept but marked non-regular.
    """
    g = fld.grid
    u = fld.values
    chart = g.chart
    d = g.dim
    m = chart.hidden_dim
    p, s, _, _, _ = _node_arrays(fld, wide=False)
    usable = g.interior.copy()
    if active is not None:
        usable &= active
    # all edges (n0 -> n1 along +axis) between usable nodes
    e0, e1, ax = [], [], []
    for a in range(d):
        j = g.nbr[a, 1]
        ok = usable & (j >= 0)
        ok[ok] &= usable[j[ok]]
        # skip self-loops from reflection
        ok[ok] &= j[ok] != np.flatnonzero(ok)
        e0.append(np.flatnonzero(ok))
        e1.append(j[ok])
        ax.append(np.full(ok.sum(), a))
    e0, e1, ax = (np.concatenate(v) for v in (e0, e1, ax))
    u0, u1 = u[e0], u[e1]
    out = []
    for t in levels:
        cross = ((u0 - t) * (u1 - t) < 0) | ((u0 == t) & (u1 != t))
        i0, i1, a = e0[cross], e1[cross], ax[cross]
        lam = (t - u[i0]) / (u[i1] - u[i0])
        x = g.coords[i0].copy()
        x[np.arange(len(a)), a] += lam * g.spacing[a]
        pp = (1 - lam) * p[:, i0] + lam * p[:, i1]
        ss = (1 - lam) * s[:, :, i0] + lam * s[:, :, i1]
        if len(x):
            ginv = np.moveaxis(chart.inverse(x), 0, -1)
            gam = np.moveaxis(chart.christoffel(x), 0, -1)
            hid = np.moveaxis(chart.hidden_weights(x), 0, -1)
        else:
            ginv = np.zeros((d, d, 0))
            gam = np.zeros((d, d, d, 0))
            hid = np.zeros((d, 0))
        hc = ss - np.einsum("kijn,kn->ijn", gam, pp)
        q = np.einsum("ijn,jn->in", ginv, pp)
        gn = np.sqrt(np.maximum(np.einsum("in,in->n", pp, q), 0.0))
        safe = np.where(gn > 0, gn, 1.0)
        proj = ginv - np.einsum("in,jn->ijn", q, q) / safe**2
        hid_a = -np.einsum("kn,kn->n", hid, pp) / safe
        lvl_A = -hc / safe
        H = np.einsum("ijn,ijn->n", proj, lvl_A) + m * hid_a
        A = np.sqrt(
            np.maximum(np.einsum("ikn,jln,ijn,kln->n", proj, proj, lvl_A, lvl_A) + m * hid_a**2, 0)
        )
        regular = (gn >= gamma) & (gn > 0)
        out.append(LevelSetSample(float(t), x, gn, H, A, regular))
    return out


@dataclass
class EstimateReport:
    levels: list
    minH: list
    maxRatio: list
    n_regular: list
    fit: dict
    rho_thm: float
    flags: dict
    window: tuple
    inconclusive: bool = False
    notes: list = field(default_factory=list)

    def passed(self) -> bool:
        return not self.inconclusive and all(self.flags.values())

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "minH": self.minH,
            "maxRatio": self.maxRatio,
            "nRegular": self.n_regular,
            "fit": self.fit,
            "rho_thm": self.rho_thm,
            "flags": self.flags,
            "window": list(self.window),
            "inconclusive": self.inconclusive,
            "notes": self.notes,
        }


def _linfit(t, y):
    slope, icpt = np.polyfit(t, y, 1)
    return float(slope), float(icpt)


def verify_estimates(levels, rho_thm, eps, sigma, Lambda=0.0, t_max=None) -> EstimateReport:
    """Fit ``min H ~ H0 e^{-rho_H t}`` and ``max |A|/H ~ C e^{rho_A t}`` over levels.

    The sigma-corrected quantities ``H + sigma t`` and
    ``(|A| + Lambda sigma t) / (H + sigma t)`` are used.  Flags:

    ``lower_H``
        ``min H(t) e^{rho_thm t}`` never drops below half its value at the
        first level of the fit window.
    ``upper_ratio``
        ``max |A|/H (t) e^{-rho_thm t}`` never exceeds twice its value at the
        first level of the window.
    ``rate_H``
        the fitted decay rate satisfies ``rho_H <= rho_thm + 0.05``.
    """
    ts = np.array([lv.t for lv in levels], dtype=float)
    if t_max is None:
        t_max = float(ts.max()) if len(ts) else 0.0
    min_h, ratio, nreg = [], [], []
    for lv in levels:
        if lv.n_regular:
            hh = lv.H[lv.regular] + sigma * lv.t
            aa = lv.A[lv.regular] + Lambda * sigma * lv.t
            min_h.append(float(hh.min()))
            ratio.append(float(np.max(aa / hh)))
        else:
            min_h.append(np.nan)
            ratio.append(np.nan)
        nreg.append(lv.n_regular)
    min_h, ratio, nreg_a = np.array(min_h), np.array(ratio), np.array(nreg)
    lo, hi = FIT_WINDOW[0] * t_max, FIT_WINDOW[1] * t_max
    use = (ts >= lo) & (ts <= hi) & (nreg_a >= MIN_REGULAR_POINTS) & (min_h > 0)
    report = EstimateReport(
        levels=ts.tolist(),
        minH=min_h.tolist(),
        maxRatio=ratio.tolist(),
        n_regular=[int(v) for v in nreg],
        fit={"H0": None, "rhoH": None, "C": None, "rhoA": None},
        rho_thm=float(rho_thm),
        flags={"lower_H": False, "upper_ratio": False, "rate_H": False},
        window=(lo, hi),
    )
    if use.sum() < 2:
        report.inconclusive = True
        report.notes.append("fewer than two levels with enough regular points")
        return report
    tw = ts[use]
    s_h, i_h = _linfit(tw, np.log(min_h[use]))
    s_a, i_a = _linfit(tw, np.log(ratio[use]))
    report.fit = {"H0": float(np.exp(i_h)), "rhoH": -s_h, "C": float(np.exp(i_a)), "rhoA": s_a}
    lower = min_h[use] * np.exp(rho_thm * tw)
    upper = ratio[use] * np.exp(-rho_thm * tw)
    report.flags = {
        "lower_H": bool(np.min(lower) >= 0.5 * lower[0]),
        "upper_ratio": bool(np.max(upper) <= 2.0 * upper[0]),
        "rate_H": bool(-s_h <= rho_thm + 0.05),
    }
    return report


def g_boundary_max_check(geometry: GraphGeometry, grid, layers: int = 2) -> dict:
    """Where the discrete maximum of ``G`` sits: boundary band vs deeper interior.

    Only interior nodes are considered (second differences at cut cells are
    skipped).  ``ratio = max_G_interior / max_G_boundary_band``; 0 when ``G``
    vanishes identically.
    """
    band = grid.boundary_band(layers)
    deep = grid.interior & ~band
    G = geometry.G
    gb = float(np.max(G[band])) if band.any() else 0.0
    gi = float(np.max(G[deep])) if deep.any() else 0.0
    if gb == 0.0 and gi == 0.0:
        ratio = 0.0
    elif gb == 0.0:
        ratio = np.inf
    else:
        ratio = gi / gb
    return {"max_G_interior": gi, "max_G_boundary_band": gb, "ratio": ratio}

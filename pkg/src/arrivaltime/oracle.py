"""Reference solutions for symmetric configurations.

Closed-form arrival times and level curvatures for round balls in flat and
hyperbolic space and for the band around the waist of the ``cosh`` neck, plus
a 1D finite-volume solver for the regularized equation in the radial
variable.  The 1D solver shares no code with the grid discretization.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

__all__ = [
    "RadialCase",
    "RadialProfile",
    "OracleUnavailable",
    "euclidean_ball",
    "hyperbolic_ball",
    "neck_band",
    "radial_arrival",
    "radial_min_H",
    "radial_coordinate",
    "radial_pde_solve",
    "write_table",
]


class OracleUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class RadialCase:
    """A rotationally symmetric test problem.

    ``kind`` is ``euclidean_ball``, ``hyperbolic_ball`` or ``neck_band``;
    ``radius`` is the boundary radius ``R`` (geodesic for the hyperbolic
    ball) or the band half-width ``a``; ``n`` is the ambient dimension.
    """

    kind: str
    n: int
    radius: float

    def __post_init__(self):
        if self.kind not in ("euclidean_ball", "hyperbolic_ball", "neck_band"):
            raise ValueError(f"unknown case '{self.kind}'")
        if self.n < 2 or self.radius <= 0:
            raise ValueError("need n >= 2 and a positive radius")
        if self.kind == "neck_band" and self.n != 2:
            raise ValueError("the neck band is two-dimensional")

    @property
    def extinction_time(self) -> float:
        return float(radial_arrival(self, 0.0))

    def area_density(self, r):
        r = np.asarray(r, float)
        if self.kind == "euclidean_ball":
            return r ** (self.n - 1)
        if self.kind == "hyperbolic_ball":
            return np.sinh(r) ** (self.n - 1)
        return np.cosh(r)

    def level_H(self, r):
        """Mean curvature of the level set through radial coordinate ``r``."""
        r = np.asarray(r, float)
        with np.errstate(divide="ignore"):
            if self.kind == "euclidean_ball":
                return (self.n - 1) / r
            if self.kind == "hyperbolic_ball":
                return (self.n - 1) / np.tanh(r)
        return np.tanh(r)

    def describe(self) -> dict:
        return {"kind": self.kind, "n": self.n, "radius": self.radius}


def euclidean_ball(n: int = 2, R: float = 1.0) -> RadialCase:
    return RadialCase("euclidean_ball", n, R)


def hyperbolic_ball(n: int = 2, R: float = 1.0) -> RadialCase:
    return RadialCase("hyperbolic_ball", n, R)


def neck_band(a: float = 1.0) -> RadialCase:
    return RadialCase("neck_band", 2, a)


def radial_arrival(case: RadialCase, r):
    """Arrival time at radial coordinate ``r`` (``inf`` on the neck's waist)."""
    r = np.abs(np.asarray(r, float))
    if np.any(r > case.radius * (1 + 1e-12)):
        raise ValueError("coordinate outside the initial domain")
    m = case.n - 1
    R = case.radius
    if case.kind == "euclidean_ball":
        return (R**2 - r**2) / (2 * m)
    if case.kind == "hyperbolic_ball":
        return (np.log(np.cosh(R)) - np.log(np.cosh(r))) / m
    with np.errstate(divide="ignore"):
        return np.log(np.sinh(R)) - np.log(np.sinh(r))


def radial_min_H(case: RadialCase, t):
    """Level mean curvature at time ``t`` (constant along each level)."""
    t = np.asarray(t, float)
    if np.any(t < 0):
        raise ValueError("t must be nonnegative")
    m = case.n - 1
    R = case.radius
    if case.kind == "neck_band":
        x = np.arcsinh(np.sinh(R) * np.exp(-t))
        return np.tanh(x)
    if np.any(t >= case.extinction_time):
        raise ValueError("t at or past extinction")
    if case.kind == "euclidean_ball":
        return m / np.sqrt(R**2 - 2 * m * t)
    r = np.arccosh(np.cosh(R) * np.exp(-m * t))
    return m / np.tanh(r)


def radial_coordinate(case: RadialCase, x: np.ndarray) -> np.ndarray:
    """Map grid-chart points to the case's radial coordinate.

    Euclidean ball: ``|x|``.  Hyperbolic ball in the Poincare chart: geodesic
    distance ``2 artanh |x|``.  Neck: ``|x_0|``.
    """
    x = np.atleast_2d(np.asarray(x, float))
    if case.kind == "neck_band":
        return np.abs(x[:, 0])
    rho = np.linalg.norm(x, axis=1)
    if case.kind == "hyperbolic_ball":
        return 2.0 * np.arctanh(rho)
    return rho


# -- 1D regularized solve -----------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(4)


@dataclass
class RadialProfile:
    case: RadialCase
    eps: float
    sigma: float
    r: np.ndarray
    u: np.ndarray
    residual_norm: float

    def __call__(self, r):
        return np.interp(np.abs(np.asarray(r, float)), self.r, self.u)


class _FiniteVolume:
    def __init__(self, case, h):
        n_cells = int(round(case.radius / h))
        if n_cells < 4:
            raise ValueError("fine_h too coarse for the case radius")
        self.h = case.radius / n_cells
        self.r = np.linspace(0.0, case.radius, n_cells + 1)
        faces = 0.5 * (self.r[:-1] + self.r[1:])
        self.w_face = case.area_density(faces)
        lo = np.concatenate([[0.0], faces])
        hi = np.concatenate([faces, [case.radius]])
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        pts = mid[:, None] + half[:, None] * _GL_NODES[None, :]
        self.vol = (case.area_density(pts) @ _GL_WEIGHTS) * half
        self.n = n_cells  # unknowns u_0 .. u_{n-1}; u_n = 0

    def evaluate(self, u, eps, sigma, kappa, want_jac=False):
        h = self.h
        full = np.append(u, 0.0)
        g = np.diff(full) / h  # face slopes, length n
        Wf = np.sqrt(eps**2 + g**2)
        flux = self.w_face * g / Wf
        div = np.empty(self.n)
        div[0] = flux[0]
        div[1:] = flux[1:] - flux[:-1]
        div /= self.vol[: self.n]
        c = np.empty(self.n)
        c[0] = 0.0
        c[1:] = (full[2:] - full[:-2]) / (2 * h)
        Wn = np.sqrt(eps**2 + c**2)
        F = div + kappa / Wn - sigma * u
        if not want_jac:
            return F, None
        dflux = self.w_face * eps**2 / Wf**3 / h  # d flux_f / d(u_{f+1} - u_f)
        vol = self.vol[: self.n]
        dc = -kappa * c / Wn**3 / (2 * h)
        upper = np.zeros(self.n)
        diag = np.zeros(self.n)
        lower = np.zeros(self.n)
        # flux[f] enters cell f with + and cell f+1 with -
        diag -= dflux / vol
        upper[:-1] += dflux[:-1] / vol[:-1]
        diag[1:] -= dflux[:-1] / vol[1:]
        lower[1:] += dflux[:-1] / vol[1:]
        upper[1:-1] += dc[1:-1]
        lower[1:] -= dc[1:]
        diag -= sigma
        ab = np.zeros((3, self.n))
        ab[0, 1:] = upper[:-1]
        ab[1] = diag
        ab[2, :-1] = lower[1:]
        return F, ab


def _newton(fv, u, eps, sigma, kappa, tol, max_iter=60):
    F, ab = fv.evaluate(u, eps, sigma, kappa, True)
    norm = np.max(np.abs(F))
    for _ in range(max_iter):
        if norm <= tol:
            return u, norm, True
        du = solve_banded((1, 1), ab, -F)
        lam = 1.0
        while lam > 2.0**-30:
            trial = u + lam * du
            Ft, abt = fv.evaluate(trial, eps, sigma, kappa, True)
            nt = np.max(np.abs(Ft))
            if np.isfinite(nt) and nt < norm:
                break
            lam *= 0.5
        else:
            floor = np.finfo(float).eps * np.max(np.abs(ab).sum(0) * (np.abs(u) + 1))
            return u, norm, bool(norm <= max(tol, floor))
        u, F, ab, norm = trial, Ft, abt, nt
    return u, norm, bool(norm <= tol)


def radial_pde_solve(
    case: RadialCase, eps: float, sigma: float, fine_h: float, tol: float = 1e-10
) -> RadialProfile:
    """Solve ``(w v)'/w + 1/W = sigma u`` with ``v = u'/W``, ``W = sqrt(eps^2 + u'^2)``.

    Conservative cell-centred fluxes on ``[0, R]`` with zero flux through the
    symmetry point and ``u(R) = 0``.  The solve follows ``kappa`` from 0 to 1
    at ``sigma = 1`` and then halves ``sigma`` down to the target.
    """
    if eps <= 0 or sigma <= 0:
        raise ValueError("need eps > 0 and sigma > 0")
    fv = _FiniteVolume(case, fine_h)
    u = np.zeros(fv.n)
    sig = max(1.0, sigma)
    for kappa in np.linspace(0.125, 1.0, 8):
        u, res, ok = _newton(fv, u, eps, sig, kappa, tol)
        if not ok:
            raise OracleUnavailable(f"1D Newton failed at kappa = {kappa}")
    while sig > sigma:
        sig = max(sig / 2, sigma)
        u, res, ok = _newton(fv, u, eps, sig, 1.0, tol)
        if not ok:
            raise OracleUnavailable(f"1D Newton failed at sigma = {sig:g}")
    return RadialProfile(case, eps, sigma, fv.r, np.append(u, 0.0), float(res))


def write_table(case: RadialCase, r, path, profile: RadialProfile | None = None):
    """CSV with columns ``r, u, H`` (and ``u_reg`` when a profile is given)."""
    r = np.asarray(r, float)
    u = radial_arrival(case, r)
    H = case.level_H(r)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "u", "H"] + (["u_reg"] if profile is not None else []))
        for k in range(len(r)):
            row = [format(v, ".17g") for v in (r[k], u[k], H[k])]
            if profile is not None:
                row.append(format(float(profile(r[k])), ".17g"))
            w.writerow(row)

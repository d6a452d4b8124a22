"""Ambient Riemannian metrics on a single coordinate chart.

Four analytic families are supported:

* :class:`Euclidean` -- flat ``R^n``.
* :class:`Conformal` -- ``g = phi(x)^2 delta`` for a positive factor ``phi``
  (the Poincare ball is ``phi = 2 / (1 - |x|^2)``).
* :class:`SurfaceOfRevolution` -- ``dx^2 + psi(x)^2 dtheta^2`` with a periodic
  angle.
* :class:`Axisymmetric` -- the meridian half-plane ``(x, r)`` of Euclidean
  ``R^n`` for data that is invariant under rotations about the ``x`` axis.
  The ``n - 2`` rotational directions are not gridded; they enter through the
  volume density ``r^(n-2)`` and one extra Hessian eigenvalue ``u_r / r``.

All evaluation is vectorized over an ``(N, dim)`` array of chart points and
returns arrays with the node axis first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

__all__ = [
    "ChartDomainError",
    "StencilError",
    "MetricChart",
    "Euclidean",
    "Conformal",
    "SurfaceOfRevolution",
    "Axisymmetric",
    "MetricTensors",
    "RicciBounds",
    "CURVATURE_MARGIN",
    "poincare_ball",
    "cosh_neck",
    "metric_at",
    "grad",
    "norm_grad",
    "div_g",
    "hessian_cov",
    "laplace_beltrami",
    "christoffel_fd",
    "ricci_sup",
]

#: Relative margin added to the curvature-derived constants (strict inequalities).
CURVATURE_MARGIN = 0.10


class ChartDomainError(ValueError):
    """Raised when a point lies outside the region where a chart is valid."""


class StencilError(ValueError):
    """Raised when a finite-difference stencil leaves the chart's valid region.

    Callers catch this to fall back to a one-sided scheme.
    """


class MetricTensors(NamedTuple):
    g: np.ndarray  # (N, dim, dim)
    ginv: np.ndarray  # (N, dim, dim)
    sqrt_det_g: np.ndarray  # (N,)
    christoffel: np.ndarray  # (N, k, i, j) = Gamma^k_ij


class RicciBounds(NamedTuple):
    max_ricci: float
    m_thm: float
    rho_thm: float


def _as_points(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != dim:
        raise ValueError(f"expected points with {dim} coordinates, got shape {x.shape}")
    return x, single


def _maybe_squeeze(arr, single):
    return arr[0] if single else arr


class MetricChart:
    """Base class; subclasses provide the pointwise tensors.

    Attributes
    ----------
    dim : int
        Number of gridded coordinates.
    hidden_dim : int
        Number of rotational directions folded into the chart (only nonzero
        for :class:`Axisymmetric`).
    periodic : tuple of float or None
        Period of each axis, ``None`` for non-periodic axes.
    reflect : tuple of bool
        Axes whose lower end is a mirror plane at coordinate 0.
    constant_curvature : float or None
        Sectional curvature when it is known to be constant.
    """

    kind = "abstract"
    dim: int
    hidden_dim = 0
    constant_curvature: float | None = None

    @property
    def ambient_dim(self) -> int:
        return self.dim + self.hidden_dim

    @property
    def periodic(self) -> tuple:
        return (None,) * self.dim

    @property
    def reflect(self) -> tuple:
        return (False,) * self.dim

    # -- pointwise tensors -------------------------------------------------
    def check(self, x: np.ndarray) -> None:
        if not np.all(np.isfinite(x)):
            raise ChartDomainError("non-finite chart coordinates")

    def metric(self, x):
        raise NotImplementedError

    def inverse(self, x):
        return np.linalg.inv(self.metric(x))

    def sqrt_det(self, x):
        return np.sqrt(np.linalg.det(self.metric(x)))

    def dlog_sqrt_det(self, x):
        """Coordinate gradient of ``log sqrt(det g)``, shape ``(N, dim)``."""
        gam = self.christoffel(x)
        # contracted Christoffel identity: Gamma^k_{ik} = d_i log sqrt(g)
        return np.einsum("nkik->ni", gam)

    def christoffel(self, x):
        raise NotImplementedError

    def hidden_weights(self, x):
        """Weights ``c`` with hidden Hessian eigenvalue ``c . Du``; zeros by default."""
        return np.zeros_like(np.asarray(x, dtype=float))

    def ricci_norm(self, x):
        """Operator norm of the Ricci endomorphism at each point."""
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim}


class Euclidean(MetricChart):
    kind = "euclidean"
    constant_curvature = 0.0

    def __init__(self, dim: int = 2):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim

    def metric(self, x):
        n = x.shape[0]
        return np.broadcast_to(np.eye(self.dim), (n, self.dim, self.dim)).copy()

    inverse = metric

    def sqrt_det(self, x):
        return np.ones(x.shape[0])

    def dlog_sqrt_det(self, x):
        return np.zeros_like(x)

    def christoffel(self, x):
        return np.zeros((x.shape[0],) + (self.dim,) * 3)

    def ricci_norm(self, x):
        return np.zeros(x.shape[0])


@dataclass
class _Factor:
    value: Callable
    grad: Callable
    hess: Callable


class Conformal(MetricChart):
    """``g = phi(x)^2 delta``.

    ``phi``, ``dphi`` and ``ddphi`` take an ``(N, dim)`` array and return
    ``(N,)``, ``(N, dim)`` and ``(N, dim, dim)`` arrays.
    """

    kind = "conformal"

    def __init__(self, dim, phi, dphi, ddphi, name="custom", constant_curvature=None):
        self.dim = dim
        self.factor = _Factor(phi, dphi, ddphi)
        self.name = name
        self.constant_curvature = constant_curvature

    def _phi(self, x):
        with np.errstate(divide="ignore", invalid="ignore"):
            p = self.factor.value(x)
        if not np.all(np.isfinite(p)) or np.any(p <= 0):
            raise ChartDomainError(f"conformal factor not finite and positive ({self.name})")
        return p

    def metric(self, x):
        p = self._phi(x)
        return p[:, None, None] ** 2 * np.eye(self.dim)

    def inverse(self, x):
        p = self._phi(x)
        return np.eye(self.dim) / p[:, None, None] ** 2

    def sqrt_det(self, x):
        return self._phi(x) ** self.dim

    def _dlogphi(self, x):
        return self.factor.grad(x) / self._phi(x)[:, None]

    def dlog_sqrt_det(self, x):
        return self.dim * self._dlogphi(x)

    def christoffel(self, x):
        f = self._dlogphi(x)
        eye = np.eye(self.dim)
        # Gamma^k_ij = delta_ik f_j + delta_jk f_i - delta_ij f_k
        return (
            np.einsum("ki,nj->nkij", eye, f)
            + np.einsum("kj,ni->nkij", eye, f)
            - np.einsum("ij,nk->nkij", eye, f)
        )

    def ricci_norm(self, x):
        n = self.dim
        p = self._phi(x)
        dp = self.factor.grad(x)
        ddp = self.factor.hess(x)
        f1 = dp / p[:, None]
        f2 = ddp / p[:, None, None] - np.einsum("ni,nj->nij", f1, f1)
        lap = np.einsum("nii->n", f2)
        sq = np.einsum("ni,ni->n", f1, f1)
        rc = -(n - 2) * (f2 - np.einsum("ni,nj->nij", f1, f1)) - (
            (lap + (n - 2) * sq)[:, None, None] * np.eye(n)
        )
        endo = rc / p[:, None, None] ** 2
        return np.max(np.abs(np.linalg.eigvalsh(endo)), axis=1)

    def describe(self):
        return {"kind": self.kind, "dim": self.dim, "expression": self.name}


class SurfaceOfRevolution(MetricChart):
    """``dx^2 + psi(x)^2 dtheta^2`` on coordinates ``(x, theta)``, theta 2pi-periodic."""

    kind = "revolution"

    def __init__(self, psi, dpsi, ddpsi, name="custom", constant_curvature=None):
        self.dim = 2
        self.factor = _Factor(psi, dpsi, ddpsi)
        self.name = name
        self.constant_curvature = constant_curvature

    @property
    def periodic(self):
        return (None, 2.0 * np.pi)

    def _psi(self, x):
        p = self.factor.value(x[:, 0])
        if not np.all(np.isfinite(p)) or np.any(p <= 0):
            raise ChartDomainError(f"profile not finite and positive ({self.name})")
        return p

    def metric(self, x):
        p = self._psi(x)
        g = np.zeros((x.shape[0], 2, 2))
        g[:, 0, 0] = 1.0
        g[:, 1, 1] = p**2
        return g

    def inverse(self, x):
        p = self._psi(x)
        g = np.zeros((x.shape[0], 2, 2))
        g[:, 0, 0] = 1.0
        g[:, 1, 1] = 1.0 / p**2
        return g

    def sqrt_det(self, x):
        return self._psi(x)

    def dlog_sqrt_det(self, x):
        out = np.zeros_like(x)
        out[:, 0] = self.factor.grad(x[:, 0]) / self._psi(x)
        return out

    def christoffel(self, x):
        p = self._psi(x)
        dp = self.factor.grad(x[:, 0])
        gam = np.zeros((x.shape[0], 2, 2, 2))
        gam[:, 0, 1, 1] = -p * dp
        gam[:, 1, 0, 1] = dp / p
        gam[:, 1, 1, 0] = dp / p
        return gam

    def ricci_norm(self, x):
        return np.abs(self.factor.hess(x[:, 0]) / self._psi(x))

    def describe(self):
        return {"kind": self.kind, "dim": 2, "profile": self.name}


class Axisymmetric(MetricChart):
    """Meridian half-plane ``(x, r)`` of Euclidean ``R^n``, ``n >= 3``."""

    kind = "axisymmetric"
    constant_curvature = 0.0

    def __init__(self, ambient_dim: int = 3):
        if ambient_dim < 3:
            raise ValueError("axisymmetric reduction needs ambient_dim >= 3")
        self.dim = 2
        self.hidden_dim = ambient_dim - 2

    @property
    def reflect(self):
        return (False, True)

    def check(self, x):
        super().check(x)
        if np.any(x[:, 1] == 0.0):
            raise ChartDomainError("axisymmetric chart is singular on the axis r = 0")

    def metric(self, x):
        return np.broadcast_to(np.eye(2), (x.shape[0], 2, 2)).copy()

    inverse = metric

    def sqrt_det(self, x):
        return np.abs(x[:, 1]) ** self.hidden_dim

    def dlog_sqrt_det(self, x):
        self.check(x)
        out = np.zeros_like(x)
        out[:, 1] = self.hidden_dim / x[:, 1]
        return out

    def christoffel(self, x):
        return np.zeros((x.shape[0], 2, 2, 2))

    def hidden_weights(self, x):
        self.check(x)
        out = np.zeros_like(x)
        out[:, 1] = 1.0 / x[:, 1]
        return out

    def ricci_norm(self, x):
        return np.zeros(x.shape[0])

    def describe(self):
        return {"kind": self.kind, "dim": 2, "ambient_dim": self.ambient_dim}


# -- registry expressions ----------------------------------------------------


def poincare_ball(dim: int = 2) -> Conformal:
    """Poincare ball model of hyperbolic space, sectional curvature -1."""

    def phi(x):
        return 2.0 / (1.0 - np.einsum("ni,ni->n", x, x))

    def dphi(x):
        return phi(x)[:, None] ** 2 * x

    def ddphi(x):
        p = phi(x)
        return 2.0 * p[:, None, None] ** 3 * np.einsum("ni,nj->nij", x, x) + p[
            :, None, None
        ] ** 2 * np.eye(x.shape[1])

    return Conformal(dim, phi, dphi, ddphi, name="poincare", constant_curvature=-1.0)


def cosh_neck() -> SurfaceOfRevolution:
    """Profile ``psi = cosh``: a neck around the closed geodesic ``x = 0``, K = -1."""
    return SurfaceOfRevolution(np.cosh, np.sinh, np.cosh, name="cosh", constant_curvature=-1.0)


def flat_cylinder() -> SurfaceOfRevolution:
    one = np.ones_like
    zero = np.zeros_like
    return SurfaceOfRevolution(one, zero, zero, name="cylinder", constant_curvature=0.0)


# -- operations ---------------------------------------------------------------


def metric_at(chart: MetricChart, x) -> MetricTensors:
    """All pointwise tensors at one point ``(dim,)`` or a batch ``(N, dim)``."""
    pts, single = _as_points(x, chart.dim)
    chart.check(pts)
    out = MetricTensors(
        chart.metric(pts), chart.inverse(pts), chart.sqrt_det(pts), chart.christoffel(pts)
    )
    return MetricTensors(*(_maybe_squeeze(a, single) for a in out))


def grad(chart: MetricChart, du, x):
    """Raise the index of a coordinate gradient: ``g^{ij} d_j u``."""
    pts, single = _as_points(x, chart.dim)
    chart.check(pts)
    du = np.atleast_2d(np.asarray(du, dtype=float))
    out = np.einsum("nij,nj->ni", chart.inverse(pts), du)
    return _maybe_squeeze(out, single)


def norm_grad(chart: MetricChart, du, x):
    """Metric norm ``|Du|_g``."""
    pts, single = _as_points(x, chart.dim)
    chart.check(pts)
    du = np.atleast_2d(np.asarray(du, dtype=float))
    sq = np.einsum("nij,ni,nj->n", chart.inverse(pts), du, du)
    return _maybe_squeeze(np.sqrt(np.maximum(sq, 0.0)), single)


def div_g(chart: MetricChart, X, dX, x):
    """Metric divergence ``(1/sqrt g) d_i (sqrt g X^i)``.

    ``X`` is the vector field at ``x`` and ``dX[i, j] = d_j X^i`` its coordinate
    Jacobian there (from a stencil or in closed form).
    """
    pts, single = _as_points(x, chart.dim)
    chart.check(pts)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    dX = np.asarray(dX, dtype=float).reshape(-1, chart.dim, chart.dim)
    out = np.einsum("nii->n", dX) + np.einsum("ni,ni->n", X, chart.dlog_sqrt_det(pts))
    return _maybe_squeeze(out, single)


def hessian_cov(chart: MetricChart, d2u, du, x):
    """Covariant Hessian ``d_ij u - Gamma^k_ij d_k u`` on the gridded axes."""
    pts, single = _as_points(x, chart.dim)
    chart.check(pts)
    d2u = np.asarray(d2u, dtype=float).reshape(-1, chart.dim, chart.dim)
    du = np.atleast_2d(np.asarray(du, dtype=float))
    out = d2u - np.einsum("nkij,nk->nij", chart.christoffel(pts), du)
    return _maybe_squeeze(out, single)


def laplace_beltrami(chart: MetricChart, d2u, du, x):
    """Trace of the covariant Hessian, including folded rotational directions."""
    pts, single = _as_points(x, chart.dim)
    hc = np.atleast_3d(hessian_cov(chart, d2u, du, pts))
    du = np.atleast_2d(np.asarray(du, dtype=float))
    out = np.einsum("nij,nij->n", chart.inverse(pts), hc) + chart.hidden_dim * np.einsum(
        "ni,ni->n", chart.hidden_weights(pts), du
    )
    return _maybe_squeeze(out, single)


def christoffel_fd(chart: MetricChart, x, h: float):
    """Christoffel symbols from central differences of the metric tensor."""
    pts, single = _as_points(x, chart.dim)
    n, d = pts.shape
    dg = np.empty((n, d, d, d))  # dg[:, l, i, j] = d_l g_ij
    for ax in range(d):
        e = np.zeros(d)
        e[ax] = h
        try:
            chart.check(pts + e)
            chart.check(pts - e)
            gp, gm = chart.metric(pts + e), chart.metric(pts - e)
        except ChartDomainError as exc:
            raise StencilError(str(exc)) from exc
        dg[:, ax] = (gp - gm) / (2.0 * h)
    ginv = chart.inverse(pts)
    lower = 0.5 * (
        np.einsum("nilj->nlij", dg) + np.einsum("njli->nlij", dg) - dg
    )  # Gamma_{l, ij}
    out = np.einsum("nkl,nlij->nkij", ginv, lower)
    return _maybe_squeeze(out, single)


def ricci_sup(chart: MetricChart, nodes) -> RicciBounds:
    """``max |Rc|`` over chart points and the derived theorem constants.

    Uses the declared constant curvature when available so the bound is
    exactly grid independent; otherwise the maximum of the pointwise norm.
    """
    if chart.constant_curvature is not None:
        # Ricci endomorphism of a constant-curvature n-manifold is (n-1) K Id
        mx = abs(chart.constant_curvature) * max(chart.ambient_dim - 1, 0)
    else:
        pts = np.atleast_2d(np.asarray(nodes, dtype=float))
        mx = float(np.max(chart.ricci_norm(pts))) if len(pts) else 0.0
    scale = 1.0 + CURVATURE_MARGIN
    return RicciBounds(float(mx), scale * 2.0 * np.sqrt(mx), scale * 4.0 * mx)

"""Damped Newton, kappa continuation, and the sigma / eps sweeps.

The sweeps realize the limit passage ``sigma -> 0`` then ``eps -> 0``: each
rung is warm-started from the previous one, nodes whose value exceeds
``U_cut`` are frozen out of the active set, and ``u_{eps, sigma_min}`` for
the finest rungs is extrapolated in ``eps``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse.linalg as spla

from .grid import Grid, ScalarField, boundary_trace
from .pde import RegParams, jacobian, residual

__all__ = [
    "Schedule",
    "SolveResult",
    "SigmaSweep",
    "EpsilonSweep",
    "SolverError",
    "LinearSolveError",
    "ContinuationError",
    "solve_fixed",
    "continuation_kappa",
    "sigma_sweep",
    "epsilon_sweep",
]

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class LinearSolveError(SolverError):
    pass


class ContinuationError(SolverError):
    def __init__(self, msg, last_kappa):
        super().__init__(msg)
        self.last_kappa = last_kappa


def _geometric(start, stop, ratio):
    out = [start]
    while out[-1] * ratio > stop * (1 + 1e-12):
        out.append(out[-1] * ratio)
    if out[-1] > stop * (1 + 1e-12):
        out.append(stop)
    return out


@dataclass(frozen=True)
class Schedule:
    kappa_step: float = 0.25
    kappa_min_step: float = 1e-4
    sigma0: float = 1.0
    sigma_min: float = 1e-4
    sigma_ratio: float = 0.5
    eps0: float = 0.2
    eps_min: float = 0.0125
    eps_ratio: float = 0.5
    max_iter: int = 50
    tol_abs: float = 1e-9
    min_damping: float = 2.0**-20
    linear_rtol: float = 1e-10
    u_cut: float | None = None
    max_sigma_bisections: int = 4

    def __post_init__(self):
        if not (0 < self.kappa_min_step <= self.kappa_step <= 1):
            raise ValueError("need 0 < kappa_min_step <= kappa_step <= 1")
        for lo, hi, r, name in (
            (self.sigma_min, self.sigma0, self.sigma_ratio, "sigma"),
            (self.eps_min, self.eps0, self.eps_ratio, "eps"),
        ):
            if not (0 < lo <= hi):
                raise ValueError(f"{name} ladder needs 0 < {name}_min <= {name}0")
            if not (0 < r < 1):
                raise ValueError(f"{name}_ratio must lie in (0, 1)")
        if self.tol_abs <= 0 or self.linear_rtol <= 0 or self.min_damping <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.u_cut is not None and self.u_cut <= 0:
            raise ValueError("u_cut must be positive")

    def sigma_ladder(self):
        return _geometric(self.sigma0, self.sigma_min, self.sigma_ratio)

    def eps_ladder(self):
        return _geometric(self.eps0, self.eps_min, self.eps_ratio)

    def cut_for(self, eps):
        """Blow-up threshold, default ``0.5 / (eps sigma_min)``."""
        cut = 0.5 / (eps * self.sigma_min) if self.u_cut is None else self.u_cut
        if cut >= 1.0 / (eps * self.sigma_min):
            raise ValueError("u_cut must stay below 1/(eps sigma_min)")
        return cut


@dataclass
class SolveResult:
    field: ScalarField
    params: RegParams
    residual_norm: float
    iterations: int
    status: str
    path: list = field(default_factory=list)
    clipped: np.ndarray | None = None
    history: list = field(default_factory=list)
    message: str = ""
    tol_effective: float = 0.0

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def sup_bound_ok(self, tol) -> bool:
        u = self.field.values
        bound = self.params.sup_bound()
        return bool(np.all(u >= -tol) and np.all(u <= bound + tol))

    def metadata(self) -> dict:
        return {
            "eps": self.params.eps,
            "sigma": self.params.sigma,
            "kappa": self.params.kappa,
            "residual_norm": self.residual_norm,
            "iterations": self.iterations,
            "status": self.status,
            "tol_effective": self.tol_effective,
            "path": list(self.path),
            "n_clipped": int(self.clipped.sum()) if self.clipped is not None else 0,
            "message": self.message,
        }


def _linear_solve(J, b, rtol):
    try:
        lu = spla.splu(J.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.1)
    except RuntimeError as exc:
        diag = np.abs(J.diagonal())
        est = spla.onenormest(J)
        raise LinearSolveError(
            f"factorization failed ({exc}); |J|_1 ~ {est:.3e}, min |diag| = {diag.min():.3e}"
        ) from exc
    x = lu.solve(b)
    bn = np.linalg.norm(b)
    for _ in range(3):
        r = b - J @ x
        if not np.all(np.isfinite(x)):
            raise LinearSolveError("linear solve produced non-finite values")
        if np.linalg.norm(r) <= rtol * bn:
            break
        x = x + lu.solve(r)
    return x


def solve_fixed(
    params: RegParams, initial: ScalarField, schedule: Schedule, active=None
) -> SolveResult:
    """Damped Newton for ``F(u) = 0`` at fixed ``(eps, sigma, kappa)``.

    Each step solves ``J du = -F`` and halves the step until the sup-norm of
    the residual decreases.  Nodes outside ``active`` keep their initial
    values (frozen Dirichlet data).

    On fine grids the residual of the correctly rounded solution can exceed
    ``tol_abs``; the iteration then also stops once ``|F|`` falls below the
    rounding floor ``eps_mach * max(|J| |u|)``, and ``tol_effective`` records
    the tolerance actually applied.
    """
    if params.sigma <= 0:
        raise ValueError("solve_fixed needs sigma > 0")
    if not np.all(np.isfinite(initial.values)):
        raise ValueError("initial field has non-finite values")
    grid = initial.grid
    act = np.ones(grid.n_nodes, bool) if active is None else np.asarray(active, bool)
    frozen = None if act.all() else ~act
    idx = np.flatnonzero(act)
    u = initial.values.copy()
    fld = ScalarField(grid, u)
    F = residual(fld, params, frozen).values
    norm = float(np.max(np.abs(F[idx]))) if len(idx) else 0.0
    history = [norm]
    it = 0
    tol = schedule.tol_abs
    status, message = "diverged", ""
    while True:
        if norm <= tol:
            status = "converged"
            break
        if it >= schedule.max_iter:
            message = f"no convergence in {schedule.max_iter} iterations"
            break
        sysm = jacobian(fld, params, frozen)
        J = sysm.matrix[idx][:, idx]
        floor = _rounding_floor(sysm.matrix, u, idx)
        if floor > tol:
            tol = floor
            if norm <= tol:
                status = "converged"
                message = "stopped at the rounding floor"
                break
        du = _linear_solve(J, -F[idx], schedule.linear_rtol)
        lam = 1.0
        while lam >= schedule.min_damping:
            trial = u.copy()
            trial[idx] += lam * du
            if np.all(np.isfinite(trial)):
                Ft = residual(ScalarField(grid, trial), params, frozen).values
                nt = float(np.max(np.abs(Ft[idx])))
                if np.isfinite(nt) and nt < norm:
                    break
            lam *= 0.5
        else:
            message = f"line search stagnated at |F| = {norm:.3e}"
            break
        u, F, norm = trial, Ft, nt
        fld = ScalarField(grid, u)
        history.append(norm)
        it += 1
    return SolveResult(
        field=fld,
        params=params,
        residual_norm=norm,
        iterations=it,
        status=status,
        history=history,
        message=message,
        clipped=~act if active is not None else np.zeros(grid.n_nodes, bool),
        tol_effective=tol,
    )


def _rounding_floor(J, u, idx):
    """Residual change caused by rounding every entry of ``u``."""
    return float(np.finfo(float).eps * np.max((abs(J) @ np.abs(u))[idx]))


def continuation_kappa(
    grid: Grid, eps: float, sigma: float, schedule: Schedule, initial=None
) -> SolveResult:
    """Follow the solution branch from ``u = 0`` at ``kappa = 0`` to ``kappa = 1``.

    A failed step halves the kappa increment; a success restores it up to
    ``schedule.kappa_step``.  Every accepted rung is checked against the sup
    bound ``kappa / (sigma eps)``.
    """
    if sigma <= 0:
        raise ValueError("continuation needs sigma > 0")
    zero = grid.zeros() if initial is None else initial
    res = solve_fixed(RegParams(eps, sigma, 0.0), zero, schedule)
    if not res.converged:
        raise ContinuationError(f"kappa = 0 solve failed: {res.message}", 0.0)
    kappa, step = 0.0, schedule.kappa_step
    path = [0.0]
    total_iter = res.iterations
    tol = 10 * schedule.tol_abs
    while kappa < 1.0:
        target = min(1.0, kappa + step)
        trial = solve_fixed(RegParams(eps, sigma, target), res.field, schedule)
        if trial.converged:
            if not trial.sup_bound_ok(tol):
                warnings.warn(f"sup bound violated at kappa = {target}", RuntimeWarning)
            res, kappa = trial, target
            path.append(kappa)
            total_iter += trial.iterations
            step = min(2 * step, schedule.kappa_step)
            continue
        step *= 0.5
        log.debug("kappa step %.3g -> %.3g failed, halving", kappa, target)
        if step < schedule.kappa_min_step:
            raise ContinuationError(
                f"kappa step underflow (eps={eps}, sigma={sigma}); last good kappa = {kappa}",
                kappa,
            )
    res.path = path
    res.iterations = total_iter
    return res


def _trace_stats(fld):
    bt = boundary_trace(fld)
    vals = bt.grad_norm[bt.reliable] if bt.reliable.any() else bt.grad_norm
    if len(vals) == 0:
        return float("nan"), float("nan")
    return float(vals.max()), float(vals.min())


@dataclass
class SigmaSweep:
    eps: float
    results: list
    u_cut: float
    monotone: list  # per rung after the first: min(u_new - u_old) on shared active nodes
    monotone_ok: bool
    frozen: np.ndarray
    trace_sup: list
    trace_inf: list

    @property
    def final(self) -> SolveResult:
        return self.results[-1]

    @property
    def sigmas(self):
        return [r.params.sigma for r in self.results]


def sigma_sweep(
    grid: Grid, eps: float, schedule: Schedule, store=None, start: SolveResult | None = None
) -> SigmaSweep:
    """Walk the sigma ladder at fixed ``eps`` with warm starts and freezing.

    ``store`` (optional) provides ``load(eps, sigma)`` / ``save(result)`` for
    resumable checkpoints.
    """
    ladder = schedule.sigma_ladder()
    cut = schedule.cut_for(eps)
    tol = 10 * schedule.tol_abs
    first = _load(store, grid, eps, ladder[0])
    if first is None:
        first = start or continuation_kappa(grid, eps, ladder[0], schedule)
        _save(store, first)
    results = [first]
    frozen = first.field.values > cut
    monotone = []
    for sigma in ladder[1:]:
        prev = results[-1]
        res = _load(store, grid, eps, sigma)
        if res is None:
            res = _sigma_step(prev, sigma, schedule, ~frozen)
            if res is None:
                warnings.warn(
                    f"sigma sweep stopped at sigma = {prev.params.sigma:g} (eps = {eps:g})",
                    RuntimeWarning,
                )
                break
            _save(store, res)
        shared = ~frozen
        monotone.append(float(np.min(res.field.values[shared] - prev.field.values[shared])))
        frozen = frozen | (res.field.values > cut)
        res.clipped = frozen.copy()
        results.append(res)
    sups, infs = zip(*(_trace_stats(r.field) for r in results))
    return SigmaSweep(
        eps=eps,
        results=results,
        u_cut=cut,
        monotone=monotone,
        monotone_ok=all(m >= -tol for m in monotone),
        frozen=frozen,
        trace_sup=list(sups),
        trace_inf=list(infs),
    )


def _sigma_step(prev, sigma, schedule, active, depth=0):
    params = replace(prev.params, sigma=sigma, kappa=1.0)
    res = solve_fixed(params, prev.field, schedule, active=active)
    if res.converged:
        res.path = [sigma]
        return res
    if depth >= schedule.max_sigma_bisections:
        return None
    mid = float(np.sqrt(prev.params.sigma * sigma))
    half = _sigma_step(prev, mid, schedule, active, depth + 1)
    if half is None:
        return None
    res = _sigma_step(half, sigma, schedule, active, depth + 1)
    if res is not None:
        res.path = half.path + res.path
    return res


def _load(store, grid, eps, sigma):
    return None if store is None else store.load(grid, eps, sigma)


def _save(store, res):
    if store is not None:
        store.save(res)


@dataclass
class EpsilonSweep:
    eps: list
    sweeps: list
    finals: list  # ScalarField per eps: u_{eps, sigma_min}
    active: np.ndarray  # common active set
    extrapolated: ScalarField
    cauchy: list  # sup-norm differences between consecutive rungs on the active set
    warnings: list

    @property
    def finest(self) -> ScalarField:
        return self.finals[-1]


def richardson(fine: ScalarField, coarse: ScalarField, ratio: float) -> ScalarField:
    """First-order extrapolation ``(u_fine - r u_coarse) / (1 - r)``."""
    return ScalarField(fine.grid, (fine.values - ratio * coarse.values) / (1.0 - ratio))


def epsilon_sweep(grid: Grid, schedule: Schedule, store=None) -> EpsilonSweep:
    """Run a sigma sweep for each eps rung and extrapolate in eps."""
    eps_list = schedule.eps_ladder()
    sweeps = []
    for eps in eps_list:
        sweeps.append(sigma_sweep(grid, eps, schedule, store=store))
    finals = [s.final.field for s in sweeps]
    active = ~np.any([s.frozen for s in sweeps], axis=0)
    notes = []
    cauchy = []
    for a, b in zip(finals[:-1], finals[1:]):
        cauchy.append(float(np.max(np.abs(b.values[active] - a.values[active]))))
    for k in range(1, len(cauchy)):
        if cauchy[k] > cauchy[k - 1]:
            notes.append(
                f"Cauchy difference grew from {cauchy[k-1]:.3e} to {cauchy[k]:.3e} at eps = {eps_list[k+1]:g}"
            )
    if len(finals) >= 2:
        extra = richardson(finals[-1], finals[-2], eps_list[-1] / eps_list[-2])
    else:
        extra = finals[-1].copy()
    vals = extra.values.copy()
    vals[~active] = np.nan
    for n in notes:
        warnings.warn(n, RuntimeWarning)
    return EpsilonSweep(
        eps=eps_list,
        sweeps=sweeps,
        finals=finals,
        active=active,
        extrapolated=ScalarField(grid, vals),
        cauchy=cauchy,
        warnings=notes,
    )

"""Command line entry point.

Subcommands ``solve``, ``sweep``, ``verify``, ``oracle`` and ``converge``
share the options ``--config``, ``--out`` and ``--threads``.  Each command
writes into its own subdirectory of the output directory and echoes the
effective configuration to ``<out>/effective_config.json``.

Exit codes: 0 success, 2 configuration error (including missing
prerequisite artifacts), 3 solver failure, 4 a verification flag failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import oracle as _oracle
from .artifacts import CheckpointStore, MissingArtifact, SweepRecord, write_json
from .config import ConfigError, RunConfig, load_config, parse_config
from .curvature import (
    g_boundary_max_check,
    graph_quantities,
    level_sets,
    level_values,
    verify_estimates,
)
from .grid import ConfigurationError
from .metric import ricci_sup
from .pde import EvaluationError, RegParams, graph_form_check
from .solver import SolverError, continuation_kappa, epsilon_sweep

log = logging.getLogger("arrivaltime")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_FLAG = 0, 2, 3, 4


class CommandFailed(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def oracle_case(cfg: RunConfig):
    """Radial reference case matching the configured chart and domain, or ``None``."""
    o = cfg.oracle
    if o.case is not None:
        factory = {
            "euclidean_ball": lambda: _oracle.euclidean_ball(o.n, o.radius),
            "hyperbolic_ball": lambda: _oracle.hyperbolic_ball(o.n, o.radius),
            "neck_band": lambda: _oracle.neck_band(o.radius),
        }.get(o.case)
        if factory is None:
            raise ConfigError(f"unknown oracle case '{o.case}'")
        return factory()
    ch, dom = cfg.chart, cfg.domain
    centered = dom.center is None or not np.any(dom.center)
    if dom.kind == "ball" and centered:
        if ch.kind == "euclidean":
            return _oracle.euclidean_ball(max(ch.dim, 2), dom.radius)
        if ch.kind == "axisymmetric":
            return _oracle.euclidean_ball(ch.ambient_dim, dom.radius)
        if ch.kind == "conformal" and dom.geodesic:
            return _oracle.hyperbolic_ball(ch.dim, dom.radius)
    if dom.kind == "band" and ch.kind == "revolution" and ch.expression == "cosh" and dom.axis == 0:
        return _oracle.neck_band(dom.half_width)
    return None


def _center_value(fld) -> float:
    g = fld.grid
    center = g.shape.bbox
    mid = 0.5 * (np.asarray(center[0], float) + np.asarray(center[1], float))
    mid = np.where(np.isfinite(mid), mid, 0.0)
    i = int(np.argmin(np.sum((g.coords - mid) ** 2, axis=1)))
    return float(fld.values[i])


# -- commands -----------------------------------------------------------------------


def cmd_solve(cfg: RunConfig, out: Path, threads: int = 1) -> int:
    eps, sigma = cfg.solve.eps, cfg.solve.sigma
    grid = cfg.build_grid(eps)
    d = out / "solve"
    d.mkdir(parents=True, exist_ok=True)
    try:
        res = continuation_kappa(grid, eps, sigma, cfg.schedule)
    except (SolverError, EvaluationError) as exc:
        write_json(d / "failure.json", {"status": "failed", "message": str(exc),
                                        "last_kappa": getattr(exc, "last_kappa", None)})
        raise CommandFailed(EXIT_SOLVER, f"solve failed: {exc}")
    CheckpointStore(d / "checkpoints").save(res)
    res.field.to_csv(d / "field.csv")
    summary = res.metadata()
    summary.update(
        grid=grid.describe(),
        u_max=float(np.max(res.field.values)),
        u_min=float(np.min(res.field.values)),
        u_center=_center_value(res.field),
        sup_bound=res.params.sup_bound(),
        sup_bound_ok=res.sup_bound_ok(10 * cfg.schedule.tol_abs),
        graph_identity=graph_form_check(res.field, res.params),
    )
    write_json(d / "summary.json", summary)
    log.info("solve: u_max = %.6g, residual = %.3g", summary["u_max"], res.residual_norm)
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, out: Path, threads: int = 1) -> int:
    grid = cfg.build_grid(cfg.schedule.eps_min)
    record = SweepRecord(out / "sweep")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        try:
            es = epsilon_sweep(grid, cfg.schedule, store=record.checkpoints)
        except (SolverError, EvaluationError) as exc:
            record.root.mkdir(parents=True, exist_ok=True)
            write_json(record.root / "failure.json", {"status": "failed", "message": str(exc)})
            raise CommandFailed(EXIT_SOLVER, f"sweep failed: {exc}")
    notes = sorted({str(w.message) for w in caught})
    summary = record.write(es, extra={"grid": grid.describe(), "notes": notes})
    for n in notes:
        log.warning("%s", n)
    log.info("sweep: %d eps rungs, %d active nodes", len(es.eps), summary["n_active"])
    return EXIT_OK


def _load_sweep(cfg: RunConfig, out: Path):
    grid = cfg.build_grid(cfg.schedule.eps_min)
    try:
        return grid, SweepRecord(out / "sweep").read(grid)
    except MissingArtifact as exc:
        raise CommandFailed(EXIT_CONFIG, str(exc))


def _write_levels(path, samples):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        dim = samples[0].points.shape[1] if samples else 0
        w.writerow(["t"] + [f"x{a}" for a in range(dim)] + ["grad_norm", "H", "A", "regular"])
        for lv in samples:
            for k in range(len(lv.H)):
                vals = [lv.t, *lv.points[k], lv.grad_norm[k], lv.H[k], lv.A[k]]
                w.writerow([format(float(v), ".17g") for v in vals] + [int(lv.regular[k])])


def cmd_verify(cfg: RunConfig, out: Path, threads: int = 1) -> int:
    grid, (summary, finals, frozen, _) = _load_sweep(cfg, out)
    rung = summary["rungs"][-1]
    eps, sigma = rung["eps"], rung["sigma_reached"]
    fld, active = finals[-1], ~frozen[-1]
    rho_thm = ricci_sup(grid.chart, grid.coords).rho_thm
    cv = cfg.curvature
    rho = rho_thm if cv.rho is None else cv.rho
    lam = 3.0 * rho_thm if cv.Lambda is None else cv.Lambda
    gamma = eps if cv.gamma is None else cv.gamma
    samples = level_sets(fld, level_values(fld, cv.levels, active), gamma, active=active)
    report = verify_estimates(samples, rho, eps, sigma, lam)
    params = RegParams(eps, sigma, 1.0)
    geo = graph_quantities(fld, params, rho=rho, Lambda=lam)
    doc = report.to_dict()
    doc.update(
        eps=eps,
        sigma=sigma,
        rho=rho,
        Lambda=lam,
        gamma=gamma,
        g_boundary=g_boundary_max_check(geo, grid),
        passed=report.passed(),
    )
    d = out / "verify"
    d.mkdir(parents=True, exist_ok=True)
    write_json(d / "report.json", doc)
    _write_levels(d / "levels.csv", samples)
    log.info("verify: fit %s, flags %s", report.fit, report.flags)
    if not report.passed():
        reason = "inconclusive fit" if report.inconclusive else f"flags {report.flags}"
        raise CommandFailed(EXIT_FLAG, f"verification failed: {reason}")
    return EXIT_OK


def cmd_oracle(cfg: RunConfig, out: Path, threads: int = 1) -> int:
    case = oracle_case(cfg)
    if case is None:
        raise CommandFailed(EXIT_CONFIG, "no radial oracle for this chart and domain")
    grid, (summary, finals, frozen, extra) = _load_sweep(cfg, out)
    rung = summary["rungs"][-1]
    eps, sigma = rung["eps"], rung["sigma_reached"]
    r = np.minimum(_oracle.radial_coordinate(case, grid.coords), case.radius)
    exact = _oracle.radial_arrival(case, r)
    use = ~frozen[-1] & np.isfinite(exact)
    err = np.abs(finals[-1].values - exact)[use]
    err_x = np.abs(extra.values - exact)[use & np.isfinite(extra.values)]
    scale = float(np.max(exact[use])) if use.any() else float("nan")
    fine_h = cfg.oracle.fine_h or float(np.min(grid.spacing)) / 16
    try:
        profile = _oracle.radial_pde_solve(case, eps, sigma, fine_h)
        reg_err = float(np.max(np.abs(finals[-1].values - profile(r))[use]))
    except _oracle.OracleUnavailable as exc:
        log.warning("1D regularized profile unavailable: %s", exc)
        profile, reg_err = None, None
    d = out / "oracle"
    d.mkdir(parents=True, exist_ok=True)
    rr = np.linspace(0.0, case.radius, cfg.oracle.points)
    _oracle.write_table(case, rr, d / "table.csv", profile)
    max_err = float(err.max()) if err.size else float("nan")
    doc = {
        "case": case.describe(),
        "eps": eps,
        "sigma": sigma,
        "n_compared": int(use.sum()),
        "max_abs_error": max_err,
        "max_abs_error_extrapolated": float(err_x.max()) if err_x.size else None,
        "relative_error": max_err / scale if scale else None,
        "max_abs_error_vs_regularized_1d": reg_err,
        "tolerance": cfg.oracle.tolerance,
        "passed": bool(max_err <= cfg.oracle.tolerance),
    }
    write_json(d / "comparison.json", doc)
    log.info("oracle: max |u - u_exact| = %.4g on %d nodes", max_err, doc["n_compared"])
    if not doc["passed"]:
        raise CommandFailed(EXIT_FLAG, f"oracle error {max_err:.4g} exceeds {cfg.oracle.tolerance}")
    return EXIT_OK


def _converge_point(cfg_dict: dict, h: float):
    cfg = parse_config(cfg_dict)
    c = cfg.converge
    grid = cfg.build_grid(c.eps, h)
    res = continuation_kappa(grid, c.eps, c.sigma, cfg.schedule)
    return grid.coords, res.field.values


def _eoc(hs, errs):
    out = []
    for k in range(1, len(errs)):
        a, b = errs[k - 1], errs[k]
        ok = a is not None and b is not None and a > 0 and b > 0
        out.append(float(np.log(a / b) / np.log(hs[k - 1] / hs[k])) if ok else None)
    return out


def cmd_converge(cfg: RunConfig, out: Path, threads: int = 1) -> int:
    c = cfg.converge
    hs = sorted(c.h_list, reverse=True)
    for h in hs:
        cfg.build_grid(c.eps, h)  # validate every spacing before any solve
    cfg_dict = cfg.to_dict()
    try:
        if threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                runs = list(pool.map(_converge_point, [cfg_dict] * len(hs), hs))
        else:
            runs = [_converge_point(cfg_dict, h) for h in hs]
    except (SolverError, EvaluationError) as exc:
        raise CommandFailed(EXIT_SOLVER, f"converge failed: {exc}")
    case = oracle_case(cfg)
    rows = []
    if case is not None:
        fine_h = cfg.oracle.fine_h or min(hs) / 64
        try:
            profile = _oracle.radial_pde_solve(case, c.eps, c.sigma, fine_h)
        except _oracle.OracleUnavailable as exc:
            raise CommandFailed(EXIT_SOLVER, f"reference profile failed: {exc}")
        reference = "radial_1d"
        errs = [
            float(np.max(np.abs(u - profile(_oracle.radial_coordinate(case, x)))))
            for x, u in runs
        ]
    else:
        reference = "successive_max"
        peaks = [float(np.max(u)) for _, u in runs]
        errs = [None] + [abs(b - a) for a, b in zip(peaks[:-1], peaks[1:])]
    eocs = [None] + _eoc(hs, errs)
    low = [e is not None and e < c.min_eoc for e in eocs]
    for h, e, q, lo in zip(hs, errs, eocs, low):
        rows.append({"h": h, "error": e, "eoc": q, "below_threshold": lo})
    eps_rows = []
    if case is not None:
        eps_rows = _eps_table(cfg, case)
    doc = {
        "reference": reference,
        "eps": c.eps,
        "sigma": c.sigma,
        "h_table": rows,
        "eps_table": eps_rows,
        "min_eoc": c.min_eoc,
        "max_eoc": c.max_eoc,
        "in_band": all(q is None or c.min_eoc <= q <= c.max_eoc for q in eocs),
        "passed": not any(low),
    }
    d = out / "converge"
    d.mkdir(parents=True, exist_ok=True)
    write_json(d / "eoc.json", doc)
    with open(d / "eoc.csv", "w") as fh:
        fh.write("h,error,eoc\n")
        for row in rows:
            fh.write(",".join("" if v is None else format(v, ".17g")
                              for v in (row["h"], row["error"], row["eoc"])) + "\n")
    log.info("converge: EOC %s", [q for q in eocs if q is not None])
    if any(low):
        raise CommandFailed(EXIT_FLAG, f"EOC below {c.min_eoc}: {eocs}")
    return EXIT_OK


def _eps_table(cfg: RunConfig, case):
    """Regularization error of the 1D profile against the closed form, per eps rung."""
    sigma = cfg.schedule.sigma_min
    fine_h = cfg.oracle.fine_h or case.radius / 2048
    r_cmp = np.linspace(0.25 * case.radius, case.radius, 400)
    exact = _oracle.radial_arrival(case, r_cmp)
    eps_list = cfg.schedule.eps_ladder()
    errs = []
    for eps in eps_list:
        try:
            prof = _oracle.radial_pde_solve(case, eps, sigma, fine_h)
            errs.append(float(np.max(np.abs(prof(r_cmp) - exact))))
        except _oracle.OracleUnavailable:
            errs.append(None)
    eocs = [None] + _eoc(eps_list, errs)
    return [{"eps": e, "error": x, "eoc": q} for e, x, q in zip(eps_list, errs, eocs)]


COMMANDS = {
    "solve": cmd_solve,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
    "oracle": cmd_oracle,
    "converge": cmd_converge,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arrivaltime", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--out", default=None, help="output directory (default: output.dir)")
        p.add_argument("--threads", type=int, default=1, help="worker processes for studies")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config)
        out = Path(args.out if args.out is not None else cfg.output.dir)
        out.mkdir(parents=True, exist_ok=True)
        effective = cfg.to_dict()
        effective["output"]["dir"] = str(out)
        write_json(out / "effective_config.json", effective)
        return COMMANDS[args.command](cfg, out, args.threads)
    except (ConfigError, ConfigurationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandFailed as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""On-disk artifacts: deterministic JSON, per-rung checkpoints and sweep records."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .grid import ConfigurationError, Grid, ScalarField
from .pde import RegParams
from .solver import EpsilonSweep, SolveResult

__all__ = ["dumps", "write_json", "read_json", "CheckpointStore", "SweepRecord", "MissingArtifact"]


class MissingArtifact(FileNotFoundError):
    pass


def _encode(obj, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return "null" if obj is None else ("true" if obj else "false")
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return format(x, ".17g") if math.isfinite(x) else "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        items = [pad + _encode(v, indent, level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent: int = 2) -> str:
    """JSON with every float written to 17 significant digits; NaN and inf become ``null``."""
    return _encode(obj, indent, 0) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def read_json(path):
    return json.loads(Path(path).read_text())


def _tag(eps: float, sigma: float) -> str:
    return f"eps_{eps:.6e}_sigma_{sigma:.6e}"


def _fingerprint(grid: Grid) -> dict:
    d = grid.describe()
    return {k: d[k] for k in ("spacing", "origin", "counts", "n_nodes")}


class CheckpointStore:
    """One field CSV plus one JSON record per converged rung.

    ``load`` returns ``None`` when the rung is missing, unconverged or was
    computed on a different grid, so a sweep simply recomputes it.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def paths(self, eps, sigma):
        tag = _tag(eps, sigma)
        return self.root / f"{tag}.csv", self.root / f"{tag}.json"

    def save(self, res: SolveResult) -> None:
        p = res.params
        csv_path, meta_path = self.paths(p.eps, p.sigma)
        res.field.to_csv(csv_path)
        meta = res.metadata()
        meta["grid"] = _fingerprint(res.field.grid)
        write_json(meta_path, meta)

    def load(self, grid: Grid, eps, sigma):
        csv_path, meta_path = self.paths(eps, sigma)
        if not (csv_path.exists() and meta_path.exists()):
            return None
        meta = read_json(meta_path)
        if meta.get("status") != "converged" or meta.get("grid") != json.loads(
            json.dumps(_fingerprint(grid))
        ):
            return None
        try:
            fld = ScalarField.from_csv(grid, csv_path)
        except (ConfigurationError, ValueError):
            return None
        return SolveResult(
            field=fld,
            params=RegParams(meta["eps"], meta["sigma"], meta["kappa"]),
            residual_norm=meta["residual_norm"],
            iterations=meta["iterations"],
            status="converged",
            path=meta.get("path", []),
            message=meta.get("message", ""),
            tol_effective=meta.get("tol_effective") or 0.0,
        )


class SweepRecord:
    """Fields and summary of an epsilon sweep stored under one directory.

    Layout: ``sweep.json`` (summary), ``u_<k>.csv`` and ``frozen_<k>.csv``
    for each eps rung ``k``, ``extrapolated.csv`` and ``checkpoints/``.
    """

    def __init__(self, root):
        self.root = Path(root)

    @property
    def summary_path(self) -> Path:
        return self.root / "sweep.json"

    @property
    def checkpoints(self) -> CheckpointStore:
        return CheckpointStore(self.root / "checkpoints")

    def write(self, es: EpsilonSweep, extra: dict | None = None) -> dict:
        self.root.mkdir(parents=True, exist_ok=True)
        rungs = []
        for k, sw in enumerate(es.sweeps):
            sw.final.field.to_csv(self.root / f"u_{k}.csv")
            ScalarField(sw.final.field.grid, sw.frozen.astype(float)).to_csv(
                self.root / f"frozen_{k}.csv"
            )
            rungs.append(
                {
                    "eps": sw.eps,
                    "sigmas": sw.sigmas,
                    "sigma_reached": sw.sigmas[-1],
                    "u_cut": sw.u_cut,
                    "n_frozen": int(sw.frozen.sum()),
                    "monotone": sw.monotone,
                    "monotone_ok": sw.monotone_ok,
                    "trace_sup": sw.trace_sup,
                    "trace_inf": sw.trace_inf,
                    "residual_norm": sw.final.residual_norm,
                    "u_max": float(np.max(sw.final.field.values)),
                }
            )
        es.extrapolated.to_csv(self.root / "extrapolated.csv")
        summary = {
            "eps": es.eps,
            "rungs": rungs,
            "cauchy": es.cauchy,
            "n_active": int(es.active.sum()),
            "warnings": es.warnings,
        }
        if extra:
            summary.update(extra)
        write_json(self.summary_path, summary)
        return summary

    def read(self, grid: Grid):
        """Return ``(summary, finals, frozen, extrapolated)``; raises :class:`MissingArtifact`."""
        if not self.summary_path.exists():
            raise MissingArtifact(f"no sweep artifacts in {self.root}: run sweep first")
        summary = read_json(self.summary_path)
        try:
            finals, frozen = [], []
            for k in range(len(summary["rungs"])):
                finals.append(ScalarField.from_csv(grid, self.root / f"u_{k}.csv"))
                mask = ScalarField.from_csv(grid, self.root / f"frozen_{k}.csv").values
                frozen.append(mask > 0.5)
            extra = ScalarField.from_csv(grid, self.root / "extrapolated.csv")
        except (OSError, ConfigurationError) as exc:
            raise MissingArtifact(f"sweep artifacts incomplete or stale ({exc}): run sweep first")
        return summary, finals, frozen, extra

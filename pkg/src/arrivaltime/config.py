"""Run configuration: YAML schema, validation and the chart/domain registries.

A configuration file has the top-level sections ``chart``, ``domain``,
``grid``, ``schedule``, ``solve``, ``curvature``, ``oracle``, ``converge`` and
``output``.  Every section is optional except ``chart`` and ``domain``.
Unknown keys are rejected.  :meth:`RunConfig.to_dict` returns the effective
configuration with all defaults filled in; it can be fed back to
:func:`load_config` unchanged.

Example::

    chart:  {kind: conformal, expression: poincare, dim: 2}
    domain: {kind: ball, radius: 1.0, geodesic: true}
    grid:   {h: 0.0078125}
    schedule: {eps_min: 0.0125, sigma_min: 1.0e-4}
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import re

import numpy as np
import yaml

from . import grid as _grid
from . import metric as _metric
from .solver import Schedule

__all__ = [
    "ConfigError",
    "ChartSpec",
    "DomainSpec",
    "GridSpec",
    "SolveSpec",
    "CurvatureSpec",
    "OracleSpec",
    "ConvergeSpec",
    "RunConfig",
    "load_config",
    "parse_config",
]


class ConfigError(ValueError):
    pass


def _build(cls, data, where):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section '{where}' must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{where}': {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{where}' section: {exc}") from exc


CHARTS = ("euclidean", "conformal", "revolution", "axisymmetric")
DOMAINS = ("ball", "band", "dumbbell")


@dataclass
class ChartSpec:
    kind: str = "euclidean"
    dim: int = 2
    expression: str | None = None  # conformal: "poincare"; revolution: "cosh" | "cylinder"
    ambient_dim: int = 3  # axisymmetric only

    def __post_init__(self):
        if self.kind not in CHARTS:
            raise ValueError(f"chart kind must be one of {CHARTS}")
        if self.kind == "conformal":
            self.expression = self.expression or "poincare"
            if self.expression != "poincare":
                raise ValueError("conformal expression must be 'poincare'")
        elif self.kind == "revolution":
            self.expression = self.expression or "cosh"
            if self.expression not in ("cosh", "cylinder"):
                raise ValueError("revolution expression must be 'cosh' or 'cylinder'")
            self.dim = 2
        elif self.kind == "axisymmetric":
            self.dim = 2
            if self.ambient_dim < 3:
                raise ValueError("axisymmetric charts need ambient_dim >= 3")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")

    def build(self) -> _metric.MetricChart:
        if self.kind == "euclidean":
            return _metric.Euclidean(self.dim)
        if self.kind == "conformal":
            return _metric.poincare_ball(self.dim)
        if self.kind == "revolution":
            return _metric.cosh_neck() if self.expression == "cosh" else _metric.flat_cylinder()
        return _metric.Axisymmetric(self.ambient_dim)


@dataclass
class DomainSpec:
    kind: str = "ball"
    radius: float = 1.0
    geodesic: bool = False  # ball radius measured in the metric (Poincare chart)
    center: list | None = None
    half_width: float = 1.0
    axis: int = 0
    c: float = 1.0
    b: float = 1.1

    def __post_init__(self):
        if self.kind not in DOMAINS:
            raise ValueError(f"domain kind must be one of {DOMAINS}")
        if self.radius <= 0 or self.half_width <= 0:
            raise ValueError("domain sizes must be positive")

    def build(self, chart: ChartSpec) -> _grid.DomainShape:
        if self.kind == "ball":
            r = self.radius
            if self.geodesic:
                if chart.kind != "conformal":
                    raise ValueError("geodesic radius needs the Poincare chart")
                r = float(np.tanh(r / 2.0))
            center = self.center if self.center is not None else [0.0] * chart.dim
            if len(center) != chart.dim:
                raise ValueError("ball center has the wrong dimension")
            return _grid.ball(r, center)
        if self.kind == "band":
            return _grid.band(self.half_width, self.axis, chart.dim)
        return _grid.cassini_dumbbell(self.c, self.b)

    def size(self, chart: ChartSpec) -> float:
        """Smallest extent of the domain in chart coordinates."""
        if self.kind == "ball":
            r = np.tanh(self.radius / 2) if self.geodesic else self.radius
            return 2.0 * float(r)
        if self.kind == "band":
            return 2.0 * self.half_width
        return 2.0 * float(np.sqrt(max(self.b**2 - self.c**2, 0.0)))


@dataclass
class GridSpec:
    h: float | None = None  # default: smallest eps in use divided by h_per_eps
    h_per_eps: float = 4.0
    periodic_points: int = 16  # nodes along a periodic axis
    padding: int = 2

    def __post_init__(self):
        if self.h is not None and self.h <= 0:
            raise ValueError("h must be positive")
        if self.h_per_eps <= 0 or self.periodic_points < 3 or self.padding < 1:
            raise ValueError("need h_per_eps > 0, periodic_points >= 3, padding >= 1")


@dataclass
class SolveSpec:
    eps: float = 0.1
    sigma: float = 0.1

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive (the sup bound 1/(eps sigma) must be finite)")


@dataclass
class CurvatureSpec:
    rho: float | None = None  # default rho_thm
    Lambda: float | None = None  # default 3 rho_thm
    gamma: float | None = None  # default eps
    levels: int = 40

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("need at least two levels")


@dataclass
class OracleSpec:
    case: str | None = None  # euclidean_ball | hyperbolic_ball | neck_band
    n: int = 2
    radius: float = 1.0
    fine_h: float | None = None  # default: h / 16
    tolerance: float = 0.01
    points: int = 201


@dataclass
class ConvergeSpec:
    h_list: list = field(default_factory=lambda: [1 / 16, 1 / 32, 1 / 64])
    eps: float = 0.1
    sigma: float = 0.1
    min_eoc: float = 0.8
    max_eoc: float = 2.2

    def __post_init__(self):
        if len(self.h_list) < 2 or any(h <= 0 for h in self.h_list):
            raise ValueError("h_list needs at least two positive spacings")
        if self.eps <= 0 or self.sigma <= 0:
            raise ValueError("converge needs eps > 0 and sigma > 0")


@dataclass
class OutputSpec:
    dir: str = "out"


_SECTIONS = {
    "chart": ChartSpec,
    "domain": DomainSpec,
    "grid": GridSpec,
    "schedule": Schedule,
    "solve": SolveSpec,
    "curvature": CurvatureSpec,
    "oracle": OracleSpec,
    "converge": ConvergeSpec,
    "output": OutputSpec,
}


@dataclass
class RunConfig:
    chart: ChartSpec
    domain: DomainSpec
    grid: GridSpec
    schedule: Schedule
    solve: SolveSpec
    curvature: CurvatureSpec
    oracle: OracleSpec
    converge: ConvergeSpec
    output: OutputSpec

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    def build_chart(self):
        return self.chart.build()

    def build_domain(self):
        try:
            return self.domain.build(self.chart)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def spacing(self, eps: float, h: float | None = None):
        """Grid spacing per axis for a run whose smallest eps is ``eps``."""
        chart = self.build_chart()
        if h is None:
            h = self.grid.h if self.grid.h is not None else eps / self.grid.h_per_eps
        hs = [h] * chart.dim
        for a, period in enumerate(chart.periodic):
            if period:
                hs[a] = period / self.grid.periodic_points
        return hs

    def build_grid(self, eps: float, h: float | None = None):
        chart = self.build_chart()
        hs = self.spacing(eps, h)
        non_periodic = [hs[a] for a in range(chart.dim) if not chart.periodic[a]]
        if non_periodic and max(non_periodic) >= self.domain.size(self.chart):
            raise ConfigError("grid spacing exceeds the domain size")
        try:
            return _grid.build_grid(self.build_domain(), chart, hs, self.grid.padding)
        except _grid.ConfigurationError as exc:
            raise ConfigError(str(exc)) from exc


def parse_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    for required in ("chart", "domain"):
        if required not in data:
            raise ConfigError(f"missing section '{required}'")
    parts = {name: _build(cls, data.get(name), name) for name, cls in _SECTIONS.items()}
    try:
        parts["schedule"].cut_for(parts["schedule"].eps0)
    except ValueError as exc:
        raise ConfigError(f"invalid 'schedule' section: {exc}") from exc
    return RunConfig(**parts)


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-4`` (no decimal point) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+][0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return parse_config(data or {})

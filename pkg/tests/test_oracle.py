import csv

import numpy as np
import pytest

from arrivaltime.grid import ball, band, build_grid
from arrivaltime.metric import cosh_neck, poincare_ball
from arrivaltime.oracle import (
    RadialCase,
    euclidean_ball,
    hyperbolic_ball,
    neck_band,
    radial_arrival,
    radial_coordinate,
    radial_min_H,
    radial_pde_solve,
    write_table,
)
from arrivaltime.pde import RegParams, residual
from arrivaltime.solver import Schedule, continuation_kappa

# -- closed forms ------------------------------------------------------------------------


def test_arrival_values():
    assert radial_arrival(euclidean_ball(2, 1.0), 0.0) == pytest.approx(0.5)
    assert radial_arrival(hyperbolic_ball(2, 1.0), 0.0) == pytest.approx(0.43378, abs=1e-5)
    assert radial_arrival(neck_band(1.0), 0.5) == pytest.approx(0.81326, abs=1e-5)
    assert radial_arrival(neck_band(1.0), 0.0) == np.inf
    assert radial_arrival(euclidean_ball(3, 2.0), 0.0) == pytest.approx(1.0)


@pytest.mark.parametrize("case", [euclidean_ball(2), hyperbolic_ball(3), neck_band()], ids=lambda c: c.kind)
def test_boundary_and_monotonicity(case):
    assert radial_arrival(case, case.radius) == pytest.approx(0.0, abs=1e-15)
    r = np.linspace(0.01, case.radius, 200)
    assert np.all(np.diff(radial_arrival(case, r)) < 0)
    assert np.all(case.level_H(r) > 0)


def test_outside_domain_rejected():
    with pytest.raises(ValueError):
        radial_arrival(euclidean_ball(2, 1.0), 1.5)


def test_min_H_values():
    assert radial_min_H(euclidean_ball(2, 1.0), 0.0) == pytest.approx(1.0)
    t = np.linspace(0, 0.4, 20)
    assert np.all(radial_min_H(hyperbolic_ball(2, 1.0), t) >= 1.0)
    neck = neck_band(1.0)
    assert radial_min_H(neck, 30.0) / np.exp(-30.0) == pytest.approx(np.sinh(1.0), rel=1e-10)
    assert np.sinh(1.0) == pytest.approx(1.1752, abs=1e-4)


def test_min_H_domain_errors():
    with pytest.raises(ValueError):
        radial_min_H(euclidean_ball(2, 1.0), 0.5)
    with pytest.raises(ValueError):
        radial_min_H(neck_band(), -1.0)


def _du_dr(case, r):
    m = case.n - 1
    if case.kind == "euclidean_ball":
        return -r / m
    if case.kind == "hyperbolic_ball":
        return -np.tanh(r) / m
    return -1 / np.tanh(r)


@pytest.mark.parametrize(
    "case",
    [euclidean_ball(2), euclidean_ball(4, 1.5), hyperbolic_ball(2), hyperbolic_ball(3, 2.0), neck_band(1.0)],
    ids=lambda c: f"{c.kind}{c.n}",
)
def test_curvature_times_speed_is_one(case):
    # the radial coordinate is arclength, so |Du| = |u'(r)| and the flow speed is H
    r = np.linspace(0.05, case.radius, 100)
    assert np.max(np.abs(case.level_H(r) * np.abs(_du_dr(case, r)) - 1)) <= 1e-10
    t = radial_arrival(case, r)
    assert np.max(np.abs(radial_min_H(case, t) - case.level_H(r))) <= 1e-10


def test_neck_log_identity():
    x = np.linspace(1e-3, 1.0, 500)
    s = radial_arrival(neck_band(1.0), x) + np.log(np.sinh(x))
    assert np.max(np.abs(s - np.log(np.sinh(1.0)))) <= 1e-12


def test_case_validation():
    with pytest.raises(ValueError):
        RadialCase("torus", 2, 1.0)
    with pytest.raises(ValueError):
        RadialCase("neck_band", 3, 1.0)
    with pytest.raises(ValueError):
        euclidean_ball(2, -1.0)
    assert hyperbolic_ball(2, 1.0).extinction_time == pytest.approx(np.log(np.cosh(1.0)))


def test_radial_coordinate_maps():
    x = np.array([[0.3, 0.4], [0.0, 0.0]])
    assert np.allclose(radial_coordinate(euclidean_ball(), x), [0.5, 0.0])
    assert np.allclose(radial_coordinate(hyperbolic_ball(), x), [2 * np.arctanh(0.5), 0.0])
    assert np.allclose(radial_coordinate(neck_band(), x), [0.3, 0.0])


def _hyperbolic_grid(k):
    return build_grid(ball(np.tanh(0.5)), poincare_ball(2), np.tanh(0.5) / (64 * k))


def _neck_grid(k):
    return build_grid(band(1.0), cosh_neck(), [1 / (64 * k), np.pi / 8])


@pytest.mark.parametrize(
    "case,make", [(hyperbolic_ball(2, 1.0), _hyperbolic_grid), (neck_band(1.0), _neck_grid)], ids=["hyperbolic", "neck"]
)
def test_closed_forms_solve_limit_equation(case, make):
    errs = []
    for k in (1, 2):
        g = make(k)
        r = radial_coordinate(case, g.coords)
        keep = (r > 0.25) & g.interior & ~g.boundary_band(1)
        u = radial_arrival(case, np.clip(r, 0.1, case.radius))
        F = residual(g.field(u), RegParams(0.0, 0.0, 1.0)).values
        errs.append(np.max(np.abs(F[keep])))
    assert errs[1] < errs[0] / 2.5, errs


# -- 1D regularized solve ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def disk_profiles():
    c = euclidean_ball(2, 1.0)
    return {
        (eps, fh): radial_pde_solve(c, eps, 1e-4, fh)
        for eps, fh in [(0.05, 1 / 1024), (0.05, 1 / 2048), (0.025, 1 / 1024)]
    }


def test_profile_refinement_self_consistent(disk_profiles):
    a = disk_profiles[(0.05, 1 / 1024)]
    b = disk_profiles[(0.05, 1 / 2048)]
    assert np.max(np.abs(a.u - b(a.r))) <= 1e-6
    assert a.residual_norm <= 1e-8  # rounding floor of the fine 1D system


def test_profile_approaches_closed_form_quadratically(disk_profiles):
    c = euclidean_ball(2, 1.0)
    r = np.linspace(0.25, 1.0, 60)
    e1 = np.max(np.abs(disk_profiles[(0.05, 1 / 1024)](r) - radial_arrival(c, r)))
    e2 = np.max(np.abs(disk_profiles[(0.025, 1 / 1024)](r) - radial_arrival(c, r)))
    assert 3.0 <= e1 / e2 <= 5.0
    assert e2 <= 1e-3


def test_profile_boundary_value_and_bound(disk_profiles):
    p = disk_profiles[(0.05, 1 / 1024)]
    assert p.u[-1] == 0.0
    assert np.all(p.u >= 0) and np.all(p.u <= 1 / (0.05 * 1e-4))


def test_profile_monotone_in_sigma():
    c = hyperbolic_ball(2, 1.0)
    a = radial_pde_solve(c, 0.1, 0.2, 1 / 512)
    b = radial_pde_solve(c, 0.1, 0.1, 1 / 512)
    assert np.all(b.u - a.u >= -1e-10)
    assert np.max(b.u - a.u) > 0


def test_profile_rejects_bad_parameters():
    with pytest.raises(ValueError):
        radial_pde_solve(euclidean_ball(), 0.0, 0.1, 1 / 64)
    with pytest.raises(ValueError):
        radial_pde_solve(euclidean_ball(), 0.1, 0.1, 0.5)


def test_grid_solve_matches_profile_hyperbolic():
    R = np.tanh(0.5)
    h = R / 32
    g = build_grid(ball(R), poincare_ball(2), h)
    res = continuation_kappa(g, 0.1, 0.1, Schedule())
    case = hyperbolic_ball(2, 1.0)
    prof = radial_pde_solve(case, 0.1, 0.1, 1 / 4096)
    ref = prof(radial_coordinate(case, g.coords))
    assert np.max(np.abs(res.field.values - ref)) <= 5 * h


# -- tables --------------------------------------------------------------------------------


def test_write_table(tmp_path):
    c = neck_band(1.0)
    r = np.linspace(0.1, 1.0, 7)
    prof = radial_pde_solve(c, 0.2, 0.5, 1 / 256)
    write_table(c, r, tmp_path / "t.csv", prof)
    with open(tmp_path / "t.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["r", "u", "H", "u_reg"]
    data = np.array(rows[1:], float)
    assert np.array_equal(data[:, 0], r)
    assert np.array_equal(data[:, 1], radial_arrival(c, r))
    assert np.array_equal(data[:, 2], c.level_H(r))
    assert np.allclose(data[:, 3], prof(r))

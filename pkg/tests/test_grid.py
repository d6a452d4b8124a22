import csv

import numpy as np
import pytest

from arrivaltime.grid import (
    ConfigurationError,
    NodeClass,
    ScalarField,
    ball,
    band,
    boundary_trace,
    build_grid,
    cassini_dumbbell,
)
from arrivaltime.metric import Axisymmetric, Euclidean, cosh_neck
from arrivaltime.pde import RegParams, residual


def _node(grid, point):
    i = np.flatnonzero(np.all(np.isclose(grid.coords, point), axis=1))
    return int(i[0]) if len(i) else None


# -- classification --------------------------------------------------------------


def test_disk_half_spacing_enumeration():
    g = build_grid(ball(1.0), Euclidean(2), 0.5)
    interior = g.coords[g.interior]
    assert np.allclose(interior, [[0.0, 0.0]])
    # the axis neighbors reach the circle exactly one spacing further out
    for p, axis, side in [((0.5, 0), 0, 1), ((-0.5, 0), 0, 0), ((0, 0.5), 1, 1), ((0, -0.5), 1, 0)]:
        i = _node(g, p)
        assert g.node_class[i] == NodeClass.BOUNDARY_ADJACENT
        assert g.theta[axis, side, i] == pytest.approx(1.0, abs=1e-12)
    # the diagonal nodes at radius 0.707 are owned too, cut at sqrt(0.75) along each axis
    diag = _node(g, (0.5, 0.5))
    assert g.node_class[diag] == NodeClass.BOUNDARY_ADJACENT
    assert g.theta[0, 1, diag] == pytest.approx((np.sqrt(0.75) - 0.5) / 0.5, abs=1e-12)
    assert g.n_nodes == 9


def test_disk_area_from_interior_count():
    h = 1 / 256
    g = build_grid(ball(1.0), Euclidean(2), h)
    assert g.interior.sum() * h**2 == pytest.approx(np.pi, rel=0.01)


def test_band_on_neck_has_no_exterior_along_theta():
    g = build_grid(band(1.0), cosh_neck(), [1 / 32, 2 * np.pi / 16])
    cls = g.box_class()
    inside_rows = np.any(cls != NodeClass.EXTERIOR, axis=1)
    assert np.all(cls[inside_rows] != NodeClass.EXTERIOR)
    assert np.all(g.nbr[1] >= 0)


@pytest.mark.parametrize(
    "shape,chart,h",
    [
        (ball(1.0), Euclidean(2), 1 / 16),
        (ball(0.7, (0.1, -0.2)), Euclidean(2), 0.05),
        (band(1.0), cosh_neck(), [1 / 16, np.pi / 8]),
        (cassini_dumbbell(1.0, 1.1), Axisymmetric(3), 1 / 32),
    ],
    ids=["disk", "offset", "neck", "dumbbell"],
)
def test_grid_invariants(shape, chart, h):
    g = build_grid(shape, chart, h)
    # interior nodes have every axis neighbor owned
    assert np.all(g.nbr[:, :, g.interior] >= 0)
    # boundary fractions lie in (0, 1]
    cut = g.nbr < 0
    assert np.all((g.theta[cut] > 0) & (g.theta[cut] <= 1))
    # crossing points sit on the zero set
    pts = np.array([b[4] for b in g.bpoints])
    assert np.max(np.abs(shape.phi(pts))) < 1e-10


def test_boundary_fraction_root_accuracy():
    g = build_grid(ball(1.0), Euclidean(2), 0.1)
    pts = np.array([b[4] for b in g.bpoints])
    assert np.max(np.abs(np.linalg.norm(pts, axis=1) - 1.0)) <= 1e-12


def test_too_coarse_is_configuration_error():
    with pytest.raises(ConfigurationError):
        build_grid(ball(1.0), Euclidean(2), 2.5)
    with pytest.raises(ConfigurationError):
        build_grid(ball(1.0), Euclidean(2), 1.0)


def test_nonpositive_spacing_rejected():
    with pytest.raises(ConfigurationError):
        build_grid(ball(1.0), Euclidean(2), 0.0)


# -- stencils -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def disk32():
    return build_grid(ball(1.0), Euclidean(2), 1 / 32)


def test_constant_has_zero_gradient_at_interior(disk32):
    f = disk32.field(np.full(disk32.n_nodes, 3.7))
    assert np.max(np.abs(f.gradient()[disk32.interior])) < 1e-12


def test_linear_exact_at_interior(disk32):
    a = np.array([0.3, -1.7])
    f = disk32.sample(lambda x: x @ a + 2.0)
    assert np.max(np.abs(f.gradient()[disk32.interior] - a)) <= 1e-12
    node = int(np.flatnonzero(disk32.interior)[5])
    assert np.allclose(f.stencil_gradient(node), a, atol=1e-12)
    assert abs(f.stencil_second(node, 0, 1)) < 1e-9


def test_shortley_weller_one_sided_1d():
    # a smooth profile vanishing at x = 1; the node next to it sits theta*h away
    for h in (0.1, 0.07, 0.03):
        g = build_grid(band(1.0, axis=0, dim=1), Euclidean(1), h)
        right = int(np.argmax(g.coords[:, 0]))
        th = g.theta[0, 1, right]
        assert 0 < th <= 1
        f = g.sample(lambda x: np.sin(1.0 - np.abs(x[:, 0])))
        v = f.values[right]
        assert abs(v / (th * h) - 1.0) <= h
        # the 3-point Shortley-Weller derivative is exact on linears vanishing at the boundary
        lin = g.sample(lambda x: 1.0 - x[:, 0])
        assert (g.d1[0] @ lin.values)[right] == pytest.approx(-1.0, rel=1e-12)
        trace = boundary_trace(f)
        assert np.all(np.abs(trace.grad_norm - 1.0) <= h**2)


def _smooth(x):
    r2 = np.sum(x**2, axis=1)
    return (1 - r2) * np.exp(x[:, 0])


def _smooth_derivs(x):
    a, b = x[:, 0], x[:, 1]
    e = np.exp(a)
    q = 1 - a**2 - b**2
    ux = e * (q - 2 * a)
    uy = e * (-2 * b)
    uxx = e * (q - 4 * a - 2)
    uyy = -2 * e
    uxy = -2 * b * e
    return np.column_stack([ux, uy]), np.stack([uxx, uyy, uxy], axis=1)


def test_stencil_refinement_orders():
    # the mixed cross needs all four diagonal neighbors; next to cut cells it falls back
    # to a product of first differences and is first order there
    errs = {k: [] for k in ("d1_in", "d2_in", "mix_in", "d1_cut", "d2_cut", "mix_cut")}
    hs = [1 / 16, 1 / 32, 1 / 64, 1 / 128]
    for h in hs:
        g = build_grid(ball(1.0), Euclidean(2), h)
        u = _smooth(g.coords)
        du, d2 = _smooth_derivs(g.coords)
        inn, cut = g.interior, ~g.interior
        deep = g.interior & ~g.boundary_band(1)
        e1 = np.max(np.abs(np.column_stack([op @ u for op in g.d1]) - du), axis=1)
        e2 = np.max(np.abs(np.column_stack([op @ u for op in g.d2]) - d2[:, :2]), axis=1)
        em = np.abs(g.dmix[(0, 1)] @ u - d2[:, 2])
        errs["d1_in"].append(e1[inn].max())
        errs["d2_in"].append(e2[inn].max())
        errs["mix_in"].append(em[deep].max())
        errs["mix_cut"].append(em[~deep].max())
        errs["d1_cut"].append(e1[cut].max())
        errs["d2_cut"].append(e2[cut].max())
    for key, vals in errs.items():
        v = np.array(vals)
        eoc = np.log2(v[:-1] / v[1:]).mean()
        bound = 1.8 if key.endswith("_in") else 0.8
        assert eoc >= bound, (key, vals)


def _mirror_map(grid, fn):
    key = {tuple(np.round(c / grid.spacing).astype(int)): i for i, c in enumerate(grid.coords)}
    out = []
    for c in grid.coords:
        out.append(key[tuple(np.round(fn(c) / grid.spacing).astype(int))])
    return np.array(out)


def test_symmetry_equivariance_disk():
    g = build_grid(ball(1.0), Euclidean(2), 1 / 24)
    f = g.sample(lambda x: (1 - np.sum(x**2, axis=1)) ** 1.5)
    r = residual(f, RegParams(0.1, 0.3, 1.0)).values
    for fn in (lambda c: c[::-1], lambda c: c * np.array([-1, 1]), lambda c: -c):
        perm = _mirror_map(g, fn)
        assert np.max(np.abs(r[perm] - r)) <= 1e-12 * np.max(np.abs(r))


# -- boundary traces --------------------------------------------------------------


def test_trace_of_zero_field():
    g = build_grid(ball(1.0), Euclidean(2), 1 / 16)
    assert np.all(boundary_trace(g.zeros()).grad_norm == 0.0)


def test_trace_of_disk_arrival_time():
    g = build_grid(ball(1.0), Euclidean(2), 1 / 128)
    bt = boundary_trace(g.sample(lambda x: (1 - np.sum(x**2, axis=1)) / 2))
    assert np.max(np.abs(bt.grad_norm - 1.0)) <= 0.02


def test_trace_of_neck_arrival_time():
    g = build_grid(band(1.0), cosh_neck(), [1 / 128, 2 * np.pi / 16])
    with np.errstate(divide="ignore"):
        u = np.log(np.sinh(1.0) / np.sinh(np.abs(g.coords[:, 0])))
    bt = boundary_trace(g.field(np.minimum(u, 50.0)))
    target = 1 / np.tanh(1.0)
    assert target == pytest.approx(1.3130, abs=1e-4)
    assert np.max(np.abs(bt.grad_norm / target - 1)) <= 0.03


# -- I/O --------------------------------------------------------------------------


def test_field_csv_round_trip(tmp_path, disk32):
    f = disk32.sample(lambda x: np.sin(3 * x[:, 0]) + x[:, 1] ** 2 / 7)
    path = tmp_path / "u.csv"
    f.to_csv(path)
    back = ScalarField.from_csv(disk32, path)
    assert np.array_equal(back.values, f.values)
    with open(path) as fh:
        header = next(csv.reader(fh))
    assert header == ["x0", "x1", "class", "value"]


def test_grid_csv_has_every_box_node(tmp_path):
    g = build_grid(ball(1.0), Euclidean(2), 0.25)
    g.to_csv(tmp_path / "g.csv")
    rows = np.loadtxt(tmp_path / "g.csv", delimiter=",", skiprows=1)
    assert len(rows) == np.prod(g.counts)
    assert set(rows[:, 2].astype(int)) == {0, 1, 2}


def test_csv_mismatch_rejected(tmp_path, disk32):
    other = build_grid(ball(1.0), Euclidean(2), 1 / 16)
    other.zeros().to_csv(tmp_path / "u.csv")
    with pytest.raises(ConfigurationError):
        ScalarField.from_csv(disk32, tmp_path / "u.csv")


def test_field_shape_checked(disk32):
    with pytest.raises(ValueError):
        ScalarField(disk32, np.zeros(3))

import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from magtube.fields import (check_curl_system, landau_gauge, make_field, mirror_gauge)

B0 = (0.3, -0.2, 1.0)


@pytest.fixture(scope="module")
def field():
    return make_field(B0, 1.0)


def _curl(A_fn, x, h):
    """Central-difference curl of A_fn at the points x."""
    out = np.zeros_like(x)
    d = []
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        d.append((A_fn(x + e) - A_fn(x - e)) / (2 * h))
    out[:, 0] = d[1][:, 2] - d[2][:, 1]
    out[:, 1] = d[2][:, 0] - d[0][:, 2]
    out[:, 2] = d[0][:, 1] - d[1][:, 0]
    return out


def _points(n, seed, lo=-2.4, hi=2.4):
    return np.random.default_rng(seed).uniform(lo, hi, (n, 3))


def _off_breakpoints(field, x, gap):
    """Points away from the cutoff spheres and from the cylinders where the
    gauge's integration lines touch them (A has kinks there)."""
    ok = np.ones(len(x), dtype=bool)
    for r in (field.rho1, field.rho2):
        ok &= np.abs(np.linalg.norm(x, axis=1) - r) > gap
        ok &= np.abs(np.hypot(x[:, 0], x[:, 2]) - r) > gap
        ok &= np.abs(np.abs(x[:, 0]) - r) > gap
    return ok


def test_zero_field_everything_vanishes():
    f = make_field((0, 0, 0), 1.0)
    x = _points(50, 0)
    assert np.all(f.B(x) == 0)
    for g in (landau_gauge(f), mirror_gauge(f)):
        assert np.all(g.potential(x) == 0)
        c = check_curl_system(g, n=16)
        assert max(c.residual) == 0.0


def test_constant_inside_inner_ball(field):
    x = _points(400, 1, -1, 1)
    x = x[np.linalg.norm(x, axis=1) <= 1.0]
    assert np.array_equal(field.B(x), np.broadcast_to(field.b0, x.shape))


def test_compact_support(field):
    x = _points(400, 2, -4, 4)
    far = np.linalg.norm(x, axis=1) >= 2.0
    assert np.all(field.B(x[far]) == 0)


def test_divergence_analytic_zero(field):
    x = _points(2000, 3)
    div = sum(field.dB(x, j)[:, j] for j in range(3))
    assert np.max(np.abs(div)) <= 1e-12


def test_divergence_fd_tends_to_zero(field):
    x = _points(2000, 4)
    errs = []
    for h in (1e-2, 1e-3, 1e-4):
        d = sum((field.B(x + h * np.eye(3)[i])[:, i] - field.B(x - h * np.eye(3)[i])[:, i]) / (2 * h)
                for i in range(3))
        errs.append(np.max(np.abs(d)))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-4


def _grid_div(field, n):
    x = np.linspace(-2.5, 2.5, n)
    h = x[1] - x[0]
    X = np.stack(np.meshgrid(x, x, x, indexing="ij"), -1).reshape(-1, 3)
    B = field.B(X).reshape(n, n, n, 3)
    d = sum((np.roll(B[..., i], -1, i) - np.roll(B[..., i], 1, i)) / (2 * h) for i in range(3))
    return float(np.max(np.abs(d[1:-1, 1:-1, 1:-1])))


def test_divergence_grid_64_and_128(field):
    """Grid divergence <= 1e-6 |B0| at 64^3 and 4x smaller at 128^3."""
    d64, d128 = _grid_div(field, 64), _grid_div(field, 128)
    print(f"div B grid max: 64^3 {d64 / field.norm:.3e} |B0|, 128^3 {d128 / field.norm:.3e} |B0|")
    assert d64 <= 1e-6 * field.norm
    assert d128 <= d64 / 4


@pytest.mark.parametrize("make,side", [(landau_gauge, 1), (mirror_gauge, -1)])
def test_gauge_vanishes_beyond_anchor(field, make, side):
    g = make(field)
    x = _points(300, 5, -4, 4)
    x[:, 2] = side * np.random.default_rng(6).uniform(2.0001, 6, len(x))
    assert np.all(g.potential(x) == 0.0)


@pytest.mark.parametrize("make", [landau_gauge, mirror_gauge])
def test_second_component_zero(field, make):
    assert np.all(make(field).potential(_points(300, 7))[:, 1] == 0.0)


@pytest.mark.parametrize("make", [landau_gauge, mirror_gauge])
def test_fast_matches_reference_quadrature(field, make):
    g = make(field)
    x = _points(12, 8)
    fast = g.potential(x)
    ref = g.reference(x)
    assert np.max(np.abs(fast - ref)) <= g.tolerance()


@pytest.mark.parametrize("make", [landau_gauge, mirror_gauge])
def test_curl_pointwise_second_order(field, make):
    g = make(field)
    x = _points(400, 9)
    x = x[_off_breakpoints(field, x, 0.05)]
    r1 = np.max(np.abs(_curl(g.potential, x, 0.02) - field.B(x)))
    r2 = np.max(np.abs(_curl(g.potential, x, 0.01) - field.B(x)))
    assert r1 < 2e-2
    assert r1 / r2 == pytest.approx(4.0, rel=0.1)


def test_landau_and_mirror_same_curl(field):
    x = _points(200, 10)
    h = 1e-3
    c1 = _curl(landau_gauge(field).potential, x, h)
    c2 = _curl(mirror_gauge(field).potential, x, h)
    assert np.max(np.abs(c1 - c2)) <= 1e-5


def test_planar_reduction_inside_ball(field):
    g = landau_gauge(field)
    x = _points(300, 11, -0.6, 0.6)
    h = 1e-3
    e2 = np.array([0, h, 0.0])
    e1 = np.array([h, 0, 0.0])
    planar = (g.potential(x + e1)[:, 1] - g.potential(x - e1)[:, 1]) / (2 * h) \
        - (g.potential(x + e2)[:, 0] - g.potential(x - e2)[:, 0]) / (2 * h)
    assert np.max(np.abs(planar - B0[2])) <= 1e-6


def test_gauges_differ_by_gradient_on_links(field):
    """Plaquette sums of the phase difference vanish."""
    lg, mg = landau_gauge(field), mirror_gauge(field)
    rng = np.random.default_rng(12)
    p = rng.uniform(-2, 2, (50, 3))
    h = 0.1
    for a, b in ((0, 1), (1, 2), (0, 2)):
        ea, eb = np.zeros(3), np.zeros(3)
        ea[a], eb[b] = h, h
        loop = [(p, p + ea), (p + ea, p + ea + eb), (p + ea + eb, p + eb), (p + eb, p)]
        diff = sum(lg.link_phases(u, v) - mg.link_phases(u, v) for u, v in loop)
        assert np.max(np.abs(diff)) <= 1e-12


def test_scalar_on_grid_matches_pointwise(field):
    g = landau_gauge(field)
    x1 = np.linspace(-2.2, 2.2, 7)
    x2 = np.linspace(-2.1, 2.3, 6)
    x3 = np.linspace(-2.5, 2.4, 8)
    grid = g.scalar_on_grid(x1, x2, x3)
    X = np.stack(np.meshgrid(x1, x2, x3, indexing="ij"), -1).reshape(-1, 3)
    assert np.max(np.abs(grid.ravel() - g.scalar(X))) <= 1e-12


def test_deterministic(field):
    g = landau_gauge(field)
    x = _points(100, 13)
    assert np.array_equal(g.potential(x), g.potential(x))


def test_tolerance_formula():
    f = make_field((3.0, 4.0, 0.0), 2.0)
    assert landau_gauge(f).tolerance() == pytest.approx(1e-10 * (1 + 5.0 * 4.0))


def test_csv_export(tmp_path, field):
    p = tmp_path / "A.csv"
    x = _points(5, 14)
    landau_gauge(field).to_csv(p, x)
    rows = list(csv.reader(open(p)))
    assert rows[0][:6] == ["x1", "x2", "x3", "A1", "A2", "A3"]
    assert len(rows) == 6 and float(rows[1][4]) == 0.0


def test_cutoff_radii_validated():
    with pytest.raises(ValueError):
        make_field(B0, 1.0, inner=1.5, outer=1.4)
    with pytest.raises(ValueError):
        make_field(B0, -1.0)


@settings(max_examples=8, deadline=None)
@given(b=st.tuples(*[st.floats(-2, 2)] * 3),
       x=st.tuples(st.floats(-2.5, 2.5), st.floats(-2.5, 2.5), st.floats(-2.5, 2.5)))
def test_reference_agreement_property(b, x):
    f = make_field(b, 1.0)
    g = landau_gauge(f)
    p = np.array([x])
    assert np.max(np.abs(g.potential(p) - g.reference(p))) <= g.tolerance()

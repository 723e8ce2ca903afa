import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from magtube import geometry as geo
from magtube import experiments as ex
from magtube.eigsolve import SolveRequest, lowest_eigs
from magtube.fields import landau_gauge, make_field
from magtube.operators import (GroundState2D, PlanarPotential, assemble_h3d, grid2, grid3,
                               prepare_tube, well_potential)

S0 = 0.6
SEC = geo.disk_section(0.5)
WELL = well_potential(12.0, SEC)


@pytest.fixture(scope="module")
def th():
    return ex.threshold(WELL, 2.0, 0.2, S0)


@pytest.fixture(scope="module")
def straight_data():
    frame = geo.build_curve(geo.CurveSpec(kind="straight", extent=5))
    return prepare_tube(frame, SEC, WELL, grid3(2.0, -2.0, 2.0, 0.2), S0)


def test_bump_profile():
    t = np.linspace(0, 3, 3001)
    b = ex.bump(t)
    assert np.all(b[(t <= 1) | (t >= 2)] == 0)
    assert b.max() == pytest.approx(1.0, abs=1e-6)
    h = 1e-6
    inner = t[(t > 1.05) & (t < 1.95)]
    fd = (ex.bump(inner + h) - ex.bump(inner - h)) / (2 * h)
    assert np.max(np.abs(fd - ex.dbump(inner))) <= 1e-6


def test_threshold_calibration(th):
    assert th.e < 0 and th.e_fine < 0
    assert th.calibration == pytest.approx(4 / 3 * abs(th.e - th.e_fine))
    assert np.all(th.gs.f > 0)


def test_weyl_norm_independent_of_k(th):
    norms = [ex.weyl_residual(th.gs, WELL, 1.0, k, s0=S0).norm for k in (8, 16, 32)]
    assert max(norms) - min(norms) <= 1e-6 * max(norms)


def test_weyl_residual_decays_and_scales_with_p(th):
    r = [ex.weyl_residual(th.gs, WELL, 1.0, k, hz=0.02, s0=S0) for k in (8, 16, 32)]
    slope = ex.loglog_slope([p.k for p in r], [p.residual for p in r])
    assert slope == pytest.approx(-1.0, abs=0.1)
    a = ex.weyl_residual(th.gs, WELL, 1.0, 16, s0=S0)
    b = ex.weyl_residual(th.gs, WELL, 2.0, 16, s0=S0)
    assert b.chi_term / a.chi_term == pytest.approx(2.0, rel=1e-12)
    zero = ex.weyl_residual(th.gs, WELL, 0.0, 16, s0=S0)
    assert zero.chi_term == 0.0 and zero.residual < a.residual


def test_weyl_guards(th):
    with pytest.raises(ValueError, match="must exceed"):
        ex.weyl_residual(th.gs, WELL, 1.0, 1, s0=S0)
    with pytest.raises(ValueError, match="too short"):
        ex.weyl_residual(th.gs, WELL, 1.0, 8, s0=S0, z_start=9.0)


def test_loglog_slope_exact():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    assert ex.loglog_slope(x, 3 * x**-1.5) == pytest.approx(-1.5, abs=1e-12)


def test_edge_study_straight_tube(th):
    st_ = ex.edge_study(WELL, SEC, (0.0, 0.3, 1.0), S0, [3.0, 4.0], 2.0, 0.2, 0.2, th)
    assert st_.above_edge
    assert all(v > th.e - 3 * th.calibration for v in st_.lowest)
    assert st_.lowest[1] <= st_.lowest[0] + 1e-8


def test_bracketing_on_straight_tube(straight_data, th):
    res = ex.bracketing_study(straight_data, (0.0, 0.2, 1.0), th, 0.8)
    assert res.lower_bound_ok and res.complement_ok and res.outer_ok
    assert sum(v for k, v in res.dims.items() if k != "full") == res.dims["full"]
    assert res.full >= res.pieces_min - 1e-8


def test_potential_mismatch_zero_for_symmetric_well(straight_data, th):
    assert abs(ex.potential_mismatch(straight_data, th.gs)) <= 1e-10


def test_trial_state_bounds_ground(straight_data, th):
    op = assemble_h3d(straight_data, landau_gauge(make_field((0, 0, 1.0), S0)))
    low = lowest_eigs(SolveRequest(op, k=1, tol=1e-9, sigma=th.e - 5)).lowest
    phi = lambda x1, x2, x3: np.exp(-x3**2) + 0j  # noqa: E731
    assert ex.trial_state_form(op, th.gs, straight_data.grid, phi) >= low - 1e-9


def test_sweep_rejects_bad_field_grid(straight_data, th):
    for bad in ([1.0, 2.0], [0.0, 2.0, 2.0], [0.0, 3.0, 1.0]):
        with pytest.raises(ValueError, match="start at 0"):
            ex.field_sweep(straight_data, (0, 0, 1), bad, th)
    with pytest.raises(ValueError, match="sweep mode"):
        ex.field_sweep(straight_data, (0, 0, 1), [0.0, 1.0], th, mode="async")


def test_sweep_no_initial_bound_state(straight_data):
    fake = ex.Threshold(e=-100.0, e_fine=-100.0, error=0.01, h=0.2)
    with pytest.raises(ex.NoInitialBoundState):
        ex.field_sweep(straight_data, (0, 0, 1), [0.0, 1.0], fake)


def test_sweep_serial_and_parallel_agree(straight_data):
    fake = ex.Threshold(e=-3.0, e_fine=-3.0, error=0.01, h=0.2)
    a = ex.field_sweep(straight_data, (0, 0, 1), [0.0, 2.0, 4.0], fake, tol=1e-9,
                       require_margin=0.0)
    b = ex.field_sweep(straight_data, (0, 0, 1), [0.0, 2.0, 4.0], fake, tol=1e-9,
                       mode="parallel", threads=2, require_margin=0.0)
    assert np.allclose(a.lowest, b.lowest, atol=1e-7)
    assert a.as_dict()["fields"] == [0.0, 2.0, 4.0]


def _linear_samples(alpha, radii=(0.8, 1.0, 1.4), fields=(10, 20, 40, 80, 160)):
    return {R: [(B, alpha * B) for B in fields] for R in radii}


def test_fit_alpha_exact_line():
    fit = ex.fit_alpha(_linear_samples(0.59))
    assert fit.alpha == pytest.approx(0.59, rel=1e-12)
    assert fit.spread == pytest.approx(0.0, abs=1e-12)
    assert fit.condition_ok and fit.intercept_ok
    assert fit.window[1.0] == [10.0, 160.0]


def test_fit_alpha_rejects_curved_data():
    s = {1.0: [(B, B * B) for B in (10, 20, 40, 80, 160)]}
    with pytest.raises(ex.AsymptoticRegimeNotReached):
        ex.fit_alpha(s)


def test_fit_alpha_needs_points():
    with pytest.raises(ValueError, match="samples"):
        ex.fit_alpha({1.0: [(10, 5.0), (20, 10.0)]})


def test_fit_alpha_on_disk_data():
    fit = ex.fit_alpha(ex.disk_samples([20, 40, 80, 160, 320], [1.0], N=600))
    # magnetic Neumann disk: lambda_1 / B tends to the de Gennes constant 0.5901
    assert 0.5 < fit.alpha < 0.75
    assert fit.condition_ok


def _fake_gs(beta, fsup):
    g = grid2(1.0, 0.5)
    return GroundState2D(e=-1.0, f=np.ones(g.shape), grid=g, beta_f=beta, f_sup=fsup, s0=1.0,
                         gap=1.0, residual=0.0)


def test_constants_constant_profile():
    c = ex.theorem2_constants(_fake_gs(0.25, 0.5), 0.6, eps=2.0)
    assert c.C == pytest.approx(0.3)
    half = ex.theorem2_constants(_fake_gs(0.25, 0.5), 0.6, eps=1.0)
    assert half.threshold == pytest.approx(2 * c.threshold)


def test_constants_need_positive_beta():
    with pytest.raises(ValueError, match="positivity"):
        ex.theorem2_constants(_fake_gs(0.0, 1.0), 0.6)


def test_check_assumption2():
    V = PlanarPotential(lambda y1, y2: 1.0 + y1, sup=2.0, radius=1.0)
    osc = V.oscillation()
    assert osc == pytest.approx(2.0, abs=1e-12)
    assert ex.check_assumption2(V, C=1.0, B3=2.0)
    assert not ex.check_assumption2(V, C=1.0, B3=1.9)


def test_grid_tag():
    assert ex.grid_tag(None) == "nogrid"
    assert ex.grid_tag(grid2(1.0, 0.5)) == "h0.5x0.5_n3x3"


def test_write_experiment(tmp_path):
    h = "ab" * 32
    j, c = ex.write_experiment(tmp_path / "run", "lemma", h, "nogrid",
                               {"x": np.float64(1.5), "arr": np.arange(2)},
                               [{"B": 1, "lam": 0.5}, {"B": 2}])
    assert j.name == f"lemma_{h[:12]}_nogrid.json"
    assert json.loads(j.read_text()) == {"arr": [0, 1], "x": 1.5}
    rows = list(csv.DictReader(open(c)))
    assert rows[0] == {"B": "1", "lam": "0.5"} and rows[1]["lam"] == ""


@settings(max_examples=20, deadline=None)
@given(alpha=st.floats(0.1, 2.0), shift=st.floats(-1.0, 1.0))
def test_fit_alpha_recovers_slope(alpha, shift):
    fit = ex.fit_alpha({1.0: [(B, alpha * B + shift) for B in (10, 20, 40, 80, 160)]})
    assert fit.alpha == pytest.approx(alpha, rel=1e-9)
    assert fit.intercepts[1.0] == pytest.approx(shift, abs=1e-8 * (1 + alpha * 160))
    assert math.isfinite(fit.stderr[1.0])

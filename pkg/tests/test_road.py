import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import normal_equations_fit

from platoon_mpc.road import (GradeProfile, LegendrePreview, RouteParseError, data_path, eval_preview,
                              fit_preview, legendre_basis, load_route, make_rolling_route, make_s_road,
                              save_route)


def test_grade_profile_validation():
    with pytest.raises(ValueError):
        GradeProfile.from_breakpoints([(0, 0), (0, 0.01)])
    with pytest.raises(ValueError):
        GradeProfile.from_breakpoints([(0, 0), (10, 0.2)])


def test_profile_interpolation_and_extension():
    p = GradeProfile.from_breakpoints([(0, 0.0), (1000, 0.02)])
    assert p.grade(500) == pytest.approx(0.01)
    assert p.grade(5000) == 0.02
    assert p.grade(-5) == 0.0
    const = GradeProfile.from_breakpoints([(0, 0.01), (1000, 0.01)])
    assert np.all(const.grade(np.linspace(-100, 2000, 7)) == 0.01)


def test_constant_and_linear_fits_exact():
    const = GradeProfile.from_breakpoints([(0, 0.02), (1000, 0.02)])
    fit = fit_preview(const, 100.0, 300.0)
    assert np.allclose(fit.c, [0.02, 0, 0, 0], atol=1e-12)
    # alpha(l) = 0.01 * l over the window [100, 400]
    lin = GradeProfile.from_breakpoints([(100, -0.01), (400, 0.01)])
    fit = fit_preview(lin, 100.0, 300.0)
    assert np.allclose(fit.c, [0, 0.01, 0, 0], atol=1e-12)


def test_eval_preview_basis_values():
    assert eval_preview(LegendrePreview((0.02, 0, 0, 0), 0.0, 100.0), 37.0) == pytest.approx(0.02)
    assert eval_preview(LegendrePreview((0, 0, 1, 0), 0.0, 100.0), 50.0) == pytest.approx(-0.5)
    assert eval_preview(LegendrePreview((0, 0, 0, 1), 0.0, 100.0), 100.0) == pytest.approx(1.0)
    # clamped outside the window
    assert eval_preview(LegendrePreview((0, 1, 0, 0), 0.0, 100.0), 500.0) == pytest.approx(1.0)


def test_preview_rejects_degenerate_sampling(s_road):
    with pytest.raises(ValueError):
        fit_preview(s_road, 0.0, 100.0, n_samples=3)
    with pytest.raises(ValueError):
        LegendrePreview((0, 0, 0), 0.0, 1.0)


def test_fit_matches_normal_equations(s_road, rng):
    for _ in range(100):
        s0 = rng.uniform(0, 35000)
        s_plus = rng.uniform(50, 800)
        fit = fit_preview(s_road, s0, s_plus)
        assert np.max(np.abs(np.array(fit.c) - normal_equations_fit(s_road, s0, s_plus, 20))) < 1e-9


@given(st.lists(st.floats(-0.03, 0.03), min_size=4, max_size=4), st.integers(4, 40))
def test_cubic_grades_reproduced(coef, n):
    # sample a cubic in l densely, then fit from those breakpoints
    s = np.linspace(0, 1000, 4001)
    ell = 2 * s / 1000 - 1
    g = legendre_basis(ell) @ np.array(coef)
    if np.max(np.abs(g)) > 0.15:
        return
    prof = GradeProfile(s, g, 1000.0)
    fit = fit_preview(prof, 0.0, 1000.0, n)
    samples = np.linspace(0, 1000, n)
    # breakpoint interpolation of the cubic is exact only at the breakpoints; samples hit them when n-1 divides 4000
    if 4000 % (n - 1) == 0:
        assert np.allclose(eval_preview(fit, samples), prof.grade(samples), atol=1e-12)


@pytest.mark.parametrize("j", range(4))
def test_pure_legendre_samples_give_unit_vector(j):
    s = np.linspace(0, 500, 20)
    ell = np.linspace(-1, 1, 20)
    g = 0.1 * legendre_basis(ell)[:, j]
    prof = GradeProfile(s, g, 500.0)
    fit = fit_preview(prof, 0.0, 500.0, 20)
    expect = np.zeros(4)
    expect[j] = 0.1
    assert np.allclose(fit.c, expect, atol=1e-12)


@given(st.floats(0, 30000), st.floats(100, 1000), st.floats(0, 1), st.floats(0, 1))
def test_eval_preview_lipschitz(s0, s_plus, a, b):
    fit = fit_preview(make_s_road(), s0, s_plus)
    # |P0'|..|P3'| are bounded by 0, 1, 3, 6 on [-1, 1]
    lip = 2 / s_plus * sum(abs(c) * m for c, m in zip(fit.c, (0, 1, 3, 6)))
    sa, sb = s0 + a * s_plus, s0 + b * s_plus
    assert abs(eval_preview(fit, sa) - eval_preview(fit, sb)) <= lip * abs(sa - sb) + 1e-15


def test_s_road_geometry():
    road = make_s_road()
    assert road.s_f == 35000.0
    down = road.elevation(5000 - 1000, 15000 + 1000)
    up = road.elevation(20000 - 1000, 30000 + 1000)
    assert down == pytest.approx(-up, rel=1e-9)
    assert up == pytest.approx(10000 * np.sin(0.04), rel=0.01)
    assert road.grade(25000) == pytest.approx(0.04)
    assert road.grade(10000) == pytest.approx(-0.04)
    assert road.grade(2000) == 0.0


def test_s_road_without_ramps_is_piecewise_constant():
    road = make_s_road(ramp=0.0)
    g = road.grade(np.array([4999.0, 5001.0, 14999.0, 15001.0]))
    assert np.allclose(g, [0, -0.04, -0.04, 0], atol=1e-9)


def test_route_file_roundtrip(tmp_path):
    packaged = load_route(data_path("rolling_70km.csv"))
    regenerated = make_rolling_route()
    assert np.array_equal(packaged.positions, regenerated.positions)
    assert np.array_equal(packaged.grades, regenerated.grades)
    path = tmp_path / "r.csv"
    save_route(packaged, path)
    again = load_route(path)
    assert np.array_equal(again.positions, packaged.positions)
    assert np.array_equal(again.grades, packaged.grades)
    assert packaged.s_f == 70000.0
    assert np.max(np.abs(packaged.grades)) == pytest.approx(0.045, abs=1e-3)


@pytest.mark.parametrize("body,line", [
    ("s_m,grade_rad\n0,0\n0,0.01\n", 3),
    ("s_m,grade_rad\n0,0\n10,abc\n", 3),
    ("s,grade\n0,0\n", 1),
])
def test_route_parse_errors(tmp_path, body, line):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(RouteParseError, match=f":{line}:"):
        load_route(path)

"""Tests for the model systems, splitting, and the log-contraction cocycle."""

import math

import numpy as np
import pytest

from gmstruct.dynamics import (
    Point,
    backward_base_orbit,
    check_domination,
    circle_dist,
    cone_invariance_violations,
    cu_direction,
    intermittent_solenoid,
    log_contraction_series,
    orbit_base,
    step,
    uniform_solenoid,
)
from gmstruct.errors import NotSettled


def test_step_uniform_arithmetic():
    sys = uniform_solenoid(lambda_s=0.25, coupling=0.0)
    y = step(sys, Point(0.3, (0.7, 0.0)))
    assert y.base == pytest.approx(0.6, abs=1e-15)
    assert y.fiber[0] == pytest.approx(0.175, abs=1e-15)
    assert y.fiber[1] == pytest.approx(0.0, abs=1e-15)


def test_intermittent_base_formula():
    sys = intermittent_solenoid(alpha=0.5)
    assert float(sys.base_map(0.25)) == pytest.approx(0.25 * (1 + 0.5 ** 0.5), rel=1e-12)


def test_intermittent_neutral_fixed_point():
    sys = intermittent_solenoid(alpha=0.5)
    assert float(sys.base_map(0.0)) == 0.0
    assert float(sys.base_deriv(0.0)) == 1.0


def test_fiber_stays_in_disk():
    sys = uniform_solenoid(lambda_s=0.25, coupling=1.0)
    rng = np.random.default_rng(1)
    t = rng.random(500)
    u = rng.uniform(-0.7, 0.7, 500)
    v = rng.uniform(-0.7, 0.7, 500)
    for _ in range(20):
        t, u, v = sys.step_arrays(t, u, v)
    assert np.all(np.hypot(u, v) <= sys.lambda_s + sys.coupling / 2.0 + 1e-12)


def test_base_inverse_roundtrip():
    for sys in (uniform_solenoid(), intermittent_solenoid(alpha=0.5)):
        t = np.linspace(0.01, 0.99, 37)
        for branch in (0, 1):
            s = sys.base_inverse(t, branch)
            assert np.max(np.abs(sys.base_map(s) - t)) < 1e-12


def test_cu_direction_uncoupled_exact():
    sys = uniform_solenoid(coupling=0.0)
    v = cu_direction(sys, Point(0.37), settle=1)
    assert np.array_equal(v, np.array([1.0, 0.0, 0.0]))


def test_cu_direction_against_long_settle_oracle():
    # settle=100 must agree with the settle=200 reference on a shared history
    sys = uniform_solenoid(lambda_s=0.25, coupling=1.0)
    rng = np.random.default_rng(7)
    hist = backward_base_orbit(sys, 0.1, 200, rng=rng)
    ref = cu_direction(sys, Point(0.1), settle=200, history=hist)
    v = cu_direction(sys, Point(0.1), settle=100, history=hist)
    assert np.linalg.norm(v - ref) < 1e-8


def test_cu_direction_short_history_raises():
    sys = uniform_solenoid(coupling=1.0, lambda_s=0.25)
    with pytest.raises(NotSettled):
        cu_direction(sys, Point(0.1), settle=100,
                     history=backward_base_orbit(sys, 0.1, 50))


def test_cu_direction_transverse_to_fiber_plane():
    # angle between e_cu and the stable (fiber) plane bounded below
    sys = uniform_solenoid(lambda_s=0.25, coupling=1.0)
    rng = np.random.default_rng(3)
    angles = []
    for t0 in rng.random(1000):
        v = cu_direction(sys, Point(t0), settle=80, rng=rng)
        angles.append(math.asin(abs(v[0])))
    assert min(angles) > 0.1


def test_log_series_uniform_constant():
    sys = uniform_solenoid(coupling=0.0)
    series = log_contraction_series(sys, Point(0.3), 50)
    assert np.allclose(series.values, -math.log(2.0), atol=1e-14)


def test_log_series_intermittent_nonpositive_and_nue():
    sys = intermittent_solenoid(alpha=0.5)
    series = log_contraction_series(sys, Point(0.123), 10 ** 4)
    assert np.all(series.values <= 1e-14)
    assert np.mean(series.values) < -0.1


def test_log_series_neutral_orbit_limit():
    # orbits passing near t = 0 have a_j close to 0 there
    sys = intermittent_solenoid(alpha=0.5)
    series = log_contraction_series(sys, Point(1e-10), 5)
    assert series.values[0] > -1e-4


def test_cocycle_additivity():
    sys = intermittent_solenoid(alpha=0.5, lambda_s=0.25, coupling=0.5)
    n1, n2 = 37, 63
    full = log_contraction_series(sys, Point(0.271), n1 + n2)
    first = log_contraction_series(sys, Point(0.271), n1)
    # reproduce the state after n1 steps exactly
    t = np.float64(0.271)
    s1 = s2 = np.float64(0.0)
    for _ in range(n1):
        s1n, s2n, _ = sys.push_tangent(t, s1, s2)
        t = sys.base_map(t)
        s1, s2 = s1n, s2n
    second = log_contraction_series(sys, Point(float(t)), n2, slopes0=(float(s1), float(s2)))
    glued = np.concatenate([first.values, second.values])
    assert np.array_equal(full.values, glued)


def test_check_domination_uniform_exact():
    rep = check_domination(uniform_solenoid(lambda_s=0.25, coupling=0.0))
    assert rep["lambda_measured"] == pytest.approx(0.125, abs=1e-15)
    assert rep["pass"]


def test_check_domination_intermittent_bound():
    rep = check_domination(intermittent_solenoid(alpha=0.5, lambda_s=0.1))
    assert rep["lambda_measured"] <= 0.1 + 1e-12
    assert rep["pass"]


def test_check_domination_coupled():
    rep = check_domination(uniform_solenoid(lambda_s=0.25, coupling=1.0), samples=10 ** 4)
    assert rep["lambda_measured"] < 1.0
    assert rep["pass"]


def test_cone_invariance():
    assert cone_invariance_violations(uniform_solenoid(lambda_s=0.25, coupling=1.0)) == 0
    assert cone_invariance_violations(intermittent_solenoid(alpha=0.5, lambda_s=0.1,
                                                            coupling=0.3)) == 0


def test_orbit_helpers():
    sys = uniform_solenoid()
    fwd = orbit_base(sys, 0.1, 5)
    assert fwd[1] == pytest.approx(0.2)
    back = backward_base_orbit(sys, 0.4, 3, branches=[0, 1, 0])
    assert np.max(np.abs([float(sys.base_map(back[i])) - back[i + 1] for i in range(3)])) < 1e-12


def test_circle_dist_wraps():
    assert circle_dist(0.05, 0.95) == pytest.approx(0.1)


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        uniform_solenoid(lambda_s=1.5)
    with pytest.raises(ValueError):
        intermittent_solenoid(alpha=1.5)
    with pytest.raises(ValueError):
        uniform_solenoid(lambda_s=0.9, coupling=1.0)  # fiber would escape the disk

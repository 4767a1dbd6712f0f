import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from hypobridge.ccdist import ball_volume, cc_distance, cc_distance_batch, distance_compare_fit, endpoint
from hypobridge.models import make_model

HEIS = make_model("heisenberg")
ELL = make_model("torus-elliptic")


def test_straight_line():
    d, path = cc_distance(HEIS, (0, 0, 0), (0.3, 0, 0))
    assert d == pytest.approx(0.3, rel=1e-2)
    assert path.residual < 1e-3 and not path.unreachable


def test_zero_distance():
    d, path = cc_distance(HEIS, (0.1, 0.2, 0.3), (0.1, 0.2, 0.3))
    assert d == 0 and path.n_segments == 0


def test_z_axis_matches_circle_oracle():
    zs = np.array([0.05, 0.2])
    d, res, _, _ = cc_distance_batch(HEIS, np.zeros((2, 3)), np.c_[0 * zs, 0 * zs, zs])
    assert np.all(res < 1e-3)
    assert np.allclose(d, oracles.heisenberg_horizontal_distance_z(zs), rtol=0.02)


def test_z_axis_scaling_against_polygon_search():
    # scaling of an independent polygonal search matches the optimiser's
    z = 0.1
    brute = oracles.brute_force_z_distance(z)
    d, _ = cc_distance(HEIS, (0, 0, 0), (0, 0, z))
    assert d <= brute * 1.001
    assert oracles.brute_force_z_distance(4 * z) / brute == pytest.approx(2.0, rel=1e-9)


def test_control_path_reaches_target():
    d, path = cc_distance(HEIS, (0, 0, 0), (0.2, -0.1, 0.1))
    end = path.curve(HEIS)[-1]
    assert np.linalg.norm(end - np.array([0.2, -0.1, 0.1])) < 2e-3
    assert path.length == pytest.approx(d)


@settings(max_examples=8)
@given(st.tuples(*[st.floats(-0.3, 0.3)] * 3), st.tuples(*[st.floats(-0.3, 0.3)] * 3))
def test_symmetry(a, b):
    a, b = np.array(a), np.array(b)
    d, res, _, _ = cc_distance_batch(HEIS, np.array([a, b]), np.array([b, a]), n_segments=16, restarts=4)
    assert np.all(res < 1e-3)
    assert d[0] == pytest.approx(d[1], rel=0.03, abs=1e-3)


def test_triangle_inequality():
    r = np.random.default_rng(2)
    P = r.uniform(-0.3, 0.3, size=(6, 3, 3))
    X = np.concatenate([P[:, 0], P[:, 1], P[:, 0]])
    Y = np.concatenate([P[:, 1], P[:, 2], P[:, 2]])
    d, _, _, _ = cc_distance_batch(HEIS, X, Y, n_segments=16, restarts=4)
    ab, bc, ac = d[:6], d[6:12], d[12:]
    # upper bounds from an optimiser: allow a small optimality gap
    assert np.all(ac <= (ab + bc) * 1.03 + 1e-3)


def test_dominates_riemannian_distance_on_heisenberg_plane():
    # |X1|, |X2| >= 1 in the xy-projection, so d >= planar distance
    r = np.random.default_rng(3)
    Y = r.uniform(-0.4, 0.4, size=(10, 3))
    d, _, _, _ = cc_distance_batch(HEIS, np.zeros((10, 3)), Y, n_segments=16, restarts=4)
    assert np.all(d >= np.linalg.norm(Y[:, :2], axis=1) - 1e-9)


def test_elliptic_torus_distance_equals_flat():
    r = np.random.default_rng(4)
    X, Y = r.uniform(0, 1, (8, 2)), r.uniform(0, 1, (8, 2))
    d, _, _, _ = cc_distance_batch(ELL, X, Y, n_segments=8, restarts=2)
    rho = ELL.space.distance(X, Y)
    assert np.allclose(d, rho, rtol=1e-2)
    fit = distance_compare_fit(ELL, np.stack([X, Y], 1), d_values=d)
    assert fit["c"] <= 1.5 and fit["upper_violations"] == 0


def test_compare_fit_heisenberg_has_finite_constant():
    r = np.random.default_rng(5)
    X = r.uniform(-0.2, 0.2, (8, 3))
    Y = X + r.uniform(-0.1, 0.1, (8, 3))
    fit = distance_compare_fit(HEIS, np.stack([X, Y], 1), n_segments=16, restarts=4)
    assert np.isfinite(fit["c"]) and fit["upper_violations"] == 0


def test_ball_volume_flat_disc():
    v, se = ball_volume(ELL, np.array([0.5, 0.5]), 0.1, n_mc=400)
    assert abs(v - np.pi * 0.01) <= max(3 * se, 0.1 * np.pi * 0.01)


def test_endpoint_flow_is_exact_for_constant_fields():
    U = np.full((1, 4, 2), 0.25)
    assert np.allclose(endpoint(ELL, np.zeros((1, 2)), U), [[0.25, 0.25]])


def test_rejects_too_few_segments():
    with pytest.raises(ValueError):
        cc_distance_batch(HEIS, np.zeros((1, 3)), np.ones((1, 3)), n_segments=2)

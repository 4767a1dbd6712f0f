import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from hypobridge.heatkernel import (
    CFLError,
    DriftUnavailable,
    check_gaussian_bounds,
    kernel_value,
    load_kernel,
    log_horizontal_gradient,
    mc_kde_kernel,
    on_diagonal_exponent,
    save_kernel,
    scott_bandwidth,
    solve_heat_grid,
    time_derivative,
)
from hypobridge.heatkernel.estimate import log_gradient
from hypobridge.heatkernel.grid import generator_matrix
from hypobridge.models import make_model

ELL = make_model("torus-elliptic")
GRU = make_model("torus-grushin")


@pytest.fixture(scope="module")
def ell_kernel():
    return solve_heat_grid(ELL, (0.0, 0.0), np.round(np.arange(0.05, 0.3001, 0.05), 10), n=64)


def test_grid_matches_theta_on_nodes(ell_kernel):
    k = ell_kernel
    for t in (0.1, 0.2):
        i = k.time_index(t)
        want = oracles.torus_heat(np.zeros(2), k.nodes(i), t)
        assert np.max(np.abs(k.values[i] - want) / want) < 1e-2


def test_origin_value_matches_theta_at_01():
    k = solve_heat_grid(ELL, (0.0, 0.0), [0.1], n=64)
    v, se = kernel_value(k, 0.1, (0, 0), (0, 0))
    assert se == 0
    assert abs(v / oracles.torus_heat(np.zeros(2), np.zeros(2), 0.1) - 1) < 1e-2


def test_grid_off_node_interpolation(ell_kernel):
    rng = np.random.default_rng(0)
    y = rng.uniform(0, 1, size=(200, 2))
    v, _ = kernel_value(ell_kernel, 0.2, (0, 0), y)
    want = oracles.torus_heat(np.zeros(2), y, 0.2)
    # multilinear interpolation error is O(h^2 |D^2 q|)
    assert np.max(np.abs(v - want) / want) < 2e-2


def test_mass_conserved(ell_kernel):
    assert np.max(np.abs(ell_kernel.mass - 1)) < 1e-10


def test_generator_rows_sum_to_zero():
    G, _, _ = generator_matrix(make_model("torus-grushin", ["0.4", "0"]), 32)
    assert np.max(np.abs(np.asarray(G.sum(axis=1)).ravel())) < 1e-9


def test_symmetric_kernel_symmetry():
    # mesh-aligned points, so both solves keep their exact source
    x, y = (0.3125, 0.1875), (0.6875, 0.59375)
    ka = solve_heat_grid(GRU, x, [0.2], n=64)
    kb = solve_heat_grid(GRU, y, [0.2], n=64)
    a, _ = kernel_value(ka, 0.2, x, y)
    b, _ = kernel_value(kb, 0.2, y, x)
    assert abs(a - b) / b < 2e-2


def test_chapman_kolmogorov():
    # q_{s+t}(x0, .) equals the solve restarted at time s from q_s
    x0 = (0.3, 0.2)
    k = solve_heat_grid(GRU, x0, [0.1, 0.25], n=48)
    i = k.time_index(0.1)
    cont = solve_heat_grid(GRU, x0, [0.25], n=48, initial=k.values[i], t0=0.1)
    assert np.max(np.abs(cont.values[0] - k.values[k.time_index(0.25)])) / k.values.max() < 1e-3


def test_first_and_second_argument_duality():
    sys = make_model("torus-elliptic", ["0.5", "0.2"])
    x, z = (0.3125, 0.1875), (0.6875, 0.59375)
    ks = solve_heat_grid(sys, x, [0.3], n=64, argument="second")
    kf = solve_heat_grid(sys, z, [0.3], n=64, argument="first")
    a, _ = kernel_value(ks, 0.3, x, z)
    b, _ = kernel_value(kf, 0.3, x, z)
    assert abs(a - b) / a < 1e-2
    assert abs(a / oracles.torus_heat(np.array(x), np.array(z), 0.3, drift=(0.5, 0.2)) - 1) < 1e-2


def test_cfl_error_reports_dt():
    with pytest.raises(CFLError) as e:
        solve_heat_grid(ELL, (0, 0), [0.1], n=32, dt=1.0)
    assert e.value.suggested_dt < 1.0


def test_rejects_bad_times():
    with pytest.raises(ValueError):
        solve_heat_grid(ELL, (0, 0), [0.2, 0.1], n=32)
    with pytest.raises(ValueError):
        solve_heat_grid(make_model("heisenberg"), (0, 0, 0), [0.1])


def test_query_must_fix_source(ell_kernel):
    with pytest.raises(ValueError):
        kernel_value(ell_kernel, 0.1, (0.1, 0.1), (0.2, 0.2))
    with pytest.raises(ValueError):
        kernel_value(ell_kernel, 0.01, (0, 0), (0.2, 0.2))


def test_log_time_interpolation_exact_at_nodes(ell_kernel):
    a, _ = kernel_value(ell_kernel, 0.15, (0, 0), (0.3, 0.4))
    i = ell_kernel.time_index(0.15)
    from hypobridge.heatkernel.estimate import grid_interpolate

    assert a == pytest.approx(float(grid_interpolate(ell_kernel, i, np.array([[0.3, 0.4]]))[0]))


def test_log_gradient_matches_theta():
    z0 = np.array([0.7, 0.6])
    k = solve_heat_grid(ELL, z0, [0.15, 0.2, 0.25], n=128, argument="first")
    x = np.array([[0.5, 0.5], [0.8, 0.4], [0.6, 0.75]])
    g = log_horizontal_gradient(k, ELL, 0.2, x)
    want = oracles.torus_heat_grad_first(x, k.source, 0.2)
    assert np.max(np.abs(g - want) / np.abs(want)) < 1e-2


def test_gradient_vanishes_at_centre():
    z0 = (0.5, 0.5)
    k = solve_heat_grid(ELL, z0, [0.1], n=64, argument="first")
    g, ok = log_gradient(k, ELL.space, 0.1, np.array(z0))
    assert ok and np.max(np.abs(g)) < 1e-8


def test_gradient_floor():
    k = solve_heat_grid(ELL, (0.5, 0.5), [0.002], n=64, argument="first", dt=None)
    with pytest.raises(DriftUnavailable):
        log_horizontal_gradient(k, ELL, 0.002, np.array([[0.0, 0.0]]))
    g = log_horizontal_gradient(k, ELL, 0.002, np.array([[0.0, 0.0]]), on_floor="nan")
    assert np.all(np.isnan(g))


def test_time_derivative_matches_theta():
    ts = np.round(np.arange(0.1, 0.3001, 0.01), 10)
    k = solve_heat_grid(ELL, (0, 0), ts, n=128)
    y = np.array([0.2, 0.1])
    v, _, one = time_derivative(k, 0.2, (0, 0), y)
    want = oracles.torus_heat_dt(np.zeros(2), y, 0.2)
    assert not one and abs(v - want) / abs(want) < 2e-2
    _, _, one = time_derivative(k, 0.1, (0, 0), y)
    assert one


def test_on_diagonal_exponent_elliptic():
    k = solve_heat_grid(ELL, (0, 0), np.geomspace(0.01, 0.05, 6), n=128)
    fit = on_diagonal_exponent(k, (0, 0), (0.01, 0.05))
    assert 1.8 <= fit["Q"] <= 2.2


def test_exponent_needs_five_times(ell_kernel):
    with pytest.raises(ValueError):
        on_diagonal_exponent(ell_kernel, (0, 0), (0.05, 0.15))


def test_gaussian_bounds_elliptic_torus():
    k = solve_heat_grid(ELL, (0, 0), np.round(np.arange(0.02, 0.3001, 0.02), 10), n=64)
    rep = check_gaussian_bounds(k, lambda x, ys: ELL.space.distance(x, ys), lambda r: np.pi * r * r)
    assert rep.violation_fraction["lower"] == 0 and rep.violation_fraction["upper"] == 0
    assert np.isfinite(list(rep.constants.values())).all()


def test_save_load_round_trip(tmp_path, ell_kernel):
    p = tmp_path / "k.npz"
    save_kernel(p, ell_kernel)
    k2 = load_kernel(p)
    assert np.array_equal(k2.values, ell_kernel.values)
    assert np.array_equal(k2.times, ell_kernel.times)
    assert k2.model == ell_kernel.model and k2.argument == ell_kernel.argument


def test_scott_bandwidth_rate():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(1000, 2))
    b = rng.normal(size=(16000, 2))
    ha, _ = scott_bandwidth(a)
    hb, _ = scott_bandwidth(b)
    # n^(-1/(d+4)) with d = 2
    assert ha[0] / hb[0] == pytest.approx(16 ** (1 / 6), rel=0.05)


def test_scott_bandwidth_floor():
    h, floored = scott_bandwidth(np.zeros((100, 2)) + [[1.0, 2.0]])
    assert floored and np.all(h > 0)


@given(st.floats(0.05, 0.45), st.floats(0.05, 0.45))
def test_kde_circular_std_is_shift_invariant(a, b):
    from hypobridge.heatkernel.kde import circular_std

    rng = np.random.default_rng(0)
    x = rng.normal(0, 0.05, 500)
    s1 = circular_std(np.mod(x + a, 1), 1.0)
    s2 = circular_std(np.mod(x + b, 1), 1.0)
    assert s1 == pytest.approx(s2, rel=1e-9)


def test_kde_agrees_with_grid_on_torus():
    src = (0.3125, 0.1875)
    g = solve_heat_grid(ELL, src, [0.2], n=64)
    k = mc_kde_kernel(ELL, src, [0.2], n_paths=20000, seed=3, dt=1e-2, debias=True)
    rng = np.random.default_rng(5)
    y = rng.uniform(0, 1, size=(10, 2))
    v, se = kernel_value(k, 0.2, src, y)
    w, _ = kernel_value(g, 0.2, src, y)
    assert np.all(np.abs(v - w) <= 3 * se + 1e-3 * w)


def test_kde_error_shrinks_with_paths():
    # sqrt(2) rate check: quadrupling paths halves the stated standard error
    src = (0.3, 0.2)
    a = mc_kde_kernel(ELL, src, [0.2], n_paths=4000, seed=1, dt=1e-2, bandwidth=np.array([0.05, 0.05]))
    b = mc_kde_kernel(ELL, src, [0.2], n_paths=16000, seed=1, dt=1e-2, bandwidth=np.array([0.05, 0.05]))
    _, sa = kernel_value(a, 0.2, src, (0.4, 0.3))
    _, sb = kernel_value(b, 0.2, src, (0.4, 0.3))
    assert sa / sb == pytest.approx(2.0, rel=0.1)


def test_kde_needs_enough_paths():
    with pytest.raises(ValueError):
        mc_kde_kernel(ELL, (0, 0), [0.1], n_paths=100)

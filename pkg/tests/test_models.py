import numpy as np
import pytest
import sympy as sp
from hypothesis import given
from hypothesis import strategies as st

from hypobridge.models import (
    EvaluationError,
    adjoint_system,
    bracket_field,
    divergence,
    hormander_level,
    jacobi_residual,
    lie_bracket,
    make_model,
    sample_points,
    symbolic_field,
)

coords = st.floats(-2, 2, allow_nan=False)
points2 = st.tuples(coords, coords).map(np.array)
points3 = st.tuples(coords, coords, coords).map(np.array)
polys = st.sampled_from(["x**2", "sin(y)", "x*y", "cos(x) + y", "exp(x/3)", "1", "y**3 - x"])


def test_torus_bracket_example():
    X1, X2 = make_model("torus-grushin").diffusion
    for x in np.linspace(0, 1, 7):
        v = lie_bracket(X1, X2, np.array([x, 0.4]))
        assert np.allclose(v, [0, 2 * np.pi * np.cos(2 * np.pi * x)])


def test_heisenberg_bracket_is_z():
    X1, X2 = make_model("heisenberg").diffusion
    v = lie_bracket(X1, X2, sample_points(make_model("heisenberg").space, 20, 1))
    assert np.allclose(v, [0, 0, 1])


def test_su2_bracket_is_third_generator():
    X1, X2 = make_model("su2").diffusion
    assert np.allclose(bracket_field(X1, X2).algebra, [0, 0, 1])


@given(polys, polys, polys, polys, points2)
def test_bracket_antisymmetric(a, b, c, d, x):
    X = symbolic_field([a, b], 2)
    Y = symbolic_field([c, d], 2)
    assert np.allclose(lie_bracket(X, Y, x), -lie_bracket(Y, X, x), atol=1e-12)


@given(polys, polys, polys, polys, points2)
def test_fd_bracket_matches_symbolic(a, b, c, d, x):
    X = symbolic_field([a, b], 2)
    Y = symbolic_field([c, d], 2)
    s = lie_bracket(X, Y, x, backend="symbolic")
    f = lie_bracket(X, Y, x, backend="fd")
    assert np.allclose(f, s, atol=1e-5 * (1 + np.abs(s).max()))


def test_fd_bracket_error_is_second_order():
    # central differences: halving the step divides the error by about 4
    from hypobridge import models

    X = symbolic_field(["sin(x)*y", "cos(y)"], 2)
    Y = symbolic_field(["exp(x/2)", "x*y**2"], 2)
    x = np.array([0.7, -0.4])
    exact = lie_bracket(X, Y, x, backend="symbolic")
    errs = []
    for h in (1e-2, 5e-3, 2.5e-3):
        old = models.fd_step
        models.fd_step = lambda p, h=h: np.full(np.shape(p)[:-1] + (1,), h)
        try:
            errs.append(np.abs(lie_bracket(X, Y, x, backend="fd") - exact).max())
        finally:
            models.fd_step = old
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.8)


@given(points3)
def test_jacobi_identity(x):
    X = symbolic_field(["1", "0", "y"], 3)
    Y = symbolic_field(["0", "1", "x"], 3)
    Z = symbolic_field(["x*z", "0", "1"], 3)
    assert jacobi_residual(X, Y, Z, x) < 1e-9


def test_constant_fields_commute():
    X = symbolic_field(["0", "sin(2*pi*x)"], 2)
    Y = symbolic_field(["0", "3"], 2)
    assert np.allclose(lie_bracket(X, Y, sample_points(make_model("torus-grushin").space, 10)), 0)


def test_nonfinite_field_raises():
    X = symbolic_field(["1/x", "0"], 2)
    Y = symbolic_field(["0", "1"], 2)
    with pytest.raises(EvaluationError):
        lie_bracket(X, Y, np.array([0.0, 0.0]))


def test_levels_examples():
    tor = make_model("torus-grushin")
    assert hormander_level(tor, [0.25, 0.0]) == 1
    assert hormander_level(tor, [0.0, 0.0]) == 2
    assert hormander_level(tor, [0.5, 0.3]) == 2
    heis = make_model("heisenberg")
    assert np.all(hormander_level(heis, sample_points(heis.space, 50, 2)) == 2)
    assert hormander_level(make_model("torus-elliptic"), [0.1, 0.2]) == 1
    assert np.all(hormander_level(make_model("su2"), sample_points(make_model("su2").space, 20, 3)) == 2)


def test_level_zero_when_not_spanned():
    from hypobridge.models import VectorFieldSystem, zero_field

    X = symbolic_field(["1", "0"], 2)
    sys = VectorFieldSystem(make_model("torus-elliptic").space, zero_field(2), (X,))
    assert hormander_level(sys, [0.3, 0.3]) == 0


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=5), st.integers(1, 2))
def test_level_monotone_in_max_level(xs, lo):
    tor = make_model("torus-grushin")
    pts = np.stack([np.array(xs), np.zeros(len(xs))], -1)
    a = np.atleast_1d(hormander_level(tor, pts, max_level=lo))
    b = np.atleast_1d(hormander_level(tor, pts, max_level=lo + 1))
    # a point spanned at a lower cap keeps its level; unspanned ones may gain one
    assert np.all((a == b) | (a == 0))


def test_divergence_examples():
    tor = make_model("torus-grushin")
    pts = sample_points(tor.space, 30)
    assert np.allclose(divergence(tor, 2, pts), 0)
    X = symbolic_field(["x", "y"], 2)
    from hypobridge.models import field_divergence

    assert np.allclose(field_divergence(X, tor.space, pts), 2)


def test_adjoint_zero_drift_torus_is_self_adjoint():
    sys = make_model("torus-grushin")
    adj = adjoint_system(sys, 1)
    pts = sample_points(sys.space, 20)
    assert np.allclose(adj.drift(pts), 0)


def test_adjoint_divergence_free_drift_flips_sign():
    sys = make_model("torus-elliptic", ["0.5", "0.2"])
    adj = adjoint_system(sys, 1)
    pts = sample_points(sys.space, 20)
    assert np.allclose(adj.drift(pts), -sys.drift(pts))


def test_adjoint_general_formula():
    # Xhat0 = -X0 + sum (X_k log m + div X_k) X_k, checked symbolically
    from hypobridge.models import HEISENBERG, VectorFieldSystem

    X1 = symbolic_field(["1", "0", "0"], 3)
    X2 = symbolic_field(["0", "1 + x**2", "x"], 3)
    X0 = symbolic_field(["y", "0", "0"], 3)
    sys = VectorFieldSystem(HEISENBERG, X0, (X1, X2))
    m = "exp(-x**2/2)"
    adj = adjoint_system(sys, m)
    x, y, z = sp.symbols("x y z")
    logm = -(x**2) / 2
    v1 = sp.Matrix([1, 0, 0])
    v2 = sp.Matrix([0, 1 + x**2, x])
    expect = -sp.Matrix([y, 0, 0]) + sp.diff(logm, x) * v1 + (sp.diff(1 + x**2, y)) * v2
    f = sp.lambdify((x, y, z), expect, "numpy")
    pts = sample_points(HEISENBERG, 10, 4)
    want = np.stack([np.asarray(f(*p), float).ravel() for p in pts])
    assert np.allclose(adj.drift(pts), want)


@given(st.sampled_from(["torus-elliptic", "torus-grushin", "heisenberg"]))
def test_adjoint_involution(name):
    sys = make_model(name, ["0.3", "0.1", "0"] if name == "heisenberg" else ["0.3", "0"])
    twice = adjoint_system(adjoint_system(sys, 1), 1)
    pts = sample_points(sys.space, 15, 5)
    assert np.allclose(twice.drift(pts), sys.drift(pts))


def test_adjoint_rejects_nonpositive_density():
    with pytest.raises(ValueError):
        adjoint_system(make_model("heisenberg"), "x")


def test_unknown_model():
    with pytest.raises(KeyError):
        make_model("sphere")


def test_wrap_and_displacement():
    sp_ = make_model("torus-elliptic").space
    assert np.allclose(sp_.wrap([1.25, -0.25]), [0.25, 0.75])
    assert np.allclose(sp_.displacement([0.9, 0.1], [0.1, 0.9]), [0.2, -0.2])


def test_su2_chart_round_trip():
    from hypobridge.models import su2_exp, su2_log

    th = sample_points(make_model("su2").space, 50, 7, scale=0.8)
    assert np.allclose(su2_log(su2_exp(th)), th)

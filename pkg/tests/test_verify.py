import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hypobridge.heatkernel import solve_heat_grid
from hypobridge.models import make_model
from hypobridge.sde import PathEnsemble, simulate_diffusion
from hypobridge.verify import (
    VerificationReport,
    caoyau_check,
    energy_distance_test,
    expectation_identity_check,
    gradient_log_bound_check,
    kolmogorov_fit,
    rederive_pass,
    reports_to_csv,
    semimartingale_integral,
)

ELL = make_model("torus-elliptic")
ops = st.sampled_from(["<=", ">=", "<", ">", "=="])
nums = st.floats(-1e6, 1e6, allow_nan=False)


@given(st.lists(st.tuples(st.text(min_size=1, max_size=5), nums, ops, nums), max_size=6))
def test_report_pass_rederivable_from_json(checks):
    rep = VerificationReport(statistic="s", estimate=1.0)
    for c in checks:
        rep.check(*c)
    d = json.loads(rep.to_json())
    assert rederive_pass(d) == d["passed"] == rep.passed


def test_report_nonfinite_values_serialise():
    rep = VerificationReport(statistic="s", estimate=float("inf"))
    rep.check("c", float("inf"), ">", 1.0)
    d = json.loads(rep.to_json())
    assert d["estimate"] == "inf" and rederive_pass(d)


def test_reports_csv_layout():
    rep = VerificationReport(statistic="s", estimate=0.5, sweep=[{"eps": 0.1, "estimate": 1.0}])
    rep.check("c", 0.5, "<=", 1)
    text = reports_to_csv([rep])
    lines = text.splitlines()
    assert lines[0] == "statistic,key,value" and "\r" not in text
    assert "s,sweep.0.eps,0.1" in lines


def test_energy_test_same_and_shifted():
    r = np.random.default_rng(0)
    a, b = r.normal(size=(300, 2)), r.normal(size=(300, 2))
    _, p_same = energy_distance_test(a, b, seed=1)
    _, p_diff = energy_distance_test(a, b + 0.5, seed=1)
    assert p_same > 0.01 and p_diff < 0.01


def test_energy_test_deterministic():
    r = np.random.default_rng(0)
    a, b = r.normal(size=(100, 2)), r.normal(size=(100, 2))
    assert energy_distance_test(a, b, seed=3) == energy_distance_test(a, b, seed=3)


def _fake_bridge(g):
    P, n = g.shape[:2]
    times = np.arange(n) * 0.01
    return PathEnsemble(
        times=np.arange(101) * 0.01,
        states=np.zeros((P, 101, 2)),
        path_ids=np.arange(P),
        seed=0,
        stream=0,
        dt=0.01,
        diffusion_count=2,
        failed=np.zeros(P, bool),
        drift_terms=g,
        meta={"model": "test"},
    ) if len(times) else None


@given(st.integers(0, 1000))
def test_semimartingale_monotone_in_upper_limit(seed):
    g = np.random.default_rng(seed).normal(size=(20, 96, 2)) * np.linspace(1, 10, 96)[None, :, None]
    rep = semimartingale_integral(_fake_bridge(g), 1, eps_sweep=(0.1, 0.05))
    est = [r["estimate"] for r in rep.sweep]
    assert est[0] <= est[1]


def test_semimartingale_constant_integrand():
    g = np.ones((10, 96, 2))
    rep = semimartingale_integral(_fake_bridge(g), 2, eps_sweep=(0.1, 0.05))
    assert [r["estimate"] for r in rep.sweep] == pytest.approx([0.9, 0.95])
    assert rep.checks[1]["value"] == pytest.approx(0.05 / 0.9)


def test_semimartingale_excluded_paths_flagged():
    g = np.ones((10, 96, 2))
    g[:3, 5, 0] = np.nan
    rep = semimartingale_integral(_fake_bridge(g), 1, eps_sweep=(0.1, 0.05), max_excluded=0.2)
    assert rep.excluded_fraction == pytest.approx(0.3)
    assert rep.flags["unreliable"] and not rep.passed


def test_kolmogorov_unconditioned_elliptic():
    ens = simulate_diffusion(ELL, (0.3, 0.2), 0.2, 1e-3, 1, n_paths=2000)
    rep = kolmogorov_fit(ens, 4.0, space=ELL.space, target=(1.0, 0.15))
    assert rep.passed and abs(rep.estimate - 1.0) <= 0.15


def test_kolmogorov_needs_p_above_one():
    ens = simulate_diffusion(ELL, (0.3, 0.2), 0.05, 1e-2, 1, n_paths=20)
    with pytest.raises(ValueError):
        kolmogorov_fit(ens, 1.0)


def _torus_kernels(sys, ts, n=64):
    f = solve_heat_grid(sys, (0.3125, 0.1875), ts, n=n)
    b = solve_heat_grid(sys, (0.6875, 0.59375), ts, n=n, argument="first")
    return f, b


def test_caoyau_finds_constants_on_elliptic_torus():
    ts = np.round(np.arange(0.04, 0.3101, 0.01), 10)
    f, _ = _torus_kernels(ELL, ts)
    rep = caoyau_check(f, ELL)
    assert rep.passed
    assert rep.constants["delta"] == 2.0


def test_gradient_bound_constants_finite():
    ts = np.round(np.arange(0.04, 0.3101, 0.01), 10)
    _, b = _torus_kernels(ELL, ts)
    rep = gradient_log_bound_check(b, ELL.space)
    assert np.all(np.isfinite(rep.constants["C"]))
    assert rep.checks[0]["value"] is True


def test_expectation_identities_hold():
    for drift in (None, ["0.5", "0.2"]):
        sys = make_model("torus-elliptic", drift)
        f, b = _torus_kernels(sys, np.round(np.arange(0.01, 1.0001, 0.01), 10))
        rep = expectation_identity_check(f, b, sys, (0.25, 0.5, 0.75))
        assert rep.passed
        assert rep.estimate <= 0.05

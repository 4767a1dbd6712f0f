import numpy as np
import pytest

import oracles
from hypobridge.bridge import (
    BridgeConfig,
    girsanov_weight,
    load_ensemble,
    required_kernel_times,
    save_ensemble,
    save_paths_csv,
    simulate_bridge,
)
from hypobridge.heatkernel import solve_heat_grid
from hypobridge.models import make_model
from hypobridge.sde import simulate_diffusion
from hypobridge.suites import bridge_kernel
from hypobridge.verify import energy_distance_test

ELL = make_model("torus-elliptic")
# mesh-aligned endpoints (n = 64)
X0, Z0 = (0.3125, 0.1875), (0.6875, 0.59375)


@pytest.fixture(scope="module")
def ell_bridge():
    cfg = BridgeConfig(X0, Z0, dt=1e-3, eps=0.05, n_paths=1000, seed=3)
    k = bridge_kernel(ELL, Z0, cfg)
    return cfg, k, simulate_bridge(cfg, ELL, k)


def test_config_validation():
    with pytest.raises(ValueError):
        BridgeConfig(X0, Z0, dt=0.1, eps=0.05)
    with pytest.raises(ValueError):
        BridgeConfig(X0, Z0, pinning="spline")
    with pytest.raises(ValueError):
        BridgeConfig(X0, Z0, dt=3e-3, eps=0.05)
    with pytest.raises(ValueError):
        BridgeConfig(X0, Z0, clamp_norm=0)
    cfg = BridgeConfig(X0, Z0, dt=1e-2, eps=0.05)
    assert cfg.n_steps == 100 and cfg.free_steps == 95
    s = required_kernel_times(cfg)
    assert s[0] == pytest.approx(0.05) and s[-1] == pytest.approx(1.0)


def test_endpoint_pinned(ell_bridge):
    cfg, _, ens = ell_bridge
    assert np.allclose(ens.states[:, -1], Z0)
    assert ens.states.shape == (1000, cfg.n_steps + 1, 2)


def test_endpoint_consistency(ell_bridge):
    cfg, _, ens = ell_bridge
    y = ens.at(1 - cfg.eps)
    far = ELL.space.distance(y, np.array(Z0)) > 5 * np.sqrt(cfg.eps)
    assert far.mean() < 0.1


def test_clamp_accounting(ell_bridge):
    _, _, ens = ell_bridge
    assert ens.meta["clamped_step_fraction"] < 0.01
    assert ens.failure_fraction < 0.1


def test_midpoint_marginal_matches_product_density(ell_bridge):
    _, _, ens = ell_bridge
    mid = ens.at(0.5)
    # exact law of y_1/2: proportional to q_1/2(x0, x) q_1/2(x, z0), sampled on a fine grid
    g = (np.arange(400) + 0.5) / 400
    X = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    w = oracles.torus_heat(np.array(X0), X, 0.5) * oracles.torus_heat(X, np.array(Z0), 0.5)
    r = np.random.default_rng(11)
    pick = r.choice(len(X), size=500, p=w / w.sum())
    ref = X[pick] + r.uniform(-0.5, 0.5, size=(500, 2)) / 400
    _, p = energy_distance_test(ELL.space.embed(mid[:500]), ELL.space.embed(ref), seed=1)
    assert p > 0.01


def test_drift_terms_recorded_until_pinning(ell_bridge):
    cfg, _, ens = ell_bridge
    assert ens.drift_terms.shape == (1000, cfg.free_steps + 1, 2)
    assert np.all(np.isfinite(ens.drift_terms[ens.ok]))


def test_start_at_target_has_small_initial_drift():
    cfg = BridgeConfig(Z0, Z0, dt=1e-3, eps=0.05, n_paths=200, seed=0)
    k = bridge_kernel(ELL, Z0, cfg)
    ens = simulate_bridge(cfg, ELL, k)
    assert np.max(np.abs(ens.drift_terms[:, 0])) < 1e-6


def test_kernel_source_must_match():
    cfg = BridgeConfig(X0, Z0, dt=1e-2, eps=0.05, n_paths=10)
    k = bridge_kernel(ELL, (0.1, 0.1), cfg)
    with pytest.raises(ValueError):
        simulate_bridge(cfg, ELL, k)


def test_kernel_must_cover_drift_times():
    cfg = BridgeConfig(X0, Z0, dt=1e-2, eps=0.05, n_paths=10)
    k = solve_heat_grid(ELL, Z0, [0.1, 0.5], n=64, argument="first")
    with pytest.raises(ValueError):
        simulate_bridge(cfg, ELL, k)


def test_bridge_deterministic_across_jobs():
    cfg = BridgeConfig(X0, Z0, dt=1e-2, eps=0.05, n_paths=2500, seed=7)
    k = bridge_kernel(ELL, Z0, cfg)
    a = simulate_bridge(cfg, ELL, k, jobs=1)
    b = simulate_bridge(cfg, ELL, k, jobs=2)
    assert np.array_equal(a.states, b.states)


def test_retry_uses_offset_stream():
    # a floor above the kernel maximum makes every drift unavailable
    cfg = BridgeConfig(X0, Z0, dt=1e-2, eps=0.05, n_paths=20, seed=1, rel_floor=2.0)
    k = bridge_kernel(ELL, Z0, cfg)
    ens = simulate_bridge(cfg, ELL, k)
    assert ens.failure_fraction == 1.0
    assert ens.meta["first_attempt_failures"] == 20
    assert np.all(ens.streams == cfg.stream + 1000)


def test_ccdist_pinning_reaches_target():
    heis = make_model("heisenberg")
    z0 = (0.2, -0.1, 0.05)
    cfg = BridgeConfig((0, 0, 0), z0, dt=1e-2, eps=0.05, n_paths=20, seed=0, pinning="ccdist")
    k = bridge_kernel(heis, z0, cfg, n_paths=5000, bins=24, dt=1e-2)
    ens = simulate_bridge(cfg, heis, k)
    assert np.allclose(ens.states[:, -1], z0)
    steps = np.linalg.norm(np.diff(ens.states[:, cfg.free_steps :], axis=1), axis=-1)
    assert np.all(np.isfinite(steps))


def test_girsanov_weight_at_zero_is_one():
    k = solve_heat_grid(ELL, Z0, np.round(np.arange(0.1, 1.0001, 0.1), 10), n=64, argument="first")
    ens = simulate_diffusion(ELL, X0, 0.5, 1e-2, 0, n_paths=50)
    w, fl = girsanov_weight(ens, k, 0.0)
    assert np.all(w == 1.0) and not fl.any()
    w1, _ = girsanov_weight(ens.path(3), k, 0.5)
    want = oracles.torus_heat(ens.states[3, -1], np.array(Z0), 0.5) / oracles.torus_heat(np.array(X0), np.array(Z0), 1.0)
    assert w1 == pytest.approx(want, rel=1e-2)


def test_csv_and_ensemble_round_trip(tmp_path, ell_bridge):
    _, _, ens = ell_bridge
    p = tmp_path / "paths.csv"
    save_paths_csv(p, ens, every=100)
    raw = p.read_bytes()
    assert b"\r\n" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == "path_id,step,t,x,y,clamped"
    assert len(lines) == 1 + 1000 * 11
    save_ensemble(tmp_path / "e.npz", ens, {"model": "torus-elliptic"})
    e2 = load_ensemble(tmp_path / "e.npz")
    assert np.array_equal(e2.states, ens.states) and np.array_equal(e2.failed, ens.failed)
    assert e2.meta["eps"] == ens.meta["eps"]

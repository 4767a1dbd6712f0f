"""Experiment builders and the verification suites run by the command line.

Each suite is a list of named checks; every check returns one or more
:class:`verify.VerificationReport`.  All randomness is keyed by the master
seed, so a suite's numeric output depends only on its configuration.
"""

from __future__ import annotations

import numpy as np

from .bridge import BridgeConfig, required_kernel_times, simulate_bridge
from .ccdist import ball_volume, cc_distance_batch, distance_compare_fit
from .heatkernel import mc_kde_kernel, on_diagonal_exponent, solve_heat_grid
from .heatkernel.bounds import check_gaussian_bounds
from .models import adjoint_system, make_model, sample_points
from .sde import simulate_diffusion
from .verify import (
    VerificationReport,
    caoyau_check,
    expectation_identity_check,
    gradient_log_bound_check,
    kolmogorov_fit,
    semimartingale_integral,
    time_reversal_check,
    weighted_law_check,
)

TORUS_X0 = (0.3, 0.2)
TORUS_Z0 = (0.7, 0.6)
HEIS_Z0 = (0.4, -0.3, 0.2)


def bridge_kernel(sys, z0, cfg_or_times, seed=0, n=64, n_paths=20000, bins=48, dt=None, jobs=1):
    """Kernel of q_s(., z0) covering the drift times of a bridge config.

    Torus models use the grid solver; other models a binned, debiased KDE of
    the adjoint diffusion saved on a log-spaced set of times.
    """
    if isinstance(cfg_or_times, BridgeConfig):
        cfg = cfg_or_times
        times = required_kernel_times(cfg)
        dt = cfg.dt if dt is None else dt
    else:
        times = np.asarray(cfg_or_times, float)
    if sys.space.periodic:
        return solve_heat_grid(sys, z0, times, n=n, argument="first")
    dt = 1e-3 if dt is None else dt
    lo, hi = times[0], times[-1]
    ts = np.unique(np.round(np.geomspace(lo, hi, 40) / dt) * dt)
    ts = np.unique(np.concatenate([[lo, hi], ts[(ts > lo) & (ts < hi)]]))
    return mc_kde_kernel(sys, z0, ts, n_paths=n_paths, seed=seed, dt=dt, argument="first", debias=True, bins=bins, jobs=jobs)


def run_bridge(model, x0, z0, n_paths=1000, dt=1e-3, eps=0.025, seed=0, n=64, kernel=None, drift=None, jobs=1, **kw):
    """Build the system, its kernel and a bridge ensemble."""
    sys = make_model(model, drift) if isinstance(model, str) else model
    cfg = BridgeConfig(x0, z0, dt=dt, eps=eps, n_paths=n_paths, seed=seed, **kw)
    if kernel is None:
        kernel = bridge_kernel(sys, z0, cfg, seed=seed + 1, n=n, jobs=jobs)
    return sys, kernel, simulate_bridge(cfg, sys, kernel, jobs=jobs)


def _report_from(name, value, checks, **extra):
    rep = VerificationReport(statistic=name, estimate=float(value), **extra)
    for c in checks:
        rep.check(*c)
    return rep


# --------------------------------------------------------------------------
# checks


def check_levels(model, n_points=1000, seed=0):
    from .models import hormander_level

    sys = make_model(model)
    pts = sample_points(sys.space, n_points, seed)
    lv = np.atleast_1d(hormander_level(sys, pts, max_level=3))
    rep = _report_from(
        f"hormander_levels[{model}]",
        float(lv.max()),
        [("not_spanned", int(np.sum(lv == 0)), "==", 0), ("max_level", int(lv.max()), "<=", 2)],
    )
    rep.details["counts"] = {str(k): int(np.sum(lv == k)) for k in np.unique(lv)}
    return [rep]


def check_grid_mass(model, seed=0):
    sys = make_model(model)
    k = solve_heat_grid(sys, TORUS_X0, np.round(np.arange(0.02, 0.3001, 0.02), 10), n=64)
    dev = float(np.max(np.abs(k.mass - 1)))
    return [_report_from(f"grid_mass[{model}]", dev, [("max_mass_deviation", dev, "<=", 1e-3)])]


def check_exponent(model, seed=0, n_paths=20000):
    sys = make_model(model)
    if model == "torus-elliptic":
        k = solve_heat_grid(sys, (0.0, 0.0), np.geomspace(0.01, 0.05, 6), n=128)
        fit, band = on_diagonal_exponent(k, (0.0, 0.0), (0.01, 0.05)), (1.8, 2.2)
    elif model == "torus-grushin":
        k = solve_heat_grid(sys, (0.0, 0.0), np.geomspace(0.01, 0.04, 6), n=(128, 256))
        fit, band = on_diagonal_exponent(k, (0.0, 0.0), (0.01, 0.04)), None
    else:
        ts = np.round(np.arange(1, 7) * 0.05, 10)
        k = mc_kde_kernel(sys, np.zeros(3), ts, n_paths=n_paths, seed=seed, dt=2.5e-3)
        fit, band = on_diagonal_exponent(k, np.zeros(3), (0.05, 0.3)), (3.6, 4.4)
    rep = VerificationReport(statistic=f"on_diagonal_exponent[{model}]", estimate=fit["Q"], se=fit["se"], ci=fit["ci"])
    if band is not None:
        rep.check("Q_low", fit["Q"], ">=", band[0])
        rep.check("Q_high", fit["Q"], "<=", band[1])
    else:
        rep.check("Q_minus_2se", fit["Q"] - 2 * fit["se"], ">", 2.2)
    return [rep]


def check_kolmogorov_unconditioned(seed=0, n_paths=2000, jobs=1):
    sys = make_model("torus-elliptic")
    ens = simulate_diffusion(sys, TORUS_X0, 0.2, 1e-3, seed, n_paths=n_paths, jobs=jobs)
    rep = kolmogorov_fit(ens, 4.0, space=sys.space, target=(1.0, 0.15))
    rep.statistic += "[unconditioned:torus-elliptic]"
    return [rep]


def check_bridge_family(model, seed=0, n_paths=1000, eps=0.025, jobs=1, x0=None, z0=None, oracle=None):
    """Semimartingale integral sweep, Kolmogorov fit on the interior, clamp accounting."""
    x0 = x0 or (TORUS_X0 if model.startswith("torus") else (0.0, 0.0, 0.0))
    z0 = z0 or (TORUS_Z0 if model.startswith("torus") else HEIS_Z0)
    sys, k, ens = run_bridge(model, x0, z0, n_paths=n_paths, eps=eps, seed=seed, jobs=jobs)
    reps = [semimartingale_integral(ens, i + 1) for i in range(sys.diffusion_count)]
    reps.append(kolmogorov_fit(ens, 4.0, t_range=(0.1, 0.75), space=sys.space))
    for r in reps:
        if "[" not in r.statistic or r.statistic.startswith("semimartingale"):
            r.statistic += f"[bridge:{model}]"
    fail = ens.failure_fraction
    reps.append(
        _report_from(
            f"bridge_accounting[{model}]",
            fail,
            [("failure_fraction", fail, "<=", 0.1)],
            details={"clamped_step_fraction": ens.meta["clamped_step_fraction"]},
        )
    )
    return reps


def check_weighted_law_torus(seed=0, n_uncond=10000, n_bridge=2000, jobs=1):
    """Martingale, weighted law and time reversal on the torus."""
    reps = []
    sys = make_model("torus-elliptic")
    ts = np.round(np.arange(0.02, 1.0001, 0.01), 10)
    kz = solve_heat_grid(sys, TORUS_Z0, ts, n=64, argument="first")
    unc = simulate_diffusion(sys, TORUS_X0, 0.5, 1e-3, seed, n_paths=n_uncond, jobs=jobs)
    _, _, br = run_bridge(sys, TORUS_X0, TORUS_Z0, n_paths=n_bridge, eps=0.05, seed=seed + 1, jobs=jobs)
    reps.append(weighted_law_check(unc, br, kz, CYLINDER_FUNCTIONALS, 0.5))
    _, _, rev = run_bridge(sys, TORUS_Z0, TORUS_X0, n_paths=n_bridge, eps=0.05, seed=seed + 2, jobs=jobs)
    kx1 = solve_heat_grid(sys, TORUS_X0, ts, n=64, argument="second")
    kx2 = solve_heat_grid(sys, TORUS_X0, ts, n=64, argument="first")
    reps.append(time_reversal_check(sys.space, br, rev, (0.25, 0.5, 0.75), (kx1, kx2), seed=seed))
    reps[-1].statistic = "time_reversal[symmetric]"
    drifted = make_model("torus-elliptic", ["0.5", "0.2"])
    adj = adjoint_system(drifted, 1)
    _, _, fwd = run_bridge(drifted, TORUS_X0, TORUS_Z0, n_paths=n_bridge, eps=0.05, seed=seed + 3, jobs=jobs)
    _, _, bwd = run_bridge(adj, TORUS_Z0, TORUS_X0, n_paths=n_bridge, eps=0.05, seed=seed + 4, jobs=jobs)
    q = solve_heat_grid(drifted, TORUS_X0, ts, n=64, argument="second")
    qh = solve_heat_grid(adj, TORUS_X0, ts, n=64, argument="first")
    reps.append(time_reversal_check(drifted.space, fwd, bwd, (0.25, 0.5, 0.75), (q, qh), seed=seed))
    reps[-1].statistic = "time_reversal[constant_drift]"
    return reps


def _idx(times, t):
    return int(np.argmin(np.abs(times - t)))


CYLINDER_FUNCTIONALS = {
    "x_at_half": lambda s, t: s[:, _idx(t, 0.5), 0],
    "box_at_quarter": lambda s, t: (
        (s[:, _idx(t, 0.25), 0] > 0.25) & (s[:, _idx(t, 0.25), 0] < 0.75) & (s[:, _idx(t, 0.25), 1] < 0.5)
    ).astype(float),
    "cos_product": lambda s, t: np.cos(2 * np.pi * s[:, _idx(t, 0.25), 0]) * np.cos(2 * np.pi * s[:, _idx(t, 0.5), 1]),
}


def check_inequalities(model, seed=0):
    sys = make_model(model)
    ts = np.round(np.arange(0.04, 0.3101, 0.01), 10)
    k = solve_heat_grid(sys, TORUS_X0, ts, n=64)
    kb = solve_heat_grid(sys, TORUS_Z0, ts, n=64, argument="first")
    reps = [caoyau_check(k, sys), gradient_log_bound_check(kb, sys.space)]
    for r in reps:
        r.statistic += f"[{model}]"
    return reps


def check_expectation_identities(seed=0):
    reps = []
    for drift in (None, ["0.5", "0.2"]):
        sys = make_model("torus-elliptic", drift)
        ts = np.round(np.arange(0.01, 1.0001, 0.01), 10)
        f = solve_heat_grid(sys, TORUS_X0, ts, n=64)
        b = solve_heat_grid(sys, TORUS_Z0, ts, n=64, argument="first")
        r = expectation_identity_check(f, b, sys, (0.25, 0.5, 0.75))
        r.statistic += "[zero_drift]" if drift is None else "[constant_drift]"
        reps.append(r)
    return reps


def check_ccdist(seed=0):
    sys = make_model("heisenberg")
    zs = np.array([0.05, 0.1, 0.2, 0.4])
    X = np.zeros((5, 3))
    Y = np.vstack([[0.3, 0, 0], np.c_[0 * zs, 0 * zs, zs]])
    d, res, _, _ = cc_distance_batch(sys, X, Y, seed=seed)
    slope = float(np.polyfit(np.log(zs), np.log(d[1:]), 1)[0])
    line = abs(d[0] - 0.3) / 0.3
    fit = distance_compare_fit(sys, np.stack([X[1:], Y[1:]], axis=1), d_values=d[1:])
    rep = _report_from(
        "ccdist[heisenberg]",
        slope,
        [
            ("straight_line_rel_error", float(line), "<=", 0.01),
            ("z_axis_exponent_error", abs(slope - 0.5), "<=", 0.05),
            ("upper_violations", fit["upper_violations"], "==", 0),
        ],
        constants={"c": fit["c"]},
        details={"d": d.tolist(), "residual": res.tolist()},
    )
    return [rep]


def check_gaussian_bounds_heisenberg(seed=0, n_paths=20000):
    sys = make_model("heisenberg")
    ts = np.round(np.arange(1, 7) * 0.05, 10)
    k = mc_kde_kernel(sys, np.zeros(3), ts, n_paths=n_paths, seed=seed, dt=2.5e-3, debias=True, bandwidth=0.5)
    pts = sample_points(sys.space, 60, seed, scale=0.4)
    d, _, _, _ = cc_distance_batch(sys, np.zeros((len(pts), 3)), pts, n_segments=16, restarts=4, seed=seed)
    pts, d = pts[d <= 2], d[d <= 2]
    vols = {}

    def vol(r):
        key = round(float(r), 12)
        if key not in vols:
            vols[key] = ball_volume(sys, np.zeros(3), r, n_mc=300, seed=seed)[0]
        return vols[key]

    dist = {tuple(p): v for p, v in zip(pts, d)}
    rep = check_gaussian_bounds(k, lambda x, ys: np.array([dist[tuple(y)] for y in ys]), vol, points=pts)
    out = VerificationReport(statistic="gaussian_bounds[heisenberg]", estimate=rep.constants["C2"], constants=rep.constants)
    out.check("lower_violation_fraction", rep.violation_fraction["lower"], "==", 0.0)
    out.check("upper_violation_fraction", rep.violation_fraction["upper"], "==", 0.0)
    out.check("C1_le_C2", rep.constants["C1"], "<=", rep.constants["C2"])
    return [out]


SUITES = {
    "baseline": [
        ("levels_heisenberg", lambda c: check_levels("heisenberg", seed=c["seed"])),
        ("levels_grushin", lambda c: check_levels("torus-grushin", seed=c["seed"])),
        ("grid_mass", lambda c: check_grid_mass("torus-elliptic")),
        ("exponent_elliptic", lambda c: check_exponent("torus-elliptic")),
        ("kolmogorov", lambda c: check_kolmogorov_unconditioned(c["seed"], c.get("paths", 2000), c["jobs"])),
        ("inequalities_elliptic", lambda c: check_inequalities("torus-elliptic")),
        ("expectation_identities", lambda c: check_expectation_identities()),
        (
            "bridge_elliptic",
            lambda c: check_bridge_family("torus-elliptic", c["seed"], c.get("bridge_paths", 500), jobs=c["jobs"]),
        ),
    ],
    "grushin": [
        ("exponent_grushin", lambda c: check_exponent("torus-grushin")),
        ("inequalities_grushin", lambda c: check_inequalities("torus-grushin")),
        (
            "bridge_grushin",
            lambda c: check_bridge_family("torus-grushin", c["seed"], c.get("bridge_paths", 1000), jobs=c["jobs"]),
        ),
    ],
    "heisenberg": [
        ("exponent_heisenberg", lambda c: check_exponent("heisenberg", c["seed"])),
        ("ccdist", lambda c: check_ccdist(c["seed"])),
        ("gaussian_bounds", lambda c: check_gaussian_bounds_heisenberg(c["seed"])),
        (
            "bridge_heisenberg",
            lambda c: check_bridge_family("heisenberg", c["seed"], c.get("bridge_paths", 1000), jobs=c["jobs"]),
        ),
    ],
}
SUITES["full"] = SUITES["baseline"] + SUITES["grushin"] + SUITES["heisenberg"] + [
    ("weighted_law_torus", lambda c: check_weighted_law_torus(c["seed"], jobs=c["jobs"])),
]


def run_suite(name, config):
    """Run a named suite; returns a list of reports."""
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}")
    reports = []
    for check_name, fn in SUITES[name]:
        for r in fn(config):
            r.details.setdefault("check", check_name)
            reports.append(r)
    return reports

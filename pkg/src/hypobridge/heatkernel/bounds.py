"""On-diagonal decay exponents and Gaussian two-sided bound fits."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .estimate import kernel_value


def on_diagonal_exponent(k, x, t_window, exact=True):
    """Fit q_t(x, x) ~ c t^(-Q/2) over the stored times in ``t_window``.

    The kernel source must be x.  Returns a dict with ``Q`` (= -2 * slope),
    its standard error ``se`` and 95% interval ``ci``; for Monte Carlo
    kernels the regression is weighted by the per-point standard errors.
    """
    lo, hi = t_window
    ts = k.times[(k.times >= lo * (1 - 1e-12)) & (k.times <= hi * (1 + 1e-12))]
    if len(ts) < 5:
        raise ValueError("need at least 5 stored times in the window")
    x = np.asarray(x, dtype=float)
    vals, ses = [], []
    for t in ts:
        v, s = kernel_value(k, t, x, x, exact=exact)
        vals.append(v)
        ses.append(s)
    vals, ses = np.array(vals), np.array(ses)
    if np.any(vals <= 0):
        raise ValueError("nonpositive kernel value in the window")
    lt, lq = np.log(ts), np.log(vals)
    rel = ses / vals
    w = 1.0 / np.maximum(rel, 1e-12) ** 2 if np.any(rel > 0) else np.ones_like(lt)
    W = np.sum(w)
    mt, mq = np.sum(w * lt) / W, np.sum(w * lq) / W
    sxx = np.sum(w * (lt - mt) ** 2)
    slope = np.sum(w * (lt - mt) * (lq - mq)) / sxx
    resid = lq - mq - slope * (lt - mt)
    dof = len(ts) - 2
    if np.any(rel > 0):
        # propagated sampling error, inflated when the fit is worse than it
        chi2 = np.sum(w * resid**2) / dof
        var = max(1.0, chi2) / sxx
    else:
        var = np.sum(resid**2) / dof / np.sum((lt - lt.mean()) ** 2)
    se = 2 * np.sqrt(var)
    Q = -2 * slope
    return {"Q": float(Q), "se": float(se), "ci": (float(Q - 1.96 * se), float(Q + 1.96 * se)), "times": ts.tolist()}


@dataclass
class BoundFitReport:
    """Fitted constants of the two-sided Gaussian bound

    C1 / V(sqrt t) exp(-C3 d^2 / t) <= q_t(x, y) <= C2 / V(sqrt t) exp(-C4 d^2 / t).
    """

    constants: dict
    residual_quantiles: dict
    violation_fraction: dict
    time_range: tuple
    n_points: int
    extra: dict = field(default_factory=dict)

    @property
    def passed(self):
        c = self.constants
        return (
            all(np.isfinite(v) for v in c.values())
            and c["C1"] <= c["C2"]
            and self.violation_fraction["lower"] == 0
            and self.violation_fraction["upper"] == 0
        )

    def to_dict(self):
        return {
            "constants": self.constants,
            "residual_quantiles": self.residual_quantiles,
            "violation_fraction": self.violation_fraction,
            "time_range": list(self.time_range),
            "n_points": self.n_points,
            "passed": bool(self.passed),
            **self.extra,
        }


def check_gaussian_bounds(k, d, ball_volume, t_window=None, points=None, max_points=400, rel_tol=1e-9):
    """Fit the constants of the two-sided Gaussian bound over an evaluation set.

    Parameters
    ----------
    k : KernelEstimate with source x
    d : callable d(x, ys) -> distances, shape (n,)
    ball_volume : callable r -> volume of the d-ball of radius r about x
    points : evaluation points; defaults to a deterministic subsample of the
        kernel mesh
    """
    times = k.times
    if t_window is not None:
        times = times[(times >= t_window[0] * (1 - 1e-12)) & (times <= t_window[1] * (1 + 1e-12))]
    x = k.source
    if points is None:
        if not k.has_grid:
            raise ValueError("points are required for kernels without a mesh")
        nodes = k.nodes(0).reshape(-1, k.dim)
        stride = max(1, len(nodes) // max_points)
        points = nodes[::stride]
    points = np.asarray(points, dtype=float)
    dist = np.asarray(d(x, points), dtype=float)
    logs, d2t = [], []
    for t in times:
        q, _ = kernel_value(k, t, x, points) if k.argument == "second" or k.symmetric else kernel_value(k, t, points, x)
        V = float(ball_volume(np.sqrt(t)))
        with np.errstate(divide="ignore"):
            logs.append(np.log(np.maximum(q, 0) * V))
        d2t.append(dist**2 / t)
    logs, d2t = np.concatenate(logs), np.concatenate(d2t)
    ok = np.isfinite(logs)
    A = np.stack([np.ones(ok.sum()), -d2t[ok]], axis=1)
    (c0, kappa), *_ = np.linalg.lstsq(A, logs[ok], rcond=None)
    kappa = max(float(kappa), 1e-6)
    C4, C3 = kappa / 2, 2 * kappa
    upper = logs[ok] + C4 * d2t[ok]
    lower = logs[ok] + C3 * d2t[ok]
    C2 = float(np.exp(upper.max()))
    C1 = float(np.exp(lower.min())) if ok.all() else 0.0
    resid = logs[ok] - (c0 - kappa * d2t[ok])
    q_over = np.exp(logs)
    lhs_lo = C1 * np.exp(-C3 * d2t)
    lhs_up = C2 * np.exp(-C4 * d2t)
    viol_lo = float(np.mean(q_over < lhs_lo * (1 - rel_tol)))
    viol_up = float(np.mean(q_over > lhs_up * (1 + rel_tol)))
    return BoundFitReport(
        constants={"C1": C1, "C2": C2, "C3": C3, "C4": C4},
        residual_quantiles={str(p): float(np.quantile(resid, p)) for p in (0.05, 0.5, 0.95)},
        violation_fraction={"lower": viol_lo, "upper": viol_up},
        time_range=(float(times[0]), float(times[-1])),
        n_points=int(len(logs)),
        extra={"kappa": kappa, "zero_values": int((~ok).sum())},
    )

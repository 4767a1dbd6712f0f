"""Upper bounds on the intrinsic (control) distance by direct optimal control.

A curve is steered by piecewise-constant controls u_k on n equal pieces of
[0, 1]:  gamma' = sum_i u_{k,i} X_i(gamma).  Minimising the energy
sum_k |u_k|^2 / n subject to gamma(1) = y gives a constant-speed curve whose
length sum_k |u_k| / n bounds d(x, y) from above.  The endpoint condition is
imposed by a quadratic penalty with increasing weight, each stage solved by
a batched Levenberg-Marquardt iteration, followed by minimum-norm Newton
corrections of the endpoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng

CONTINUATION = (10.0, 1e2, 1e3, 1e4)
ENDPOINT_TOL = 1e-3
CCDIST_STREAM = 31
INIT_SPREAD = 3.0


@dataclass(frozen=True, eq=False)
class ControlPath:
    """Unit-ball controls with per-segment durations steering start towards end."""

    start: np.ndarray
    target: np.ndarray
    controls: np.ndarray
    durations: np.ndarray
    residual: float
    unreachable: bool = False

    @property
    def n_segments(self):
        return len(self.durations)

    @property
    def length(self):
        return float(np.sum(self.durations))

    def curve(self, sys, substeps=4):
        """Points of the induced curve at segment boundaries."""
        pts = [np.asarray(self.start, float)]
        x = pts[0][None]
        for a, tau in zip(self.controls, self.durations):
            x = _flow(sys, x, a[None], tau, substeps)
            pts.append(x[0])
        return np.array(pts)


def _rhs(sys, x, u):
    return np.einsum("...dm,...m->...d", sys.sigma(x), u)


def _flow(sys, x, u, tau, substeps):
    h = tau / substeps
    for _ in range(substeps):
        k1 = _rhs(sys, x, u)
        k2 = _rhs(sys, x + 0.5 * h * k1, u)
        k3 = _rhs(sys, x + 0.5 * h * k2, u)
        k4 = _rhs(sys, x + h * k3, u)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def endpoint(sys, x0, U, substeps=2):
    """Endpoints of controls U (..., n, m) started from x0 (..., d)."""
    n = U.shape[-2]
    x = np.array(np.broadcast_to(x0, U.shape[:-2] + (sys.dim,)), dtype=float)
    for k in range(n):
        x = _flow(sys, x, U[..., k, :], 1.0 / n, substeps)
    return x


def trajectory(sys, x0, U, substeps=2):
    """States at the n + 1 segment boundaries, shape (..., n + 1, d)."""
    n = U.shape[-2]
    x = np.array(np.broadcast_to(x0, U.shape[:-2] + (sys.dim,)), dtype=float)
    out = [x]
    for k in range(n):
        x = _flow(sys, x, U[..., k, :], 1.0 / n, substeps)
        out.append(x)
    return np.stack(out, axis=-2)


def _endpoint_error(sys, x0, y, U, substeps):
    return sys.space.displacement(y, endpoint(sys, x0, U, substeps))


def _error_and_jacobian(sys, x0, y, p, n, m, substeps):
    """Endpoint error D(p) (B, d) and forward-difference Jacobian (B, d, P)."""
    B, P = p.shape
    h = 1e-6 * (1.0 + np.abs(p))
    pert = np.repeat(p[:, None, :], P + 1, axis=1)
    pert[:, 1:, :] += np.eye(P)[None] * h[:, None, :]
    D = _endpoint_error(sys, x0[:, None], y[:, None], pert.reshape(B, P + 1, n, m), substeps)
    J = (D[:, 1:] - D[:, :1]) / h[:, :, None]
    return D[:, 0], np.swapaxes(J, 1, 2)


def _lm_stage(sys, x0, y, p, lam, n, m, substeps, iters):
    B, P = p.shape
    w = 1.0 / n
    mu = np.full(B, 1e-3)

    def cost(pp, D):
        return w * np.sum(pp**2, axis=1) + lam * np.sum(D**2, axis=1)

    lam = np.broadcast_to(np.asarray(lam, float), (B,))

    D, J = _error_and_jacobian(sys, x0, y, p, n, m, substeps)
    c = cost(p, D)
    for _ in range(iters):
        H = w * np.eye(P)[None] + lam[:, None, None] * np.einsum("bdi,bdj->bij", J, J)
        g = w * p + lam[:, None] * np.einsum("bdi,bd->bi", J, D)
        A = H + mu[:, None, None] * (np.eye(P)[None] * np.maximum(np.diagonal(H, axis1=1, axis2=2), 1e-12)[:, :, None])
        step = -np.linalg.solve(A, g[..., None])[..., 0]
        trial = p + step
        Dt = _endpoint_error(sys, x0, y, trial.reshape(B, n, m), substeps)
        ct = cost(trial, Dt)
        better = ct < c
        p = np.where(better[:, None], trial, p)
        c = np.where(better, ct, c)
        mu = np.where(better, np.maximum(mu / 3, 1e-9), np.minimum(mu * 4, 1e9))
        if not np.any(np.abs(step) > 1e-10):
            break
        if np.any(better):
            Dn, Jn = _error_and_jacobian(sys, x0[better], y[better], p[better], n, m, substeps)
            D[better], J[better] = Dn, Jn
    return p


def _newton_polish(sys, x0, y, p, n, m, substeps, iters=6):
    """Minimum-norm Newton corrections driving the endpoint error to zero."""
    for _ in range(iters):
        D, J = _error_and_jacobian(sys, x0, y, p, n, m, substeps)
        JJt = np.einsum("bdi,bei->bde", J, J) + 1e-14 * np.eye(sys.dim)[None]
        step = -np.einsum("bdi,bd->bi", J, np.linalg.solve(JJt, D[..., None])[..., 0])
        trial = p + step
        Dt = _endpoint_error(sys, x0, y, trial.reshape(-1, n, m), substeps)
        better = np.linalg.norm(Dt, axis=1) < np.linalg.norm(D, axis=1)
        p = np.where(better[:, None], trial, p)
    return p


def _length_scale(sys, X, Y):
    """Chart size |y - x| and a rough control size max(|y - x|, |y - x|^(1/2))."""
    r = np.linalg.norm(sys.space.displacement(X, Y), axis=-1)
    return r, np.maximum(r, np.sqrt(r))


def _initial_controls(sys, X, Y, n, restarts, seed, stream):
    """Restart 0: chart-linear least-squares control; others random."""
    N, m = len(X), sys.diffusion_count
    disp = sys.space.displacement(X, Y)
    S = sys.sigma(X)
    u0 = np.einsum("nmd,nd->nm", np.linalg.pinv(S), disp)
    inits = [np.repeat(u0[:, None, :], n, axis=1)]
    # bracket directions need controls several times the square-root size
    scale = INIT_SPREAD * _length_scale(sys, X, Y)[1]
    for r in range(1, restarts):
        g = rng.generator(seed, stream, r)
        inits.append(g.normal(size=(N, n, m)) * scale[:, None, None])
    return np.stack(inits, axis=1)


def cc_distance_batch(
    sys,
    X,
    Y,
    n_segments=32,
    restarts=8,
    seed=0,
    continuation=CONTINUATION,
    iters=30,
    substeps=2,
    tol=ENDPOINT_TOL,
    stream=CCDIST_STREAM,
):
    """Upper bounds on d(X_j, Y_j) for batches of pairs.

    Returns ``(d_upper, residual, controls, restart)``: the best feasible
    length per pair (inf when no restart met the endpoint tolerance), its
    endpoint residual, raw per-segment controls (N, n, m) over unit time and
    the winning restart index.  Ties are broken by the lowest restart index.
    """
    if n_segments < 4:
        raise ValueError("n_segments must be >= 4")
    X = np.atleast_2d(np.asarray(X, float))
    Y = np.atleast_2d(np.asarray(Y, float))
    X, Y = np.broadcast_arrays(X, Y)
    N, m, n = len(X), sys.diffusion_count, n_segments
    same = sys.space.distance(X, Y) == 0
    U = _initial_controls(sys, X, Y, n, restarts, seed, stream)
    Xr = np.repeat(X, restarts, axis=0)
    Yr = np.repeat(Y, restarts, axis=0)
    p = U.reshape(N * restarts, n * m)
    # penalty relative to the target scale, so short hops are not absorbed by the energy term
    r, ell = _length_scale(sys, Xr, Yr)
    rel = (ell / np.maximum(r, 1e-12)) ** 2
    for lam in continuation:
        p = _lm_stage(sys, Xr, Yr, p, lam * rel, n, m, substeps, iters)
    p = _newton_polish(sys, Xr, Yr, p, n, m, substeps)
    ctrl = p.reshape(N, restarts, n, m)
    res = np.linalg.norm(_endpoint_error(sys, Xr, Yr, ctrl.reshape(-1, n, m), substeps), axis=-1).reshape(N, restarts)
    length = np.linalg.norm(ctrl, axis=-1).sum(axis=-1) / n
    score = np.where(res <= tol, length, np.inf)
    best = np.argmin(score, axis=1)
    idx = np.arange(N)
    d = score[idx, best]
    # report the closest attempt when nothing was feasible
    fallback = np.argmin(res, axis=1)
    pick = np.where(np.isfinite(d), best, fallback)
    d = np.where(same, 0.0, d)
    resid = np.where(same, 0.0, res[idx, pick])
    return d, resid, ctrl[idx, pick], pick


def _as_path(x, y, u, resid, unreachable):
    n = len(u)
    speed = np.linalg.norm(u, axis=-1)
    safe = np.where(speed > 0, speed, 1.0)
    return ControlPath(
        start=np.asarray(x, float),
        target=np.asarray(y, float),
        controls=u / safe[:, None],
        durations=speed / n,
        residual=float(resid),
        unreachable=bool(unreachable),
    )


def cc_distance(sys, x, y, n_segments=32, restarts=8, seed=0, **kw):
    """Upper bound on d(x, y) and the control path achieving it.

    d(x, x) is 0 with an empty path.  When no restart reaches the endpoint
    tolerance the value is inf and the path is flagged ``unreachable``.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if sys.space.distance(x, y) == 0:
        empty = np.zeros((0, sys.diffusion_count))
        return 0.0, ControlPath(x, y, empty, np.zeros(0), 0.0)
    d, res, u, _ = cc_distance_batch(sys, x[None], y[None], n_segments, restarts, seed, **kw)
    value = float(d[0])
    return value, _as_path(x, y, u[0], res[0], not np.isfinite(value))


def distance_compare_fit(sys, pairs, levels=None, d_values=None, **kw):
    """Fit the smallest c with rho / c <= d <= c rho^(1/l(x)) over point pairs.

    ``levels`` defaults to :func:`models.hormander_level` at the first point
    of each pair.  The upper inequality is tested with the computed upper
    bounds, so its violations are genuine; violations of the lower one can
    only come from optimiser gaps and are reported separately.
    """
    from .models import hormander_level

    pairs = np.asarray(pairs, float)
    X, Y = pairs[:, 0], pairs[:, 1]
    rho = sys.space.distance(X, Y)
    if levels is None:
        levels = np.atleast_1d(hormander_level(sys, X))
    levels = np.asarray(levels)
    if d_values is None:
        d_values, _, _, _ = cc_distance_batch(sys, X, Y, **kw)
    d = np.asarray(d_values, float)
    nz = rho > 0
    finite = np.isfinite(d)
    use = nz & finite & (levels > 0)
    c_up = np.max(d[use] / rho[use] ** (1.0 / levels[use])) if use.any() else 1.0
    c_lo = np.max(rho[use] / d[use]) if use.any() else 1.0
    c = float(max(c_up, c_lo, 1.0))
    upper_viol = int(np.sum(d[use] > c * rho[use] ** (1.0 / levels[use]) * (1 + 1e-12)))
    lower_viol = int(np.sum(rho[use] / c > d[use] * (1 + 1e-12)))
    return {
        "c": c,
        "c_upper": float(c_up),
        "c_lower": float(c_lo),
        "upper_violations": upper_viol,
        "lower_violations_optimizer_gap": lower_viol,
        "unreachable": int(np.sum(~finite)),
        "n_pairs": int(len(pairs)),
        "ratio_d_over_rho": (d[use] / rho[use]).tolist(),
    }


def _ball_box(sys, x, r):
    """Sampling box for {y : d(x, y) <= r}: sampler and its volume."""
    kind = sys.space.kind
    name = sys.options.get("model", sys.name)
    if kind == "Torus2":
        # |X_i| <= 1 and orthogonal, so d >= rho and the ball sits in the rho-box
        def sample(u):
            return sys.space.wrap(x + (2 * u - 1) * r)

        return sample, (2 * r) ** 2
    if name == "heisenberg":
        # z - x0 dy stays within r^2 / 2 of the left-translated centre
        def sample(u):
            dx = (2 * u[:, 0] - 1) * r
            dy = (2 * u[:, 1] - 1) * r
            w = (2 * u[:, 2] - 1) * r**2 / 2
            return np.stack([x[0] + dx, x[1] + dy, x[2] + x[0] * dy + w], axis=1)

        return sample, (2 * r) ** 2 * r**2
    raise ValueError(f"no ball bounding box for model {name!r}")


def ball_volume(sys, x, r, n_mc=400, seed=0, n_segments=8, restarts=3, iters=15):
    """Monte Carlo volume of {y : d(x, y) <= r} using coarse distance bounds.

    Returns ``(volume, stderr)``.  Distances are upper bounds, so a point
    counts as inside only when a steering of length <= r was found.
    """
    if r <= 0:
        raise ValueError("r must be positive")
    x = np.asarray(x, float)
    sample, box = _ball_box(sys, x, r)
    u = rng.uniforms(seed, 41, np.arange(n_mc), sys.dim)
    Y = sample(u)
    d, _, _, _ = cc_distance_batch(sys, x[None], Y, n_segments, restarts, seed, iters=iters)
    inside = d <= r
    p = inside.mean()
    return float(box * p), float(box * np.sqrt(p * (1 - p) / n_mc))


def pinning_paths(sys, y_start, z0, k, n_segments=8, restarts=2):
    """Curves from each y_start to z0 at k + 1 equal times (coarse optimal steering)."""
    y_start = np.asarray(y_start, float)
    Z = np.broadcast_to(np.asarray(z0, float), y_start.shape)
    _, _, U, _ = cc_distance_batch(sys, y_start, Z, n_segments, restarts, iters=15)
    # refine each segment into equal sub-steps matching the output grid
    fine = np.repeat(U, int(np.ceil(k / n_segments)), axis=1)
    traj = trajectory(sys, y_start, fine)
    s_idx = np.rint(np.linspace(0, fine.shape[1], k + 1)).astype(int)
    out = traj[:, s_idx]
    out[:, -1] = Z
    if sys.space.periodic:
        out = sys.space.wrap(out)
    return out

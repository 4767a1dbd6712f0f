"""Explicit finite-difference solver for the heat equation du/dt = L u on the torus.

The generator is written in conservative form

    L u = 1/2 div(A grad u) + b . grad u,   A = sum_k X_k X_k^T,
    b = X0 - 1/2 sum_k (div X_k) X_k,

and discretised on a periodic node mesh as a sparse matrix G with zero row
sums.  ``G`` evolves functions of the first argument (backward equation),
``G^T`` evolves densities of the second argument (forward equation), so the
two discrete kernels are exact transposes of each other and the forward
solve conserves mass to rounding.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sps

from ..models import field_divergence
from .estimate import KernelEstimate

MASS_TOL = 1e-3
SAFETY = 0.9


class CFLError(ValueError):
    """The requested time step is above the explicit stability limit."""

    def __init__(self, dt, dt_max):
        super().__init__(f"time step {dt:g} exceeds stability limit; use dt <= {dt_max:.6g}")
        self.dt = dt
        self.suggested_dt = dt_max


class InstabilityError(ArithmeticError):
    pass


def _mesh(n, period):
    n = np.broadcast_to(np.asarray(n, dtype=int), (len(period),))
    h = np.asarray(period, float) / n
    axes = [h[j] * np.arange(n[j]) for j in range(len(n))]
    return tuple(int(v) for v in n), h, axes


def generator_matrix(sys, n=128):
    """Sparse generator G on a periodic mesh with ``n`` nodes per axis.

    Returns ``(G, shape, spacing)``.  Off-diagonal entries are nonnegative:
    advection falls back from central to upwind differences at nodes where
    the central form would break positivity.
    """
    space = sys.space
    if not space.periodic:
        raise ValueError("the grid solver supports periodic (torus) models only")
    shape, h, axes = _mesh(n, space.period)
    d = len(shape)
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    N = int(np.prod(shape))
    idx = np.arange(N).reshape(shape)

    def A_at(p):
        S = sys.sigma(p)
        return np.einsum("...im,...jm->...ij", S, S)

    b = sys.drift(X).copy()
    for k, Xk in enumerate(sys.diffusion):
        b -= 0.5 * field_divergence(Xk, space, X)[..., None] * Xk(X)

    rows, cols, vals = [], [], []

    def add(src, dst, v):
        rows.append(src.ravel())
        cols.append(dst.ravel())
        vals.append(np.broadcast_to(v, src.shape).ravel())

    A_node = A_at(X)
    for j in range(d):
        e = np.zeros(d)
        e[j] = 0.5 * h[j]
        up = np.roll(idx, -1, axis=j)
        dn = np.roll(idx, 1, axis=j)
        # face coefficients at x +- h/2 along axis j
        a_up = 0.5 * A_at(X + e)[..., j, j] / h[j] ** 2
        a_dn = 0.5 * A_at(X - e)[..., j, j] / h[j] ** 2
        c = b[..., j] / (2 * h[j])
        central_ok = (a_up - c >= 0) & (a_dn + c >= 0)
        w_up = np.where(central_ok, a_up + c, a_up + np.maximum(b[..., j], 0) / h[j])
        w_dn = np.where(central_ok, a_dn - c, a_dn + np.maximum(-b[..., j], 0) / h[j])
        add(idx, up, w_up)
        add(idx, dn, w_dn)
        add(idx, idx, -(w_up + w_dn))
        # mixed second derivatives 1/2 d_j(A_jk d_k u), centred
        for k in range(d):
            if k == j:
                continue
            a_jk = A_node[..., j, k]
            if not np.any(np.abs(a_jk) > 1e-14):
                continue
            for sj, nb_j in ((1, up), (-1, dn)):
                a_nb = np.roll(a_jk, -sj, axis=j)
                coef = 0.5 * sj * a_nb / (4 * h[j] * h[k])
                add(idx, np.roll(nb_j.reshape(shape), -1, axis=k), coef)
                add(idx, np.roll(nb_j.reshape(shape), 1, axis=k), -coef)
    G = sps.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
    )
    G.sum_duplicates()
    return G, shape, h


def stable_dt(G):
    """Largest explicit Euler step keeping the update matrix nonnegative, times the safety factor."""
    return SAFETY / float(np.max(-G.diagonal()))


def _schedule(times, t0, dt_max):
    """Equal sub-steps between consecutive output times, each <= dt_max."""
    out = []
    prev = t0
    for t in times:
        k = max(1, int(np.ceil((t - prev) / dt_max - 1e-12)))
        out.append((k, (t - prev) / k))
        prev = t
    return out


def solve_heat_grid(sys, x0, times, n=128, argument="second", dt=None, initial=None, t0=0.0, mass_tol=MASS_TOL):
    """Grid approximation of q_t(x0, .) (``argument="second"``) or q_t(., x0).

    Parameters
    ----------
    sys : VectorFieldSystem on the torus
    x0 : source point; the initial delta sits at the nearest mesh node
    times : increasing positive output times
    n : nodes per axis
    dt : optional maximal time step; refused when above the stability limit
    initial : optional initial values on the mesh replacing the delta (used
        to continue a solve from time ``t0``)

    Raises
    ------
    CFLError
        ``dt`` above the stability limit.
    InstabilityError
        Values drop below ``-mass_tol``.
    """
    if argument not in ("first", "second"):
        raise ValueError("argument must be 'first' or 'second'")
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) == 0 or np.any(np.diff(times) <= 0) or times[0] <= t0:
        raise ValueError("times must be increasing and after the start time")
    G, shape, h = generator_matrix(sys, n)
    dt_max = stable_dt(G)
    if dt is not None:
        if dt > dt_max:
            raise CFLError(dt, dt_max)
        dt_max = dt
    x0 = sys.space.wrap(np.asarray(x0, dtype=float))
    node = tuple(int(v) % s for v, s in zip(np.rint(x0 / h), shape))
    vol = float(np.prod(h))
    if initial is None:
        u = np.zeros(shape)
        u[node] = 1.0 / vol
        if times[0] - t0 < 4 * dt_max * (1 - 1e-9):
            raise ValueError(f"first stored time must be >= 4 dt = {4 * dt_max:g}")
    else:
        u = np.array(initial, dtype=float).reshape(shape)
    u = u.ravel()
    M = G.T.tocsr() if argument == "second" else G
    vals = np.empty((len(times),) + shape)
    steps = []
    for i, (k, step) in enumerate(_schedule(times, t0, dt_max)):
        for _ in range(k):
            u = u + step * (M @ u)
        if u.min() < -mass_tol:
            raise InstabilityError(f"negative values {u.min():.3g} at t={times[i]:g}")
        vals[i] = u.reshape(shape)
        steps.append(step)
    vals = np.maximum(vals, 0.0)
    mass = vals.reshape(len(times), -1).sum(axis=1) * vol
    d = len(shape)
    return KernelEstimate(
        method="grid",
        model=sys.name,
        source=node * h,
        argument=argument,
        symmetric=sys.is_symmetric,
        times=times,
        mass=mass,
        values=vals,
        lower=np.zeros((len(times), d)),
        spacing=np.tile(h, (len(times), 1)),
        periodic=True,
        meta={"n": list(shape), "dt": steps, "t0": t0, "mass_tol": mass_tol},
    )


def grid_kernel_pair(sys, x0, z0, times, n=128, dt=None):
    """Forward kernel q_t(x0, .) and backward kernel q_t(., z0) on one mesh and schedule."""
    fwd = solve_heat_grid(sys, x0, times, n, "second", dt)
    bwd = solve_heat_grid(sys, z0, times, n, "first", dt)
    return fwd, bwd

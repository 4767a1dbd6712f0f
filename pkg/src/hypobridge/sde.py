"""Stratonovich integration of  dx = sum_k X_k(x) o dW^k + X0(x) dt (+ extra drift).

The integrator is the Heun predictor-corrector scheme.  Noise for path ``p`` at
step ``n`` is drawn from the counter-based stream keyed by (seed, stream, p, n),
so ensembles are reproducible regardless of how paths are batched.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .models import su2_exp, su2_field_matrix, su2_log

CHUNK = 2048


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SamplePath:
    """A single discretised trajectory."""

    times: np.ndarray
    states: np.ndarray
    increments: np.ndarray
    drift_clamped: np.ndarray
    seed: int
    stream: int
    path_id: int = 0


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """A batch of trajectories sharing one time grid.

    ``states`` has shape (paths, len(times), dim).  Noise increments are not
    stored; :meth:`increments` regenerates them from the counter-based stream.
    """

    times: np.ndarray
    states: np.ndarray
    path_ids: np.ndarray
    seed: int
    stream: int
    dt: float
    diffusion_count: int
    clamped: np.ndarray | None = None
    failed: np.ndarray | None = None
    drift_terms: np.ndarray | None = None
    streams: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.states.shape[0]

    @property
    def ok(self):
        if self.failed is None:
            return np.ones(len(self), dtype=bool)
        return ~self.failed

    @property
    def failure_fraction(self):
        return 0.0 if self.failed is None else float(np.mean(self.failed))

    @property
    def clamped_fraction(self):
        if self.clamped is None:
            return 0.0
        return float(np.mean(self.clamped[self.ok]))

    def step_indices(self):
        return np.rint(self.times / self.dt).astype(np.int64)

    def increments(self, i):
        """Brownian increments of path ``i`` on the recorded grid."""
        steps = self.step_indices()
        if np.any(np.diff(steps) != 1):
            raise ValueError("increments are only defined for fully recorded paths")
        stream = self.stream if self.streams is None else int(self.streams[i])
        pid = np.array([self.path_ids[i]])
        return np.concatenate(
            [rng.normals(self.seed, stream, pid, int(n), self.diffusion_count) for n in steps[:-1]]
        ) * np.sqrt(self.dt)

    def path(self, i):
        steps = len(self.times) - 1
        clamped = np.zeros(steps, bool) if self.clamped is None else self.clamped[i]
        return SamplePath(
            self.times,
            self.states[i],
            self.increments(i),
            clamped,
            self.seed,
            self.stream if self.streams is None else int(self.streams[i]),
            int(self.path_ids[i]),
        )

    def at(self, t):
        """States of every path at recorded time t."""
        j = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[j] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} not on the recorded grid")
        return self.states[:, j]


def _is_group(sys):
    return sys.space.kind == "SU2" and all(X.algebra is not None for X in sys.fields())


def heun_step(sys, x, t, dt, dW, extra=None):
    """One Heun step for a batch of states x (P, d) with increments dW (P, m).

    ``extra(t, x)`` is an optional additional drift returning (P, d).
    """
    if _is_group(sys):
        return _group_step(sys, x, t, dt, dW, extra)
    b = sys.drift(x)
    if extra is not None:
        b = b + extra(t, x)
    S = sys.sigma(x)
    noise = np.einsum("pdm,pm->pd", S, dW)
    xp = x + b * dt + noise
    b2 = sys.drift(xp)
    if extra is not None:
        b2 = b2 + extra(t + dt, xp)
    S2 = sys.sigma(xp)
    out = x + 0.5 * (b + b2) * dt + 0.5 * (noise + np.einsum("pdm,pm->pd", S2, dW))
    if sys.space.periodic:
        out = sys.space.wrap(out)
    return out


def _group_step(sys, x, t, dt, dW, extra):
    # left-invariant fields are constant in algebra coordinates; only the
    # chart-valued extra drift needs converting
    a0 = sys.drift.algebra
    E = np.stack([X.algebra for X in sys.diffusion], axis=-1)
    noise = dW @ E.T

    def alg_drift(tt, xx):
        v = np.broadcast_to(a0, xx.shape).copy()
        if extra is not None:
            v += np.linalg.solve(su2_field_matrix(xx), extra(tt, xx)[..., None])[..., 0]
        return v

    U = su2_exp(x)
    a = alg_drift(t, x)
    xp = su2_log(U @ su2_exp(a * dt + noise))
    a2 = alg_drift(t + dt, xp)
    return su2_log(U @ su2_exp(0.5 * (a + a2) * dt + noise))


def _grid(T, dt):
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * T:
        raise ValueError(f"horizon {T} is not a multiple of dt {dt}")
    return n


def _save_steps(n, dt, save_at):
    if save_at is None:
        return np.arange(n + 1)
    idx = np.rint(np.asarray(save_at, dtype=float) / dt).astype(np.int64)
    if np.any(np.abs(idx * dt - np.asarray(save_at)) > 1e-9) or np.any(idx < 0) or np.any(idx > n):
        raise ValueError("save_at times must lie on the step grid")
    return idx


def integrate(sys, x0, n_steps, dt, seed, path_ids, stream=0, save_steps=None, extra=None, t0=0.0):
    """Integrate a batch of paths and return states at ``save_steps``."""
    path_ids = np.asarray(path_ids, dtype=np.int64)
    x = np.array(np.broadcast_to(np.asarray(x0, float), (len(path_ids), sys.dim)))
    if sys.space.periodic:
        x = sys.space.wrap(x)
    save_steps = np.arange(n_steps + 1) if save_steps is None else np.asarray(save_steps)
    out = np.empty((len(path_ids), len(save_steps), sys.dim))
    pos = {int(s): j for j, s in enumerate(save_steps)}
    if 0 in pos:
        out[:, pos[0]] = x
    sq = np.sqrt(dt)
    m = sys.diffusion_count
    for n in range(n_steps):
        dW = rng.normals(seed, stream, path_ids, n, m) * sq
        x = heun_step(sys, x, t0 + n * dt, dt, dW, extra)
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"non-finite state at step {n + 1}")
        if n + 1 in pos:
            out[:, pos[n + 1]] = x
    return out


def _chunks(n):
    return [np.arange(i, min(i + CHUNK, n)) for i in range(0, n, CHUNK)]


def run_chunks(fn, n_paths, jobs=1):
    """Apply fn(path_index_array) over fixed-size chunks; results in path order."""
    chunks = _chunks(n_paths)
    if jobs <= 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, chunks))


def simulate_diffusion(sys, x0, T, dt, seed, n_paths=None, stream=0, save_at=None, jobs=1):
    """Simulate the unconditioned diffusion from x0 on [0, T].

    Returns a :class:`SamplePath` when ``n_paths`` is None, otherwise a
    :class:`PathEnsemble` of ``n_paths`` trajectories.
    """
    n = _grid(T, dt)
    steps = _save_steps(n, dt, save_at)
    count = 1 if n_paths is None else int(n_paths)
    x0 = np.asarray(x0, dtype=float)
    per_path = x0.ndim == 2

    def work(idx):
        start = x0[idx] if per_path else x0
        return integrate(sys, start, n, dt, seed, idx, stream, steps)

    states = np.concatenate(run_chunks(work, count, jobs))
    ens = PathEnsemble(
        times=steps * dt,
        states=states,
        path_ids=np.arange(count),
        seed=seed,
        stream=stream,
        dt=dt,
        diffusion_count=sys.diffusion_count,
        meta={"model": sys.name, "T": T},
    )
    return ens.path(0) if n_paths is None else ens

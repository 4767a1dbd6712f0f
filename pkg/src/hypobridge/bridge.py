"""Diffusion bridges by Doob h-transform and Doob/Girsanov weights.

The bridge from x0 to z0 over [0, T] solves

    dy = sum_i X_i(y) o dW^i + X0(y) dt + sum_i X_i(y) (X_i log q_{T-t}(., z0))(y) dt

up to time T - eps, after which the path is pinned deterministically to z0.
The drift comes from a kernel estimate of q_s(., z0).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng
from .heatkernel.estimate import REL_FLOOR, kernel_value, log_horizontal_gradient
from .models import su2_exp, su2_log
from .sde import PathEnsemble, SimulationError, heun_step, run_chunks

RETRY_STREAM_OFFSET = 1000
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class BridgeConfig:
    x0: tuple
    z0: tuple
    T: float = 1.0
    dt: float = 1e-3
    eps: float = 0.05
    clamp_norm: float = 1e3
    seed: int = 0
    n_paths: int = 1000
    pinning: str = "linear"
    kernel_ref: str | None = None
    stream: int = 11
    retries: int = 1
    rel_floor: float = REL_FLOOR

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        object.__setattr__(self, "z0", tuple(float(v) for v in self.z0))
        if not (0 < self.dt < self.eps < self.T):
            raise ValueError("need 0 < dt < eps < T")
        if self.clamp_norm <= 0:
            raise ValueError("clamp_norm must be positive")
        if self.pinning not in ("linear", "ccdist"):
            raise ValueError("pinning must be 'linear' or 'ccdist'")
        n = self.T / self.dt
        if abs(n - round(n)) > 1e-9 * n or abs(self.eps / self.dt - round(self.eps / self.dt)) > 1e-6:
            raise ValueError("T and eps must be multiples of dt")

    @property
    def n_steps(self):
        return int(round(self.T / self.dt))

    @property
    def free_steps(self):
        """Number of SDE steps before the pinning interval."""
        return self.n_steps - int(round(self.eps / self.dt))

    def to_dict(self):
        return asdict(self)


def required_kernel_times(cfg):
    """Times s = T - t at which the bridge drift is evaluated."""
    k = np.arange(cfg.free_steps + 1)
    return np.round(cfg.T - k * cfg.dt, 12)[::-1]


class _Drift:
    """Bridge drift at (t, x) with clamp and floor accounting for one step."""

    def __init__(self, sys, kernel, cfg):
        self.sys, self.kernel, self.cfg = sys, kernel, cfg

    def components(self, t, x):
        """(X_i log q_{T-t}(., z0))(x), shape (P, m); NaN below the kernel floor."""
        return log_horizontal_gradient(
            self.kernel, self.sys, self.cfg.T - t, x, rel_floor=self.cfg.rel_floor, on_floor="nan"
        )

    def vector(self, t, x):
        g = self.components(t, x)
        bad = ~np.all(np.isfinite(g), axis=-1)
        g = np.where(bad[:, None], 0.0, g)
        v = np.einsum("pdm,pm->pd", self.sys.sigma(x), g)
        norm = np.linalg.norm(v, axis=-1)
        clamp = norm > self.cfg.clamp_norm
        v[clamp] *= (self.cfg.clamp_norm / norm[clamp])[:, None]
        return v, g, bad, clamp


def _bridge_batch(sys, kernel, cfg, ids, stream):
    """Integrate the free part of the bridge for global path ids."""
    drift = _Drift(sys, kernel, cfg)
    P, d, m = len(ids), sys.dim, sys.diffusion_count
    nf = cfg.free_steps
    x = np.array(np.broadcast_to(np.asarray(cfg.x0, float), (P, d)))
    if sys.space.periodic:
        x = sys.space.wrap(x)
    states = np.empty((P, nf + 1, d))
    terms = np.full((P, nf + 1, m), np.nan)
    clamped = np.zeros((P, cfg.n_steps), dtype=bool)
    failed = np.zeros(P, dtype=bool)
    states[:, 0] = x
    sq = np.sqrt(cfg.dt)
    for n in range(nf):
        t = n * cfg.dt
        dW = rng.normals(cfg.seed, stream, ids, n, m) * sq
        cache = {}

        def extra(tt, xx):
            v, g, bad, clamp = drift.vector(tt, xx)
            cache.setdefault("first", (g, bad, clamp))
            cache["last"] = (bad, clamp)
            return v

        x = heun_step(sys, x, t, cfg.dt, dW, extra)
        g, bad1, c1 = cache["first"]
        bad2, c2 = cache["last"]
        terms[:, n] = g
        failed |= bad1 | bad2 | ~np.all(np.isfinite(x), axis=-1)
        clamped[:, n] = c1 | c2
        x = np.where(failed[:, None], states[:, n], x)
        states[:, n + 1] = x
    g_end = drift.components(nf * cfg.dt, x)
    failed |= ~np.all(np.isfinite(g_end), axis=-1)
    terms[:, nf] = g_end
    return states, terms, clamped, failed


def _pin(sys, cfg, y_start):
    """Deterministic path on the last eps of the horizon, shape (P, k+1, d)."""
    k = cfg.n_steps - cfg.free_steps
    s = np.linspace(0.0, 1.0, k + 1)
    z0 = np.asarray(cfg.z0, float)
    space = sys.space
    if cfg.pinning == "ccdist":
        from .ccdist import pinning_paths

        return pinning_paths(sys, y_start, z0, k)
    if space.kind == "SU2":
        delta = space.displacement(y_start, z0)
        U = su2_exp(y_start)
        out = su2_log(U[:, None] @ su2_exp(s[None, :, None] * delta[:, None, :]))
        return out
    delta = space.displacement(y_start, z0)
    out = y_start[:, None, :] + s[None, :, None] * delta[:, None, :]
    return space.wrap(out) if space.periodic else out


def simulate_bridge(cfg, sys, kernel, jobs=1):
    """Simulate ``cfg.n_paths`` bridge paths x0 -> z0.

    The kernel must represent q_s(., z0) for s in [eps, T] (see
    :func:`required_kernel_times`).  Paths whose drift becomes unavailable
    are re-simulated with fresh noise up to ``cfg.retries`` times; those
    still failing are marked in ``failed`` and excluded by ``ok``.

    Returns a :class:`PathEnsemble` on the full grid [0, T] with per-step
    clamp flags and the drift components recorded on [0, T - eps].
    """
    if kernel.argument != "first" and not kernel.symmetric:
        raise ValueError("bridge drift needs q_s(., z0): a first-argument or symmetric kernel")
    tol = 1e-6
    if kernel.has_grid and kernel.method == "grid":
        # the grid delta sits at the mesh node nearest z0
        tol = 0.5 * float(np.linalg.norm(kernel.spacing[0])) + 1e-9
    if np.linalg.norm(sys.space.displacement(kernel.source, np.asarray(cfg.z0, float))) > tol:
        raise ValueError("kernel source does not match the bridge endpoint z0")
    s_need = required_kernel_times(cfg)
    if s_need[0] < kernel.times[0] * (1 - 1e-9) or s_need[-1] > kernel.times[-1] * (1 + 1e-9):
        raise ValueError(
            f"kernel covers [{kernel.times[0]:g}, {kernel.times[-1]:g}], bridge needs [{s_need[0]:g}, {s_need[-1]:g}]"
        )
    N = cfg.n_paths

    def work(idx):
        return _bridge_batch(sys, kernel, cfg, idx, cfg.stream)

    parts = run_chunks(work, N, jobs)
    states = np.concatenate([p[0] for p in parts])
    terms = np.concatenate([p[1] for p in parts])
    clamped = np.concatenate([p[2] for p in parts])
    failed = np.concatenate([p[3] for p in parts])
    streams = np.full(N, cfg.stream, dtype=np.int64)
    first_failures = int(failed.sum())
    for r in range(1, cfg.retries + 1):
        redo = np.flatnonzero(failed)
        if len(redo) == 0:
            break
        st = cfg.stream + r * RETRY_STREAM_OFFSET
        s2, t2, c2, f2 = _bridge_batch(sys, kernel, cfg, redo, st)
        states[redo], terms[redo], clamped[redo], failed[redo] = s2, t2, c2, f2
        streams[redo] = st
    tail = _pin(sys, cfg, states[:, -1])
    full = np.concatenate([states, tail[:, 1:]], axis=1)
    if not np.all(np.isfinite(full)):
        raise SimulationError("non-finite bridge state")
    times = np.arange(cfg.n_steps + 1) * cfg.dt
    ens = PathEnsemble(
        times=times,
        states=full,
        path_ids=np.arange(N),
        seed=cfg.seed,
        stream=cfg.stream,
        dt=cfg.dt,
        diffusion_count=sys.diffusion_count,
        clamped=clamped,
        failed=failed,
        drift_terms=terms,
        streams=streams,
        meta={
            "model": sys.name,
            "kind": "bridge",
            "config": cfg.to_dict(),
            "eps": cfg.eps,
            "failure_fraction": float(failed.mean()),
            "first_attempt_failures": first_failures,
            "clamped_step_fraction": float(clamped[~failed, : cfg.free_steps].mean()) if (~failed).any() else 0.0,
        },
    )
    return ens


def girsanov_weight(path, kernel, t, z0=None, x0=None):
    """Doob weight q_{1-t}(x_t, z0) / q_1(x0, z0) of unconditioned path(s).

    ``path`` is a SamplePath or a PathEnsemble (vectorised).  Returns
    ``(weights, floored)``; positions where the kernel is below its floor
    get weight 0 and ``floored=True``.
    """
    times = path.times
    states = path.states if path.states.ndim == 3 else path.states[None]
    j = int(np.argmin(np.abs(times - t)))
    if abs(times[j] - t) > 1e-9:
        raise ValueError(f"time {t} not on the path grid")
    x0 = states[:, 0] if x0 is None else np.broadcast_to(np.asarray(x0, float), states[:, 0].shape)
    z0 = kernel.source if z0 is None else np.asarray(z0, float)
    if kernel.argument != "first" and not kernel.symmetric:
        raise ValueError("weights need q(., z0)")
    den, _ = kernel_value(kernel, 1.0, x0, z0, exact=False)
    if t == 0:
        w = np.ones(len(states))
        floored = np.zeros(len(states), bool)
    else:
        num, _ = kernel_value(kernel, 1.0 - t, states[:, j], z0, exact=False)
        from .heatkernel.estimate import kernel_max

        floored = num <= max(1e-300, REL_FLOOR * kernel_max(kernel, 1.0 - t))
        w = np.where(floored, 0.0, num / den)
    if path.states.ndim == 2:
        return float(w[0]), bool(floored[0])
    return w, floored


# --------------------------------------------------------------------------
# persistence


def save_paths_csv(path, ens, every=1):
    """CSV with columns path_id, step, t, coordinates..., clamped."""
    d = ens.states.shape[-1]
    names = ["x", "y", "z"][:d]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path_id", "step", "t", *names, "clamped"])
        steps = np.arange(0, len(ens.times), every)
        for i in range(len(ens)):
            for s in steps:
                c = 0
                if ens.clamped is not None and 0 < s <= ens.clamped.shape[1]:
                    c = int(ens.clamped[i, s - 1])
                w.writerow([int(ens.path_ids[i]), int(s), repr(float(ens.times[s])), *[repr(float(v)) for v in ens.states[i, s]], c])


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o))


def save_ensemble(path, ens, manifest=None):
    """Compact binary ensemble (.npz) plus a JSON manifest next to it."""
    arrays = {"times": ens.times, "states": ens.states, "path_ids": ens.path_ids}
    for a in ("clamped", "failed", "drift_terms", "streams"):
        v = getattr(ens, a)
        if v is not None:
            arrays[a] = v
    header = {
        "version": MANIFEST_VERSION,
        "seed": int(ens.seed),
        "stream": int(ens.stream),
        "dt": ens.dt,
        "diffusion_count": ens.diffusion_count,
        "meta": ens.meta,
        "failure_fraction": ens.failure_fraction,
    }
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **arrays)
    man = dict(manifest or {})
    man.update(header)
    with open(str(path) + ".json", "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True, default=_json_default)
    return man


def load_ensemble(path):
    with open(str(path) + ".json") as fh:
        man = json.load(fh)
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    return PathEnsemble(
        times=arrays["times"],
        states=arrays["states"],
        path_ids=arrays["path_ids"],
        seed=man["seed"],
        stream=man["stream"],
        dt=man["dt"],
        diffusion_count=man["diffusion_count"],
        clamped=arrays.get("clamped"),
        failed=arrays.get("failed"),
        drift_terms=arrays.get("drift_terms"),
        streams=arrays.get("streams"),
        meta=man["meta"],
    )

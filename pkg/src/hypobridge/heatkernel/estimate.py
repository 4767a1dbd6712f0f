"""Evaluable approximations of the fundamental solution q_t(x, y).

A :class:`KernelEstimate` fixes one argument of q (the ``source``) and stores
the other as a function on space at a list of times.  ``argument`` says which
one is free:

``"second"``  values are q_t(source, .)  (the density of the diffusion)
``"first"``   values are q_t(., source)  (the solution of the backward equation)

Symmetric kernels may be queried either way.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

ABS_FLOOR = 1e-300
REL_FLOOR = 1e-12


class DriftUnavailable(ArithmeticError):
    """The kernel is below its floor, so log-derivatives are not defined."""


@dataclass(frozen=True, eq=False)
class KernelEstimate:
    method: str
    model: str
    source: np.ndarray
    argument: str
    symmetric: bool
    times: np.ndarray
    mass: np.ndarray
    # gridded payload: one box per stored time
    values: np.ndarray | None = None
    lower: np.ndarray | None = None
    spacing: np.ndarray | None = None
    periodic: bool = False
    # sample-cloud payload
    samples: np.ndarray | None = None
    bandwidth: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dim(self):
        return len(self.source)

    @property
    def has_grid(self):
        return self.values is not None

    @property
    def shape(self):
        return self.values.shape[1:]

    def nodes(self, i):
        """Mesh node coordinates at stored time index i, shape (*shape, d)."""
        axes = [self.lower[i, j] + self.spacing[i, j] * np.arange(n) for j, n in enumerate(self.shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    @cached_property
    def gradient_cache(self):
        """Nodal value/gradient stacks keyed by time index, filled on demand."""
        return {}

    @cached_property
    def grid_max(self):
        """Per-time maximum of the stored mesh values."""
        return self.values.reshape(len(self.times), -1).max(axis=1)

    def cell_volume(self, i):
        return float(np.prod(self.spacing[i]))

    def time_index(self, t):
        j = np.flatnonzero(np.isclose(self.times, t, rtol=1e-12, atol=1e-14))
        if len(j) == 0:
            raise ValueError(f"time {t} is not stored")
        return int(j[0])

    def with_meta(self, **kw):
        meta = dict(self.meta)
        meta.update(kw)
        return replace(self, meta=meta)


def _check_range(k, t):
    t = float(t)
    lo, hi = k.times[0], k.times[-1]
    if t < lo * (1 - 1e-12) or t > hi * (1 + 1e-12):
        raise ValueError(f"t={t} outside stored range [{lo}, {hi}]")
    return min(max(t, lo), hi)


def _bracket(k, t):
    """Stored indices (i, j) and log-time weight w of t, with t_i <= t <= t_j."""
    t = _check_range(k, t)
    j = int(np.searchsorted(k.times, t))
    if j < len(k.times) and np.isclose(k.times[j], t, rtol=1e-13, atol=0):
        return j, j, 0.0
    if j > 0 and np.isclose(k.times[j - 1], t, rtol=1e-13, atol=0):
        return j - 1, j - 1, 0.0
    i = j - 1
    w = (np.log(t) - np.log(k.times[i])) / (np.log(k.times[j]) - np.log(k.times[i]))
    return i, j, float(w)


def grid_interpolate(k, i, y, arrays=None):
    """Multilinear interpolation of the stored grid at time index i.

    ``arrays`` (c, N) interpolates c flattened nodal fields at once; the
    default is the stored values.  Returns shape ``y.shape[:-1]`` or
    ``(c,) + y.shape[:-1]``.
    """
    y = np.asarray(y, dtype=float)
    lead = y.shape[:-1]
    y = y.reshape(-1, y.shape[-1])
    shape = np.array(k.shape)
    d = len(shape)
    u = (y - k.lower[i]) / k.spacing[i]
    base = np.floor(u)
    frac = u - base
    base = base.astype(np.int64)
    single = arrays is None
    flat = k.values[i].reshape(1, -1) if single else arrays
    strides = np.r_[np.cumprod(shape[::-1])[::-1][1:], 1]
    # per-axis (index, weight, inside) for the low and high corner
    lo, hi = base, base + 1
    if k.periodic:
        lo, hi = np.mod(lo, shape), np.mod(hi, shape)
        in_lo = in_hi = np.ones_like(base, dtype=bool)
    else:
        in_lo = (lo >= 0) & (lo < shape)
        in_hi = (hi >= 0) & (hi < shape)
        lo, hi = np.clip(lo, 0, shape - 1), np.clip(hi, 0, shape - 1)
    w_lo = np.where(in_lo, 1.0 - frac, 0.0)
    w_hi = np.where(in_hi, frac, 0.0)
    out = np.zeros((len(flat), len(y)))
    for corner in range(2**d):
        idx = np.zeros(len(y), dtype=np.int64)
        w = np.ones(len(y))
        for a in range(d):
            if (corner >> a) & 1:
                idx += hi[:, a] * strides[a]
                w *= w_hi[:, a]
            else:
                idx += lo[:, a] * strides[a]
                w *= w_lo[:, a]
        out += w * flat[:, idx]
    return out[0].reshape(lead) if single else out.reshape((len(flat),) + lead)


def _nodal_fields(k, i):
    """Values and central-difference gradient at the nodes, shape (1 + d, N)."""
    cache = k.gradient_cache
    if i not in cache:
        v = k.values[i]
        h = k.spacing[i]
        grads = []
        for a in range(v.ndim):
            if k.periodic:
                g = (np.roll(v, -1, axis=a) - np.roll(v, 1, axis=a)) / (2 * h[a])
            else:
                g = np.gradient(v, h[a], axis=a, edge_order=2)
            grads.append(g.ravel())
        cache[i] = np.vstack([v.ravel()[None], np.array(grads)])
    return cache[i]


def _free_points(k, x, y):
    """Return the free-argument points of a query q_t(x, y)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    src = k.source

    def at_source(p):
        return np.all(np.abs(p - src) <= 1e-9 * (1 + np.abs(src)))

    if k.argument == "second" and at_source(x):
        return y
    if k.argument == "first" and at_source(y):
        return x
    if k.symmetric:
        if at_source(x):
            return y
        if at_source(y):
            return x
    raise ValueError("query must fix the kernel's source in its stored argument")


def _space_value(k, i, pts, exact):
    """Value and standard error at stored time index i."""
    if k.method == "kde" and (exact or not k.has_grid):
        from .kde import kde_evaluate

        return kde_evaluate(k, i, pts)
    return grid_interpolate(k, i, pts), np.zeros(np.shape(pts)[:-1])


def value_at(k, t, pts, exact=False):
    """Kernel value (and standard error) at time t for free-argument points."""
    i, j, w = _bracket(k, t)
    vi, si = _space_value(k, i, pts, exact)
    if w == 0.0:
        return vi, si
    vj, sj = _space_value(k, j, pts, exact)
    with np.errstate(divide="ignore", invalid="ignore"):
        lv = (1 - w) * np.log(np.maximum(vi, 0)) + w * np.log(np.maximum(vj, 0))
        out = np.exp(lv)
        # relative errors combine through the log-linear weights
        rel = np.sqrt(((1 - w) * si / vi) ** 2 + (w * sj / vj) ** 2)
    out = np.where(np.isfinite(out), out, 0.0)
    se = np.where(np.isfinite(rel), rel * out, 0.0)
    return out, se


def kernel_value(k, t, x, y, exact=True):
    """q_t(x, y) with uncertainty, one argument of which must be the source.

    Returns ``(value, stderr)``; stderr is zero for grid kernels.
    """
    pts = _free_points(k, x, y)
    v, s = value_at(k, t, pts, exact=exact)
    if np.ndim(v) == 0:
        return float(v), float(s)
    return v, s


def kernel_max(k, t):
    """Maximum of the stored representation at time t (floor reference)."""
    i, j, w = _bracket(k, t)
    if k.has_grid:
        mi, mj = k.grid_max[i], k.grid_max[j]
    else:
        from .kde import kde_evaluate

        mi = kde_evaluate(k, i, k.samples[i][:256])[0].max()
        mj = mi if j == i else kde_evaluate(k, j, k.samples[j][:256])[0].max()
    if w == 0.0:
        return float(mi)
    return float(np.exp((1 - w) * np.log(mi) + w * np.log(mj)))


def _step_sizes(k, t):
    i, j, _ = _bracket(k, t)
    if k.has_grid:
        return np.maximum(k.spacing[i], k.spacing[j])
    return 0.25 * np.maximum(k.bandwidth[i], k.bandwidth[j])


def log_gradient(k, space, t, x, rel_floor=REL_FLOOR, exact=False):
    """Chart gradient of log of the free-argument function at points x.

    Grid kernels interpolate nodal central differences (second order in the
    mesh spacing, also between nodes); mesh-free KDE kernels use central
    differences with a quarter-bandwidth step.  Between stored times the
    gradient follows the log-linear time interpolation.  Returns ``(grad,
    available)`` where grad has shape (..., d) and is NaN where the kernel is
    below its floor.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    floor = max(ABS_FLOOR, rel_floor * kernel_max(k, t))
    if k.has_grid and not (exact and k.method == "kde"):
        i, j, w = _bracket(k, t)
        parts = []
        for idx in (i,) if w == 0.0 else (i, j):
            r = grid_interpolate(k, idx, x, _nodal_fields(k, idx))
            parts.append((r[0], np.moveaxis(r[1:], 0, -1)))
        with np.errstate(divide="ignore", invalid="ignore"):
            if w == 0.0:
                q0, grad = parts[0][0], parts[0][1] / parts[0][0][..., None]
            else:
                (qi, gi), (qj, gj) = parts
                q0 = np.exp((1 - w) * np.log(np.maximum(qi, 0)) + w * np.log(np.maximum(qj, 0)))
                grad = (1 - w) * gi / qi[..., None] + w * gj / qj[..., None]
        ok = np.asarray(q0 > floor)
        grad = np.array(grad)
        grad[~ok] = np.nan
        return grad, ok
    h = _step_sizes(k, t)
    offsets = np.concatenate([np.zeros((1, d)), np.diag(h), -np.diag(h)])
    pts = x[None] + offsets.reshape((2 * d + 1,) + (1,) * (x.ndim - 1) + (d,))
    if space.periodic:
        pts = space.wrap(pts)
    q, _ = value_at(k, t, pts, exact)
    q0 = q[0]
    ok = q0 > floor
    with np.errstate(divide="ignore", invalid="ignore"):
        grad = np.stack([(q[1 + j] - q[1 + d + j]) / (2 * h[j] * q0) for j in range(d)], axis=-1)
    grad[~ok] = np.nan
    return grad, ok


def log_horizontal_gradient(k, sys, t, x, z0=None, rel_floor=REL_FLOOR, on_floor="raise", exact=False):
    """Directional derivatives d log q_t(., z0)(X_i(x)) for i = 1..m.

    The kernel must hold q_t(., z0) as a function of its first argument (or be
    symmetric) with source z0.  Below the floor ``max(1e-300, rel_floor *
    max q_t)`` the derivative is unavailable: :class:`DriftUnavailable` is
    raised, or NaN returned when ``on_floor="nan"``.
    """
    if k.argument != "first" and not k.symmetric:
        raise ValueError("gradient in the first argument needs a first-argument or symmetric kernel")
    if z0 is not None and not np.allclose(np.asarray(z0, float), k.source, atol=1e-9):
        raise ValueError("z0 does not match the kernel source")
    x = np.asarray(x, dtype=float)
    grad, ok = log_gradient(k, sys.space, t, x, rel_floor, exact)
    out = np.einsum("...dm,...d->...m", sys.sigma(x), grad)
    if not np.all(ok) and on_floor == "raise":
        raise DriftUnavailable(f"kernel below floor at {int(np.sum(~ok))} point(s)")
    return out


def time_derivative(k, t, x, y, exact=True):
    """d/dt q_t(x, y) by differences across stored times.

    Returns ``(value, stderr, one_sided)``.  At a stored interior time the
    three-point non-uniform central formula is used; between stored times the
    nodal derivatives are interpolated linearly; at the ends of the stored
    range a one-sided difference is used and flagged.
    """
    pts = _free_points(k, x, y)
    t = _check_range(k, t)
    times = k.times
    n = len(times)
    if n < 2:
        raise ValueError("need at least two stored times")

    def nodal(i):
        if i == 0 or i == n - 1:
            a, b = (0, 1) if i == 0 else (n - 2, n - 1)
            va, sa = _space_value(k, a, pts, exact)
            vb, sb = _space_value(k, b, pts, exact)
            h = times[b] - times[a]
            return (vb - va) / h, np.hypot(sa, sb) / h, True
        hm, hp = times[i] - times[i - 1], times[i + 1] - times[i]
        vm, sm = _space_value(k, i - 1, pts, exact)
        v0, s0 = _space_value(k, i, pts, exact)
        vp, sp_ = _space_value(k, i + 1, pts, exact)
        cm, c0, cp = -hp / (hm * (hm + hp)), (hp - hm) / (hm * hp), hm / (hp * (hm + hp))
        val = cm * vm + c0 * v0 + cp * vp
        se = np.sqrt((cm * sm) ** 2 + (c0 * s0) ** 2 + (cp * sp_) ** 2)
        return val, se, False

    j = int(np.searchsorted(times, t))
    if j < n and np.isclose(times[j], t, rtol=1e-13, atol=0):
        v, s, one = nodal(j)
    else:
        i = j - 1
        w = (t - times[i]) / (times[j] - times[i])
        vi, si, oi = nodal(i)
        vj, sj, oj = nodal(j)
        v, s, one = (1 - w) * vi + w * vj, np.hypot((1 - w) * si, w * sj), oi or oj
    if np.ndim(v) == 0:
        return float(v), float(s), bool(one)
    return v, s, bool(one)


# --------------------------------------------------------------------------
# persistence

_ARRAYS = ("source", "times", "mass", "values", "lower", "spacing", "samples", "bandwidth")
FORMAT_VERSION = 1


def save_kernel(path, k):
    """Write a kernel to a single ``.npz`` file: JSON header plus arrays."""
    header = {
        "format": FORMAT_VERSION,
        "model": k.model,
        "method": k.method,
        "argument": k.argument,
        "symmetric": k.symmetric,
        "periodic": k.periodic,
        "times": k.times.tolist(),
        "mass": k.mass.tolist(),
        "source": k.source.tolist(),
        "meta": k.meta,
    }
    arrays = {a: getattr(k, a) for a in _ARRAYS if getattr(k, a) is not None}
    with open(path, "wb") as fh:
        np.savez_compressed(fh, header=np.frombuffer(json.dumps(header, sort_keys=True, default=_jsonable).encode(), dtype=np.uint8), **arrays)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")


def load_kernel(path):
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("format") != FORMAT_VERSION:
            raise ValueError(f"unsupported kernel file format {header.get('format')}")
        arrays = {a: z[a] for a in _ARRAYS if a in z.files}
    return KernelEstimate(
        method=header["method"],
        model=header["model"],
        argument=header["argument"],
        symmetric=header["symmetric"],
        periodic=header["periodic"],
        meta=header["meta"],
        **arrays,
    )

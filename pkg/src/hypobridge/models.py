"""Model spaces, vector-field systems and their Lie-algebraic data.

Built-in models:

``torus-elliptic``   flat torus R^2/Z^2 with X1 = d/dx, X2 = d/dy
``torus-grushin``    same torus with X1 = d/dx, X2 = sin(2 pi x) d/dy
``heisenberg``       R^3 with X1 = d/dx, X2 = d/dy + x d/dz
``su2``              SU(2) in exponential coordinates, left-invariant fields
                     generated by two Pauli matrices

Points are numpy arrays whose last axis is the coordinate axis; every field
evaluator is vectorised over the leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import sympy as sp

RANK_TOL = 1e-8


class EvaluationError(ValueError):
    """A field produced non-finite values."""


def fd_step(x):
    """Finite-difference step 1e-5 * (1 + |x|), per point."""
    x = np.asarray(x, dtype=float)
    return 1e-5 * (1.0 + np.linalg.norm(x, axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# SU(2) helpers

_PAULI = np.array(
    [[[0, 1], [1, 0]], [[0, -1j], [1j, 0]], [[1, 0], [0, -1]]], dtype=complex
)
# E_k = -(i/2) sigma_k, so that [E_1, E_2] = E_3
SU2_BASIS = -0.5j * _PAULI


def su2_exp(theta):
    """Matrix exponential of sum_k theta_k E_k, batched."""
    theta = np.asarray(theta, dtype=float)
    phi = np.linalg.norm(theta, axis=-1)
    half = 0.5 * phi
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(phi > 1e-12, np.sin(half) / np.where(phi > 0, phi, 1.0), 0.5)
    a = np.cos(half)
    # U = a I - i s (theta . sigma)
    u = np.empty(theta.shape[:-1] + (2, 2), dtype=complex)
    u[..., 0, 0] = a - 1j * s * theta[..., 2]
    u[..., 1, 1] = a + 1j * s * theta[..., 2]
    u[..., 0, 1] = -1j * s * (theta[..., 0] - 1j * theta[..., 1])
    u[..., 1, 0] = -1j * s * (theta[..., 0] + 1j * theta[..., 1])
    return u


def su2_log(u):
    """Principal logarithm in exponential coordinates, |theta| in [0, 2 pi]."""
    u = np.asarray(u, dtype=complex)
    a = 0.5 * np.real(u[..., 0, 0] + u[..., 1, 1])
    bn = np.stack(
        [np.real(0.5j * np.einsum("ij,...ji->...", _PAULI[k], u)) for k in range(3)],
        axis=-1,
    )
    b = np.linalg.norm(bn, axis=-1)
    phi = 2.0 * np.arctan2(b, a)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(b > 1e-14, phi / np.where(b > 0, b, 1.0), 2.0)
    return bn * scale[..., None]


def _skew(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def su2_field_matrix(theta):
    """Matrix whose k-th column is the left-invariant field of E_k in the chart."""
    theta = np.asarray(theta, dtype=float)
    phi = np.linalg.norm(theta, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = 1.0 / phi**2 - 1.0 / (2.0 * phi * np.tan(0.5 * phi))
    c = np.where(phi < 1e-3, 1.0 / 12.0 + phi**2 / 720.0, c)
    k = _skew(theta)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + 0.5 * k + c[..., None, None] * (k @ k)


def su2_volume_density(theta):
    """Haar (Riemannian) volume density of the exponential chart."""
    phi = np.linalg.norm(np.asarray(theta, dtype=float), axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = 2.0 * (1.0 - np.cos(phi)) / phi**2
    return np.where(phi < 1e-4, 1.0 - phi**2 / 12.0, w)


# --------------------------------------------------------------------------
# Spaces


@dataclass(frozen=True)
class ModelSpace:
    kind: str
    dimension: int
    period: tuple | None = None

    def __post_init__(self):
        expected = {"Torus2": 2, "Heisenberg3": 3, "SU2": 3}
        if expected.get(self.kind) != self.dimension:
            raise ValueError(f"dimension {self.dimension} does not match kind {self.kind}")

    @property
    def periodic(self):
        return self.period is not None

    def wrap(self, x):
        """Map points to the fundamental domain of the chart."""
        x = np.asarray(x, dtype=float)
        if self.kind == "Torus2":
            p = np.asarray(self.period)
            return np.mod(x, p)
        if self.kind == "SU2":
            return su2_log(su2_exp(x))
        return x

    def displacement(self, x, y):
        """Chart displacement from x to y (shortest representative on the torus)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.kind == "Torus2":
            p = np.asarray(self.period)
            d = y - x
            return d - p * np.round(d / p)
        if self.kind == "SU2":
            return su2_log(np.conj(np.swapaxes(su2_exp(x), -1, -2)) @ su2_exp(y))
        return y - x

    def distance(self, x, y):
        """Riemannian distance rho(x, y)."""
        return np.linalg.norm(self.displacement(x, y), axis=-1)

    def metric(self, x):
        """Riemannian metric tensor in chart coordinates, shape (..., d, d)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "SU2":
            inv = np.linalg.inv(su2_field_matrix(x))
            return np.swapaxes(inv, -1, -2) @ inv
        return np.broadcast_to(np.eye(self.dimension), x.shape[:-1] + (self.dimension,) * 2)

    def volume_density(self, x):
        """Density of the volume measure with respect to chart Lebesgue measure."""
        x = np.asarray(x, dtype=float)
        if self.kind == "SU2":
            return su2_volume_density(x)
        return np.ones(x.shape[:-1])

    def embed(self, x):
        """Euclidean embedding used by distance-based two-sample statistics."""
        x = np.asarray(x, dtype=float)
        if self.kind == "Torus2":
            ang = 2 * np.pi * x / np.asarray(self.period)
            return np.concatenate([np.cos(ang), np.sin(ang)], axis=-1) * (
                np.asarray(self.period).max() / (2 * np.pi)
            )
        if self.kind == "SU2":
            u = su2_exp(x)
            return np.stack(
                [u[..., 0, 0].real, u[..., 0, 0].imag, u[..., 0, 1].real, u[..., 0, 1].imag],
                axis=-1,
            )
        return x


TORUS = ModelSpace("Torus2", 2, (1.0, 1.0))
HEISENBERG = ModelSpace("Heisenberg3", 3, None)
SU2 = ModelSpace("SU2", 3, None)

_SYMBOLS = {2: sp.symbols("x y"), 3: sp.symbols("x y z")}


def coordinate_symbols(dim):
    return _SYMBOLS[dim]


# --------------------------------------------------------------------------
# Fields


@dataclass(frozen=True, eq=False)
class VectorField:
    """A smooth vector field on a chart.

    At most one of ``expr`` (sympy column of components in the coordinate
    symbols) and ``algebra`` (Lie-algebra vector of a left-invariant field on
    SU(2)) is set; fields with neither are evaluated numerically only.
    """

    func: Callable
    dim: int
    name: str = ""
    expr: sp.Matrix | None = None
    algebra: np.ndarray | None = None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = self.func(x)
        return np.broadcast_to(out, x.shape[:-1] + (self.dim,))

    @property
    def symbolic(self):
        return self.expr is not None or self.algebra is not None

    def __neg__(self):
        return scale_field(-1.0, self)


def symbolic_field(components, dim, name=""):
    """Build a field from sympy-compatible component expressions."""
    syms = coordinate_symbols(dim)
    expr = sp.Matrix([sp.sympify(c, locals=dict(zip(map(str, syms), syms))) for c in components])
    fns = [sp.lambdify(syms, e, "numpy") for e in expr]

    def func(x):
        cols = [x[..., i] for i in range(dim)]
        return np.stack([np.broadcast_to(np.asarray(f(*cols), dtype=float), x.shape[:-1]) for f in fns], axis=-1)

    return VectorField(func, dim, name, expr=expr)


def algebra_field(vec, name=""):
    """Left-invariant field on SU(2) generated by sum_k vec_k E_k."""
    vec = np.asarray(vec, dtype=float)

    def func(x):
        return su2_field_matrix(x) @ vec

    return VectorField(func, 3, name, algebra=vec)


def zero_field(dim):
    return symbolic_field([0] * dim, dim, "0")


def scale_field(c, X):
    if X.expr is not None:
        return symbolic_field(list(c * X.expr), X.dim, f"{c}*{X.name}")
    if X.algebra is not None:
        return algebra_field(c * X.algebra, f"{c}*{X.name}")
    return VectorField(lambda x: c * X(x), X.dim, f"{c}*{X.name}")


def _jacobian_fd(X, x):
    """Central-difference Jacobian DX(x), shape (..., d, d) with [i, j] = dX_i/dx_j."""
    x = np.asarray(x, dtype=float)
    h = fd_step(x)
    cols = []
    for j in range(X.dim):
        e = np.zeros(X.dim)
        e[j] = 1.0
        cols.append((X(x + h * e) - X(x - h * e)) / (2 * h))
    return np.stack(cols, axis=-1)


def _check_finite(v, x, what):
    bad = ~np.all(np.isfinite(v), axis=-1)
    if np.any(bad):
        loc = np.asarray(x)[bad][0] if np.ndim(x) > 1 else x
        raise EvaluationError(f"non-finite {what} near {np.asarray(loc).tolist()}")


def bracket_field(X, Y, backend="auto"):
    """The commutator field [X, Y] = (DY) X - (DX) Y."""
    if backend not in ("auto", "symbolic", "fd"):
        raise ValueError(f"unknown backend {backend!r}")
    name = f"[{X.name},{Y.name}]"
    if backend != "fd":
        if X.expr is not None and Y.expr is not None:
            syms = coordinate_symbols(X.dim)
            jx = X.expr.jacobian(syms)
            jy = Y.expr.jacobian(syms)
            comp = sp.simplify(jy * X.expr - jx * Y.expr)
            return symbolic_field(list(comp), X.dim, name)
        if X.algebra is not None and Y.algebra is not None:
            return algebra_field(np.cross(X.algebra, Y.algebra), name)
        if backend == "symbolic":
            raise ValueError("symbolic bracket needs two symbolic fields")

    def func(x):
        return np.einsum("...ij,...j->...i", _jacobian_fd(Y, x), X(x)) - np.einsum(
            "...ij,...j->...i", _jacobian_fd(X, x), Y(x)
        )

    return VectorField(func, X.dim, name)


def lie_bracket(X, Y, x, backend="auto"):
    """Evaluate [X, Y] at the point(s) x."""
    x = np.asarray(x, dtype=float)
    for F, nm in ((X, "X"), (Y, "Y")):
        _check_finite(F(x), x, f"field {nm}")
    v = bracket_field(X, Y, backend)(x)
    _check_finite(v, x, "bracket")
    return v


# --------------------------------------------------------------------------
# Systems


@dataclass(frozen=True, eq=False)
class VectorFieldSystem:
    """Drift X0 and diffusion fields X1..Xm on a model space.

    The generator is 1/2 sum_k X_k X_k + X0.
    """

    space: ModelSpace
    drift: VectorField
    diffusion: tuple
    name: str = ""
    coefficients: tuple | None = None
    options: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.space.dimension

    @property
    def diffusion_count(self):
        return len(self.diffusion)

    def sigma(self, x):
        """Diffusion matrix with columns X_k(x), shape (..., d, m)."""
        return np.stack([X(x) for X in self.diffusion], axis=-1)

    def fields(self):
        return (self.drift,) + tuple(self.diffusion)

    def check_coefficients(self, x, tol=1e-10):
        """Return max |X0 - sum_k c_k X_k| over the points x (0 when no coefficients)."""
        if self.coefficients is None:
            return 0.0
        x = np.asarray(x, dtype=float)
        comb = sum(c(x)[..., None] * X(x) for c, X in zip(self.coefficients, self.diffusion))
        return float(np.max(np.abs(self.drift(x) - comb)))

    @property
    def is_symmetric(self):
        """True when the drift is identically zero and all fields are divergence free.

        Only decided for symbolic systems; numeric ones report False.
        """
        return bool(self.options.get("symmetric", False))


@dataclass(frozen=True)
class BracketTable:
    """Bracket words up to ``max_level`` mapped to their fields.

    Words are nested tuples of 1-based diffusion indices, e.g. ``1``,
    ``(1, 2)`` for [X1, X2] and ``((1, 2), 1)`` for [[X1, X2], X1].
    """

    entries: dict
    max_level: int

    def level_words(self, k):
        return [w for w in self.entries if word_level(w) == k]


def word_level(w):
    return 1 if isinstance(w, int) else word_level(w[0]) + word_level(w[1])


def bracket_table(sys, max_level, backend="auto"):
    entries = {i + 1: X for i, X in enumerate(sys.diffusion)}
    prev = list(entries)
    for _ in range(2, max_level + 1):
        new = []
        for w in prev:
            for i in range(1, sys.diffusion_count + 1):
                if w == i:
                    continue
                key = (w, i)
                entries[key] = bracket_field(entries[w], entries[i], backend)
                new.append(key)
        prev = new
    return BracketTable(entries, max_level)


def _numerical_rank(vectors, tol=RANK_TOL):
    """Rank of the stacked vectors (..., k, d) with relative tolerance."""
    s = np.linalg.svd(vectors, compute_uv=False)
    smax = s[..., :1]
    return np.sum(s > tol * np.maximum(smax, 1e-300), axis=-1)


def hormander_level(sys, x, max_level=3, backend="auto", tol=RANK_TOL):
    """Smallest bracket level whose fields span the tangent space at x.

    Returns an int for a single point, an int array for a batch; 0 encodes
    "not spanned within max_level".
    """
    if max_level < 1:
        raise ValueError("max_level must be >= 1")
    x = np.asarray(x, dtype=float)
    table = bracket_table(sys, max_level, backend)
    out = np.zeros(x.shape[:-1], dtype=int)
    vecs = []
    for k in range(1, max_level + 1):
        for w in table.level_words(k):
            v = table.entries[w](x)
            _check_finite(v, x, f"bracket {w}")
            vecs.append(v)
        rank = _numerical_rank(np.stack(vecs, axis=-2), tol)
        newly = (out == 0) & (rank >= sys.dim)
        out = np.where(newly, k, out)
    return int(out) if out.ndim == 0 else out


NOT_SPANNED = 0


def divergence(sys, field_index, x):
    """Divergence of field ``field_index`` (0 = drift) with respect to the volume measure."""
    X = sys.fields()[field_index]
    return field_divergence(X, sys.space, x)


def field_divergence(X, space, x):
    x = np.asarray(x, dtype=float)
    if X.algebra is not None:
        # left-invariant fields on a unimodular group preserve Haar measure
        return np.zeros(x.shape[:-1])
    if X.expr is not None and space.kind != "SU2":
        syms = coordinate_symbols(X.dim)
        div = sum(sp.diff(X.expr[i], s) for i, s in enumerate(syms))
        f = sp.lambdify(syms, div, "numpy")
        return np.broadcast_to(np.asarray(f(*[x[..., i] for i in range(X.dim)]), float), x.shape[:-1]).copy()
    h = fd_step(x)
    w0 = space.volume_density(x)
    total = np.zeros(x.shape[:-1])
    for j in range(X.dim):
        e = np.zeros(X.dim)
        e[j] = 1.0
        xp, xm = x + h * e, x - h * e
        total += (space.volume_density(xp) * X(xp)[..., j] - space.volume_density(xm) * X(xm)[..., j]) / (2 * h[..., 0])
    return total / w0


def _as_density(m, dim):
    """Normalise a density spec (constant, sympy expression/string, callable)."""
    if callable(m) and not isinstance(m, sp.Basic):
        return None, m
    syms = coordinate_symbols(dim)
    expr = sp.sympify(m, locals=dict(zip(map(str, syms), syms)))
    f = sp.lambdify(syms, expr, "numpy")
    return expr, lambda x: np.broadcast_to(np.asarray(f(*[x[..., i] for i in range(dim)]), float), x.shape[:-1])


def adjoint_system(sys, m=1, check_points=None):
    """System generating the time-reversed process with respect to density m.

    With respect to the measure m * vol the dual generator is
    1/2 sum X_k X_k + Xhat0 with
    Xhat0 = -X0 + sum_k (X_k log m + div X_k) X_k.
    ``m`` must be strictly positive; it is checked on ``check_points`` (a
    default sample of the chart when omitted).
    """
    expr, mfun = _as_density(m, sys.dim)
    if check_points is None:
        rng = np.random.default_rng(0)
        check_points = rng.uniform(-1, 1, size=(256, sys.dim))
        if sys.space.periodic:
            check_points = sys.space.wrap(check_points)
    vals = mfun(np.asarray(check_points, dtype=float))
    if np.any(~np.isfinite(vals)) or np.any(vals <= 0):
        raise ValueError("invariant density must be strictly positive")

    constant_m = expr is not None and not expr.free_symbols
    div_free = all(_is_div_free(X, sys.space) for X in sys.diffusion)
    if constant_m and div_free:
        drift = scale_field(-1.0, sys.drift)
    elif expr is not None and all(X.expr is not None for X in sys.fields()) and sys.space.kind != "SU2":
        syms = coordinate_symbols(sys.dim)
        logm = sp.log(expr)
        comp = -sys.drift.expr
        for X in sys.diffusion:
            xlogm = sum(X.expr[i] * sp.diff(logm, s) for i, s in enumerate(syms))
            divx = sum(sp.diff(X.expr[i], s) for i, s in enumerate(syms))
            comp = comp + (xlogm + divx) * X.expr
        drift = symbolic_field(list(sp.simplify(comp)), sys.dim, f"adj({sys.drift.name})")
    else:
        X0 = sys.drift
        space = sys.space

        def func(x):
            h = fd_step(x)
            out = -X0(x)
            for X in sys.diffusion:
                v = X(x)
                dlogm = (np.log(mfun(x + h * v)) - np.log(mfun(x - h * v))) / (2 * h[..., 0])
                out = out + (dlogm + field_divergence(X, space, x))[..., None] * v
            return out

        drift = VectorField(func, sys.dim, f"adj({sys.drift.name})")

    coeffs = None
    if sys.coefficients is not None and constant_m and div_free:
        coeffs = tuple((lambda c: (lambda x: -c(x)))(c) for c in sys.coefficients)
    opts = dict(sys.options)
    opts["adjoint_of"] = sys.name
    return VectorFieldSystem(sys.space, drift, tuple(sys.diffusion), f"adjoint({sys.name})", coeffs, opts)


def _is_div_free(X, space):
    if X.algebra is not None:
        return True
    if X.expr is not None and space.kind != "SU2":
        syms = coordinate_symbols(X.dim)
        return sp.simplify(sum(sp.diff(X.expr[i], s) for i, s in enumerate(syms))) == 0
    return False


# --------------------------------------------------------------------------
# Built-in models

MODEL_NAMES = ("torus-elliptic", "torus-grushin", "heisenberg", "su2")


def make_model(name, drift=None):
    """Construct a built-in system by name.

    ``drift`` is an optional list of component expressions (torus and
    Heisenberg) or an algebra vector (su2); it defaults to zero.
    """
    if name in ("torus-elliptic", "torus-grushin"):
        space = TORUS
        if name == "torus-elliptic":
            X1 = symbolic_field(["1", "0"], 2, "X1")
            X2 = symbolic_field(["0", "1"], 2, "X2")
        else:
            X1 = symbolic_field(["1", "0"], 2, "X1")
            X2 = symbolic_field(["0", "sin(2*pi*x)"], 2, "X2")
        diffusion = (X1, X2)
    elif name == "heisenberg":
        space = HEISENBERG
        diffusion = (symbolic_field(["1", "0", "0"], 3, "X1"), symbolic_field(["0", "1", "x"], 3, "X2"))
    elif name == "su2":
        space = SU2
        diffusion = (algebra_field([1, 0, 0], "X1"), algebra_field([0, 1, 0], "X2"))
    else:
        raise KeyError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")

    if drift is None:
        X0 = algebra_field([0, 0, 0], "X0") if name == "su2" else zero_field(space.dimension)
    elif name == "su2":
        X0 = algebra_field(drift, "X0")
    else:
        X0 = symbolic_field(list(drift), space.dimension, "X0")

    coeffs = _drift_coefficients(name, X0)
    zero_drift = (X0.expr is not None and all(sp.sympify(c) == 0 for c in X0.expr)) or (
        X0.algebra is not None and not np.any(X0.algebra)
    )
    opts = {"model": name, "drift": None if drift is None else [str(d) for d in np.atleast_1d(drift)]}
    opts["symmetric"] = bool(zero_drift and all(_is_div_free(X, space) for X in diffusion))
    return VectorFieldSystem(space, X0, diffusion, name, coeffs, opts)


def _drift_coefficients(name, X0):
    """Coefficients c_k with X0 = sum c_k X_k when they exist in closed form."""
    if X0.expr is None:
        if X0.algebra is not None and X0.algebra[2] == 0:
            a = X0.algebra
            return (lambda x: np.full(np.shape(x)[:-1], a[0]), lambda x: np.full(np.shape(x)[:-1], a[1]))
        return None
    comps = [sp.sympify(c) for c in X0.expr]
    x = coordinate_symbols(len(comps))[0]
    if name == "torus-elliptic":
        c = comps
    elif name == "torus-grushin":
        if comps[1] != 0:
            return None
        c = [comps[0], sp.Integer(0)]
    elif name == "heisenberg":
        # X0 = a X1 + b X2 needs z-component = x * y-component
        if sp.simplify(comps[2] - x * comps[1]) != 0:
            return None
        c = comps[:2]
    else:
        return None
    syms = coordinate_symbols(len(comps))
    fns = [sp.lambdify(syms, ci, "numpy") for ci in c]
    return tuple(
        (lambda f: (lambda p: np.broadcast_to(np.asarray(f(*[p[..., i] for i in range(p.shape[-1])]), float), p.shape[:-1])))(f)
        for f in fns
    )


def sample_points(space, n, seed=0, scale=1.0):
    """Deterministic sample of chart points for property checks."""
    rng = np.random.default_rng(seed)
    if space.kind == "Torus2":
        return rng.uniform(0, 1, size=(n, 2))
    if space.kind == "SU2":
        return rng.normal(scale=scale, size=(n, 3))
    return rng.uniform(-scale, scale, size=(n, space.dimension))


def all_words(m, level):
    """Right-normed words of exactly the given level (helper for tables)."""
    if level == 1:
        return list(range(1, m + 1))
    return [(w, i) for w in all_words(m, level - 1) for i in range(1, m + 1) if w != i]


def jacobi_residual(X, Y, Z, x, backend="auto"):
    """|[X,[Y,Z]] + [Y,[Z,X]] + [Z,[X,Y]]| at x."""
    a = bracket_field(X, bracket_field(Y, Z, backend), backend)(x)
    b = bracket_field(Y, bracket_field(Z, X, backend), backend)(x)
    c = bracket_field(Z, bracket_field(X, Y, backend), backend)(x)
    return np.linalg.norm(a + b + c, axis=-1)


__all__ = [
    "ModelSpace",
    "VectorField",
    "VectorFieldSystem",
    "BracketTable",
    "EvaluationError",
    "NOT_SPANNED",
    "MODEL_NAMES",
    "make_model",
    "lie_bracket",
    "bracket_field",
    "bracket_table",
    "hormander_level",
    "divergence",
    "adjoint_system",
    "symbolic_field",
    "algebra_field",
    "su2_exp",
    "su2_log",
    "sample_points",
    "jacobi_residual",
]

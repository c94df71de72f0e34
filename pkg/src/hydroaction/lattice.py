"""Particle models, external potentials and thermodynamic scalar functions.

A model is fixed by its rate factors ``g1``, ``g2`` (jump rates are
``g1(eta(i)) g2(eta(i')) exp(-(V(i'/L) - V(i/L)) / 2)``), its gradient
function ``dval`` and product reference weights ``nu_star``. Everything
macroscopic (``f``, ``phi``, ``chi``) follows from the exponential family
``nu_theta(n) ∝ exp(theta n) nu_star(n)`` of single-site laws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import (
    BoundaryError,
    ContractViolation,
    DivergenceError,
    InvalidConfigurationError,
)

__all__ = [
    "FourierSeries",
    "Envelope",
    "Potential",
    "LatticeModel",
    "TorusLattice",
    "ScalarFunctions",
    "jump_rate",
    "partition_Z1",
    "free_energy_density",
    "phi_chi",
    "rho_bar",
    "theta_of_density",
]

SERIES_TOL = 1e-12
ROOT_TOL = 1e-12
_MAX_TERMS = 200_000


# ---------------------------------------------------------------------------
# Potentials
# ---------------------------------------------------------------------------


def _as_points(u, dim):
    """Return ``(points of shape (n, dim), output shape)``."""
    u = np.asarray(u, dtype=float)
    if dim == 1:
        if u.ndim >= 1 and u.shape[-1:] == (1,) and u.ndim > 1:
            return u.reshape(-1, 1), u.shape[:-1]
        return u.reshape(-1, 1), u.shape
    if u.shape[-1] != dim:
        raise ContractViolation(f"points must have trailing dimension {dim}")
    return u.reshape(-1, dim), u.shape[:-1]


@dataclass(frozen=True)
class FourierSeries:
    """Truncated real Fourier series on the flat torus ``[0, 1)^d``.

    ``modes`` holds ``(k, a, b)`` triples with integer wave vector ``k``;
    the series is ``constant + sum a cos(2 pi k.u) + b sin(2 pi k.u)``.
    """

    modes: tuple = ()
    constant: float = 0.0
    dim: int = 1

    def __post_init__(self):
        norm = []
        for k, a, b in self.modes:
            k = tuple(int(x) for x in np.atleast_1d(k))
            if len(k) != self.dim:
                raise ContractViolation(f"wave vector {k} does not match dim={self.dim}")
            norm.append((k, float(a), float(b)))
        object.__setattr__(self, "modes", tuple(norm))
        object.__setattr__(self, "constant", float(self.constant))

    @classmethod
    def zero(cls, dim=1):
        return cls((), 0.0, dim)

    @classmethod
    def cosine(cls, amplitude, k=1, dim=1):
        kv = (k,) + (0,) * (dim - 1) if np.isscalar(k) else tuple(k)
        return cls(((kv, amplitude, 0.0),), 0.0, dim)

    @property
    def is_zero(self):
        return self.constant == 0.0 and all(a == 0.0 and b == 0.0 for _, a, b in self.modes)

    def _phases(self, pts):
        if not self.modes:
            return np.zeros((pts.shape[0], 0)), np.zeros((0, self.dim))
        K = np.array([k for k, _, _ in self.modes], dtype=float)
        return 2.0 * np.pi * pts @ K.T, K

    def __call__(self, u):
        pts, shape = _as_points(u, self.dim)
        out = np.full(pts.shape[0], self.constant)
        if self.modes:
            ph, _ = self._phases(pts)
            a = np.array([m[1] for m in self.modes])
            b = np.array([m[2] for m in self.modes])
            out = out + np.cos(ph) @ a + np.sin(ph) @ b
        return out.reshape(shape)

    def gradient(self, u):
        """Analytic gradient, shape ``(..., dim)``."""
        pts, shape = _as_points(u, self.dim)
        out = np.zeros((pts.shape[0], self.dim))
        if self.modes:
            ph, K = self._phases(pts)
            a = np.array([m[1] for m in self.modes])
            b = np.array([m[2] for m in self.modes])
            coef = -np.sin(ph) * a + np.cos(ph) * b
            out = 2.0 * np.pi * coef @ K
        return out.reshape(shape + (self.dim,))

    def laplacian(self, u):
        pts, shape = _as_points(u, self.dim)
        out = np.zeros(pts.shape[0])
        if self.modes:
            ph, K = self._phases(pts)
            a = np.array([m[1] for m in self.modes])
            b = np.array([m[2] for m in self.modes])
            k2 = (2.0 * np.pi) ** 2 * np.sum(K * K, axis=1)
            out = -(np.cos(ph) @ (a * k2) + np.sin(ph) @ (b * k2))
        return out.reshape(shape)

    def cell_average(self, grid_shape):
        """Exact averages over the cells of a uniform ``M^d`` grid."""
        grid_shape = tuple(grid_shape)
        centers = cell_centers(grid_shape)
        out = np.full(centers.shape[:-1], self.constant)
        for k, a, b in self.modes:
            damp = 1.0
            for kk, m in zip(k, grid_shape):
                damp *= np.sinc(kk / m)  # np.sinc(x) = sin(pi x)/(pi x)
            ph = 2.0 * np.pi * centers @ np.asarray(k, dtype=float)
            out = out + damp * (a * np.cos(ph) + b * np.sin(ph))
        return out

    def to_dict(self):
        return {
            "constant": self.constant,
            "modes": [
                {"k": list(k) if self.dim > 1 else k[0], "cos": a, "sin": b}
                for k, a, b in self.modes
            ],
        }

    @classmethod
    def from_dict(cls, data, dim=1):
        modes = [(m["k"], m.get("cos", 0.0), m.get("sin", 0.0)) for m in data.get("modes", [])]
        return cls(tuple(modes), data.get("constant", 0.0), dim)


def cell_centers(grid_shape):
    """Cell centres of a uniform grid on ``[0,1)^d``, shape ``grid_shape + (d,)``."""
    axes = [(np.arange(m) + 0.5) / m for m in grid_shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack(mesh, axis=-1)


@dataclass(frozen=True)
class Envelope:
    """Scalar time envelope ``s(t)`` multiplying the tilt.

    kinds: ``constant`` (``value``), ``polynomial`` (``coeffs`` in ascending
    powers) and ``cosine`` (``offset + amplitude cos(omega t + phase)``).
    """

    kind: str = "constant"
    value: float = 1.0
    coeffs: tuple = ()
    amplitude: float = 0.0
    omega: float = 0.0
    phase: float = 0.0
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "polynomial", "cosine"):
            raise ContractViolation(f"unknown envelope kind {self.kind!r}")
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))

    @property
    def is_constant(self):
        if self.kind == "constant":
            return True
        if self.kind == "polynomial":
            return all(c == 0.0 for c in self.coeffs[1:])
        return self.amplitude == 0.0 or self.omega == 0.0

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return np.full_like(t, self.value)
        if self.kind == "polynomial":
            return np.polynomial.polynomial.polyval(t, self.coeffs) if self.coeffs else np.zeros_like(t)
        return self.offset + self.amplitude * np.cos(self.omega * t + self.phase)

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return np.zeros_like(t)
        if self.kind == "polynomial":
            if len(self.coeffs) < 2:
                return np.zeros_like(t)
            return np.polynomial.polynomial.polyval(t, np.polynomial.polynomial.polyder(self.coeffs))
        return -self.amplitude * self.omega * np.sin(self.omega * t + self.phase)

    def abs_bound(self, T):
        """Rigorous upper bound on ``|s(t)|`` for ``t`` in ``[0, T]``."""
        if self.kind == "constant":
            return abs(self.value)
        if self.kind == "polynomial":
            return float(sum(abs(c) * T**n for n, c in enumerate(self.coeffs)))
        return abs(self.offset) + abs(self.amplitude)

    def to_dict(self):
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        if self.kind == "polynomial":
            return {"kind": "polynomial", "coeffs": list(self.coeffs)}
        return {
            "kind": "cosine",
            "amplitude": self.amplitude,
            "omega": self.omega,
            "phase": self.phase,
            "offset": self.offset,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        kind = data.pop("kind", "constant")
        if "coeffs" in data:
            data["coeffs"] = tuple(data["coeffs"])
        return cls(kind=kind, **data)


@dataclass(frozen=True)
class Potential:
    """Time-dependent potential ``V(u) + s(t) H(u)``."""

    V: FourierSeries = field(default_factory=FourierSeries)
    H: FourierSeries = field(default_factory=FourierSeries)
    envelope: Envelope = field(default_factory=Envelope)

    def __post_init__(self):
        if self.V.dim != self.H.dim:
            raise ContractViolation("V and H must live in the same dimension")

    @classmethod
    def zero(cls, dim=1):
        return cls(FourierSeries.zero(dim), FourierSeries.zero(dim), Envelope())

    @classmethod
    def static(cls, V):
        return cls(V, FourierSeries.zero(V.dim), Envelope())

    @property
    def dim(self):
        return self.V.dim

    @property
    def is_static(self):
        return self.H.is_zero or (self.envelope.is_constant and self.envelope(0.0) == 0.0)

    @property
    def is_time_independent(self):
        return self.H.is_zero or self.envelope.is_constant

    def static_part(self):
        return Potential.static(self.V)

    def with_tilt(self, H, envelope=None):
        """Reference potential plus an extra tilt ``H`` (replaces any existing tilt)."""
        return Potential(self.V, H, envelope if envelope is not None else Envelope())

    def __call__(self, t, u):
        out = self.V(u)
        if not self.H.is_zero:
            out = out + float(self.envelope(t)) * self.H(u)
        return out

    def dt(self, t, u):
        if self.H.is_zero:
            return np.zeros(np.shape(self.V(u)))
        return float(self.envelope.derivative(t)) * self.H(u)

    def gradient(self, t, u):
        out = self.V.gradient(u)
        if not self.H.is_zero:
            out = out + float(self.envelope(t)) * self.H.gradient(u)
        return out

    def laplacian(self, t, u):
        out = self.V.laplacian(u)
        if not self.H.is_zero:
            out = out + float(self.envelope(t)) * self.H.laplacian(u)
        return out

    def to_dict(self):
        return {"V": self.V.to_dict(), "H": self.H.to_dict(), "envelope": self.envelope.to_dict()}


# ---------------------------------------------------------------------------
# Lattice and models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TorusLattice:
    """The discrete torus ``Z^d / L Z^d`` with flat (C-order) site indices."""

    L: int
    dim: int = 1

    def __post_init__(self):
        if self.L < 2:
            raise ContractViolation("L must be at least 2")
        if self.dim < 1:
            raise ContractViolation("dimension must be positive")

    @property
    def shape(self):
        return (self.L,) * self.dim

    @property
    def n_sites(self):
        return self.L**self.dim

    @cached_property
    def coords(self):
        return np.stack(np.unravel_index(np.arange(self.n_sites), self.shape), axis=-1)

    @cached_property
    def positions(self):
        """Macroscopic positions ``i / L``, shape ``(n_sites, dim)``."""
        return self.coords / self.L

    def shift(self, k, sign=1):
        """Flat index of ``i + sign e_k`` for every site ``i``."""
        c = self.coords.copy()
        c[:, k] = (c[:, k] + sign) % self.L
        return np.ravel_multi_index(c.T, self.shape)

    def index(self, site):
        if np.isscalar(site):
            if self.dim != 1:
                raise ContractViolation("scalar site index only allowed in d=1")
            return int(site) % self.L
        return int(np.ravel_multi_index(tuple(int(x) % self.L for x in site), self.shape))

    def adjacent(self, i, j):
        ci = self.coords[i]
        cj = self.coords[j]
        diff = (cj - ci) % self.L
        nonzero = np.flatnonzero(diff)
        return len(nonzero) == 1 and diff[nonzero[0]] in (1, self.L - 1)


@dataclass(frozen=True)
class LatticeModel:
    """A gradient-type particle model with product-form rates.

    ``kind`` is ``"zrp"`` or ``"sep"``. For the ZRP, ``g_table`` lists
    ``g(1), g(2), ...``; beyond the table ``g`` is extended linearly with the
    last increment. ``g_table=None`` is the builtin linear rate ``g(k) = k``
    (independent random walkers).
    """

    kind: str
    dim: int = 1
    g_table: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("zrp", "sep"):
            raise ContractViolation(f"unknown model kind {self.kind!r}")
        if self.dim < 1:
            raise ContractViolation("dimension must be positive")
        if self.g_table is not None:
            if self.kind != "zrp":
                raise ContractViolation("a rate table only applies to the ZRP")
            object.__setattr__(self, "g_table", tuple(float(x) for x in self.g_table))
            if len(self.g_table) == 0:
                raise ContractViolation("empty rate table")
            if min(self.g_table) <= 0.0:
                raise ContractViolation("rates g(k) must be positive for k >= 1")

    @classmethod
    def sep(cls, dim=1):
        return cls("sep", dim)

    @classmethod
    def zrp(cls, g="linear", dim=1):
        if isinstance(g, str):
            if g != "linear":
                raise ContractViolation(f"unknown builtin rate {g!r}")
            return cls("zrp", dim, None)
        return cls("zrp", dim, tuple(g))

    @property
    def name(self):
        if self.kind == "sep":
            return "sep"
        return "zrp-linear" if self.is_linear_zrp else "zrp-table"

    @property
    def is_linear_zrp(self):
        return self.kind == "zrp" and self.g_table is None

    @property
    def n_max(self):
        """Maximal occupancy, ``None`` if unbounded."""
        return 1 if self.kind == "sep" else None

    def g(self, n):
        """ZRP rate ``g(n)`` (``g(0) = 0``)."""
        n = np.asarray(n)
        if self.g_table is None:
            return n.astype(float)
        tab = np.concatenate([[0.0], self.g_table])
        last = len(tab) - 1
        inc = tab[-1] - tab[-2]
        nn = np.minimum(n, last)
        out = tab[nn]
        return np.where(n > last, tab[-1] + (n - last) * inc, out)

    def g1(self, n):
        n = np.asarray(n)
        if self.kind == "sep":
            return (n == 1).astype(float)
        return self.g(n)

    def g2(self, n):
        n = np.asarray(n)
        if self.kind == "sep":
            return (n == 0).astype(float)
        return np.ones(n.shape)

    def dval(self, n):
        """Gradient function ``d``: ``g1`` for the ZRP, ``n`` for the SEP."""
        n = np.asarray(n)
        if self.kind == "sep":
            return n.astype(float)
        return self.g(n)

    def log_nu_star(self, n_terms):
        """``log nu_{*,1}(n)`` for ``n = 0 .. n_terms-1``."""
        if self.kind == "sep":
            return np.zeros(min(n_terms, 2))
        n = np.arange(n_terms)
        if self.g_table is None:
            return -gammaln(n + 1.0)
        gk = self.g(n[1:])
        with np.errstate(divide="ignore", invalid="ignore"):
            logs = np.log(gk)
        return np.concatenate([[0.0], -np.cumsum(logs)])

    def check_configuration(self, eta):
        eta = np.asarray(eta)
        if eta.size and (eta.min() < 0 or (self.n_max is not None and eta.max() > self.n_max)):
            raise InvalidConfigurationError(
                f"occupation numbers must lie in [0, {self.n_max if self.n_max is not None else 'inf'}]"
            )
        if not np.issubdtype(eta.dtype, np.integer) and np.any(eta != np.round(eta)):
            raise InvalidConfigurationError("occupation numbers must be integers")

    def rate_monotonicity(self, n_check=64):
        """Margins of the ZRP rate assumptions on ``k = 0 .. n_check``.

        Returns ``(min increment, max increment)``; valid models need
        ``0 < min`` (the max is the constant ``g*``).
        """
        if self.kind == "sep":
            return 1.0, 1.0
        inc = np.diff(self.g(np.arange(n_check + 1)))
        return float(inc.min()), float(inc.max())

    def to_dict(self):
        d = {"kind": self.kind, "dim": self.dim}
        if self.kind == "zrp":
            d["g"] = "linear" if self.g_table is None else list(self.g_table)
        return d


# ---------------------------------------------------------------------------
# Rates
# ---------------------------------------------------------------------------


def jump_rate(model, pot, t, eta, i, i_prime):
    """Unscaled jump rate of one particle from site ``i`` to ``i_prime``.

    ``eta`` has shape ``(L,)*d``; sites are coordinate tuples (or ints in
    d=1). The caller applies the parabolic factor ``L**2``.
    """
    eta = np.asarray(eta)
    model.check_configuration(eta)
    L = eta.shape[0]
    lat = TorusLattice(L, eta.ndim)
    a, b = lat.index(i), lat.index(i_prime)
    if not lat.adjacent(a, b):
        raise ContractViolation(f"sites {i} and {i_prime} are not nearest neighbours")
    flat = eta.reshape(-1)
    ua, ub = lat.positions[a], lat.positions[b]
    dv = float(pot(t, ub[None, :] if lat.dim > 1 else ub[:1])[0] - pot(t, ua[None, :] if lat.dim > 1 else ua[:1])[0])
    return float(model.g1(flat[a]) * model.g2(flat[b]) * math.exp(-0.5 * dv))


# ---------------------------------------------------------------------------
# Single-site exponential family
# ---------------------------------------------------------------------------


def _truncation(model, theta, tol=SERIES_TOL):
    """Number of terms needed so the geometric tail bound is below ``tol``.

    The bound is relative to the partial sum. ZRP terms ``t_n`` have ratios
    ``q_n = e^theta / g(n)`` decreasing in ``n``, so once ``q_{n+1} < 1`` the
    tail after ``n`` is at most ``t_{n+1} / (1 - q_{n+1})``.
    """
    if model.kind == "sep":
        return 2
    theta = float(np.max(theta))
    log_t = 0.0  # log t_0 with nu_star(0) = 1
    log_s = 0.0
    n = 0
    chunk = 256
    while n < _MAX_TERMS:
        ks = np.arange(n + 1, n + 1 + chunk)
        gk = model.g(ks)
        if np.any(gk <= 0):
            raise DivergenceError("rates must be positive for k >= 1")
        log_q = theta - np.log(gk)
        for idx in range(chunk):
            lq = log_q[idx]
            log_next = log_t + lq
            if lq < 0.0:
                # log(1 - q) without cancellation when q is within rounding of 1
                if log_next - math.log(-math.expm1(lq)) - log_s < math.log(tol):
                    return n + 1
            log_t = log_next
            log_s = np.logaddexp(log_s, log_t)
            n += 1
    raise DivergenceError(
        f"partition series did not converge within {_MAX_TERMS} terms at theta={theta:g}"
    )


def partition_Z1(model, theta, tol=SERIES_TOL, full_output=False):
    """One-site partition function ``sum_n exp(theta n) nu_star(n)``.

    With ``full_output`` also returns the truncation index (number of
    retained terms).
    """
    n_terms = _truncation(model, theta, tol)
    logw = float(theta) * np.arange(n_terms) + model.log_nu_star(n_terms)
    z = float(np.exp(logsumexp(logw)))
    if full_output:
        return z, n_terms
    return z


class _Family:
    """Moments of ``nu_theta`` for a vector of ``theta`` values."""

    def __init__(self, model, theta, tol=SERIES_TOL, log_nu=None):
        # a precomputed ``log_nu`` must be truncated for the largest theta
        self.theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if log_nu is None:
            log_nu = model.log_nu_star(_truncation(model, self.theta, tol))
        self.n_terms = log_nu.size
        n = np.arange(self.n_terms)
        self.n = n
        logw = self.theta[:, None] * n[None, :] + log_nu[None, :]
        top = logw.max(axis=1)
        self.log_z = top + np.log(np.sum(np.exp(logw - top[:, None]), axis=1))
        self.w = np.exp(logw - self.log_z[:, None])
        self.mean = self.w @ n
        self.var = self.w @ (n * n) - self.mean**2
        self.model = model

    def expect(self, values):
        return self.w @ values

    def cov_n(self, values):
        return self.w @ (values * self.n) - self.expect(values) * self.mean


def _mean_of_theta(model, theta):
    return _Family(model, theta).mean


def theta_of_density(model, a, tol=ROOT_TOL):
    """Solve the mean equation ``Z1'(theta)/Z1(theta) = a`` for ``theta = f'(a)``.

    Safeguarded Newton on a bisection bracket, vectorised over ``a``.
    """
    a = np.asarray(a, dtype=float)
    flat = np.atleast_1d(a).ravel()
    _check_interior(model, flat)
    if model.kind == "sep":
        return np.log(a / (1.0 - a))
    lo = np.full(flat.shape, -1.0)
    hi = np.full(flat.shape, 1.0)
    for _ in range(200):
        m = _mean_of_theta(model, lo)
        bad = m > flat
        if not bad.any():
            break
        lo[bad] -= 2.0 * (1.0 + np.abs(lo[bad]))
    for _ in range(200):
        m = _mean_of_theta(model, hi)
        bad = m < flat
        if not bad.any():
            break
        hi[bad] += 2.0 * (1.0 + np.abs(hi[bad]))
    th = 0.5 * (lo + hi)
    # the tail bound grows with theta, so one truncation at the bracket top serves every iterate
    log_nu = model.log_nu_star(_truncation(model, hi))
    active = np.arange(flat.size)
    for _ in range(200):
        t_a, lo_a, hi_a, y_a = th[active], lo[active], hi[active], flat[active]
        fam = _Family(model, t_a, log_nu=log_nu)
        r = fam.mean - y_a
        lo_a = np.where(r < 0, t_a, lo_a)
        hi_a = np.where(r > 0, t_a, hi_a)
        # converged, or the bracket has collapsed to a few ulps (the series
        # truncation then dominates the residual); finished entries are frozen
        collapsed = (hi_a - lo_a) <= 8.0 * np.spacing(np.maximum(np.abs(lo_a), np.abs(hi_a)))
        done = (np.abs(r) < tol * np.maximum(1.0, y_a)) | collapsed
        step = t_a - r / np.maximum(fam.var, 1e-300)
        ok = (step >= lo_a) & (step <= hi_a)
        th[active] = np.where(done, t_a, np.where(ok, step, 0.5 * (lo_a + hi_a)))
        lo[active], hi[active] = lo_a, hi_a
        active = active[~done]
        if active.size == 0:
            break
    else:  # pragma: no cover - the bracket always converges
        raise DivergenceError("mean equation did not converge")
    return th.reshape(a.shape) if a.ndim else float(th[0])


def _check_interior(model, a):
    a = np.asarray(a)
    upper = model.n_max
    if np.any(~np.isfinite(a)) or np.any(a <= 0.0) or (upper is not None and np.any(a >= upper)):
        raise BoundaryError(
            f"density must lie in the open interval (0, {upper if upper is not None else 'inf'}); "
            "f' diverges at the boundary"
        )


def free_energy_density(model, a):
    """Return ``(f(a), f'(a), f''(a))`` from the Legendre transform of ``log Z1``."""
    a_arr = np.asarray(a, dtype=float)
    th = np.atleast_1d(theta_of_density(model, a_arr))
    fam = _Family(model, th.ravel())
    aa = np.atleast_1d(a_arr).ravel()
    f = aa * fam.theta - fam.log_z
    fpp = 1.0 / fam.var
    shape = a_arr.shape
    if not shape:
        return float(f[0]), float(fam.theta[0]), float(fpp[0])
    return f.reshape(shape), fam.theta.reshape(shape), fpp.reshape(shape)


def phi_chi(model, alpha, full_output=False):
    """``phi(alpha) = E[d]`` and ``chi(alpha) = E[g1] E[g2]`` under ``nu_{alpha,1}``.

    With ``full_output`` a dict with the derivatives (through
    ``dE[h]/dalpha = Cov(h, n) / Var(n)``) and the truncation size is returned.
    """
    a_arr = np.asarray(alpha, dtype=float)
    # block densities repeat heavily; solve once per distinct value
    uniq, inv = np.unique(np.atleast_1d(a_arr).ravel(), return_inverse=True)
    th = np.atleast_1d(theta_of_density(model, uniq)).ravel()
    fam = _Family(model, th)
    n = fam.n
    d, g1, g2 = model.dval(n), model.g1(n), model.g2(n)
    phi = fam.expect(d)
    e1, e2 = fam.expect(g1), fam.expect(g2)
    chi = e1 * e2
    shape = a_arr.shape

    def _r(x):
        x = np.asarray(x)[inv]
        return float(x[0]) if not shape else x.reshape(shape)

    if not full_output:
        return _r(phi), _r(chi)
    phi_p = fam.cov_n(d) / fam.var
    chi_p = (fam.cov_n(g1) * e2 + e1 * fam.cov_n(g2)) / fam.var
    return {
        "phi": _r(phi),
        "chi": _r(chi),
        "phi_prime": _r(phi_p),
        "chi_prime": _r(chi_p),
        "f_second": _r(1.0 / fam.var),
        "n_terms": fam.n_terms,
    }


def rho_bar(model, alpha, pot, u, t=0.0):
    """Stationary density ``(f')^{-1}(f'(alpha) - V(u))`` of the tilted measure."""
    theta0 = theta_of_density(model, alpha)
    v = np.asarray(pot(t, u) if isinstance(pot, Potential) else pot(u), dtype=float)
    th = theta0 - v
    if model.kind == "sep":
        return 1.0 / (1.0 + np.exp(-th))
    fam = _Family(model, np.atleast_1d(th).ravel())
    return fam.mean.reshape(v.shape) if v.ndim else float(fam.mean[0])


# ---------------------------------------------------------------------------
# Macroscopic scalar functions
# ---------------------------------------------------------------------------


class ScalarFunctions:
    """Vectorised ``f, f', f'', phi, chi`` and friends for one model.

    The SEP and the linear ZRP use closed forms (fast, and exact at the
    boundary of machine precision); other models go through the generic
    exponential-family solver. ``closed_form=False`` forces the generic path.
    """

    def __init__(self, model, closed_form=True, density_max=10.0, grid_size=400):
        self.model = model
        self.closed = closed_form and (model.kind == "sep" or model.is_linear_zrp)
        self.density_max = float(model.n_max) if model.n_max is not None else float(density_max)
        self._grid_size = grid_size

    @property
    def n_max(self):
        return self.model.n_max

    def f(self, a):
        a = np.asarray(a, dtype=float)
        if self.closed:
            _check_interior(self.model, a)
            if self.model.kind == "sep":
                return a * np.log(a) + (1 - a) * np.log1p(-a)
            return a * np.log(a) - a
        return free_energy_density(self.model, a)[0]

    def f_prime(self, a):
        a = np.asarray(a, dtype=float)
        if self.closed:
            _check_interior(self.model, a)
            if self.model.kind == "sep":
                return np.log(a) - np.log1p(-a)
            return np.log(a)
        return theta_of_density(self.model, a)

    def f_second(self, a):
        a = np.asarray(a, dtype=float)
        if self.closed:
            _check_interior(self.model, a)
            if self.model.kind == "sep":
                return 1.0 / (a * (1 - a))
            return 1.0 / a
        return free_energy_density(self.model, a)[2]

    def f_prime_inverse(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.model.kind == "sep":
            return 1.0 / (1.0 + np.exp(-theta))
        if self.closed:
            return np.exp(theta)
        fam = _Family(self.model, np.atleast_1d(theta).ravel())
        return fam.mean.reshape(theta.shape) if theta.ndim else float(fam.mean[0])

    def phi(self, a):
        a = np.asarray(a, dtype=float)
        if self.closed:
            return a.copy() if a.ndim else float(a)
        return phi_chi(self.model, a)[0]

    def chi(self, a):
        a = np.asarray(a, dtype=float)
        if self.closed:
            if self.model.kind == "sep":
                return a * (1 - a)
            return a.copy() if a.ndim else float(a)
        return phi_chi(self.model, a)[1]

    def phi_prime(self, a):
        a = np.asarray(a, dtype=float)
        if self.closed:
            return np.ones_like(a)
        return phi_chi(self.model, a, full_output=True)["phi_prime"]

    def chi_prime(self, a):
        a = np.asarray(a, dtype=float)
        if self.closed:
            return 1 - 2 * a if self.model.kind == "sep" else np.ones_like(a)
        return phi_chi(self.model, a, full_output=True)["chi_prime"]

    def phi_inverse(self, y):
        """Inverse of the strictly increasing ``phi``, by bracketed root finding."""
        y = np.asarray(y, dtype=float)
        if self.closed:
            return y.copy() if y.ndim else float(y)
        flat = np.atleast_1d(y).ravel()
        lo = np.full(flat.shape, 1e-12)
        hi = np.full(flat.shape, self.density_max)
        if self.n_max is not None:
            hi[:] = self.n_max - 1e-12
        else:
            while np.any(self.phi(hi) < flat):
                hi = np.where(self.phi(hi) < flat, 2 * hi, hi)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            val = self.phi(mid)
            lo = np.where(val < flat, mid, lo)
            hi = np.where(val >= flat, mid, hi)
            if np.all(hi - lo < 1e-14 * np.maximum(1.0, hi)):
                break
        out = 0.5 * (lo + hi)
        return out.reshape(y.shape) if y.ndim else float(out[0])

    def pressure(self, a):
        """``L_f(a) = a f'(a) - f(a)``."""
        a = np.asarray(a, dtype=float)
        return a * self.f_prime(a) - self.f(a)

    def clamp(self, a, delta=1e-9):
        """Clamp into ``[delta, N_max - delta]``; returns ``(clamped, count)``."""
        a = np.asarray(a, dtype=float)
        hi = np.inf if self.n_max is None else self.n_max - delta
        out = np.clip(a, delta, hi)
        return out, int(np.count_nonzero(out != a))

    @cached_property
    def _grid(self):
        top = self.density_max
        # geometric refinement towards zero, where the slopes of phi and chi peak for concave rates
        near_zero = np.geomspace(top * 1e-7, top * 1e-3, 20, endpoint=False)
        return np.concatenate([near_zero, np.linspace(top * 1e-3, top * (1 - 1e-3), self._grid_size)])

    @cached_property
    def c_lip(self):
        """Common Lipschitz constant of ``phi`` and ``chi``, estimated on a density grid."""
        g = self._grid
        return float(max(np.max(np.abs(self.phi_prime(g))), np.max(np.abs(self.chi_prime(g)))))

    @cached_property
    def c_star(self):
        """Lower bound on ``phi'`` on the density grid."""
        return float(np.min(self.phi_prime(self._grid)))

    @cached_property
    def chi_prime_min(self):
        return float(np.min(self.chi_prime(self._grid)))

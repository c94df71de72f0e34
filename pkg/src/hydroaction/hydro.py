"""Finite-volume solver for the macroscopic nonlinear diffusion equation.

Solves ``d/dt rho = Lap phi(rho) + div(chi(rho) grad(V + H~_t))`` on the flat
torus with a conservative cell-centred scheme (method of lines, stiff
integrator from scipy).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.integrate import solve_ivp

from .errors import BoundaryError, ContractViolation, SolverError
from .lattice import FourierSeries, Potential, ScalarFunctions, cell_centers, rho_bar
from .numerics import integrate_samples

__all__ = [
    "DensityField",
    "cell_profile",
    "hydro_rhs",
    "solve_pde",
    "weak_residual",
    "macro_free_energy",
    "macro_free_energy_variational",
    "stationary_profile",
]

CLAMP_DELTA = 1e-9


@dataclass
class DensityField:
    """Cell averages on a uniform ``M^d`` grid, optionally with a time axis.

    ``values`` has shape ``(M,)*d`` for a single field or ``(n_t,) + (M,)*d``
    with ``times`` for a series.
    """

    values: np.ndarray
    M: int
    dim: int = 1
    times: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expect = (self.M,) * self.dim
        if self.values.shape[-self.dim :] != expect:
            raise ContractViolation(f"field shape {self.values.shape} does not end with {expect}")
        if self.times is not None:
            self.times = np.asarray(self.times, dtype=float)
            if self.values.shape[0] != self.times.size:
                raise ContractViolation("one snapshot per time required")

    @property
    def h(self):
        return 1.0 / self.M

    @property
    def is_series(self):
        return self.times is not None

    @property
    def centers(self):
        c = cell_centers((self.M,) * self.dim)
        return c[..., 0] if self.dim == 1 else c

    def mass(self):
        axes = tuple(range(-self.dim, 0))
        return self.values.sum(axis=axes) * self.h**self.dim

    def snapshot(self, k):
        return DensityField(self.values[k], self.M, self.dim)

    def __len__(self):
        return 0 if self.times is None else self.times.size


def cell_profile(profile, M, dim=1, quad_points=4):
    """Cell averages of a profile (exact for Fourier series, Gauss quadrature otherwise)."""
    if isinstance(profile, FourierSeries):
        return DensityField(profile.cell_average((M,) * dim), M, dim)
    if np.isscalar(profile):
        return DensityField(np.full((M,) * dim, float(profile)), M, dim)
    x, w = np.polynomial.legendre.leggauss(quad_points)
    x = 0.5 * (x + 1.0) / M
    w = 0.5 * w
    out = np.zeros((M,) * dim)
    base = cell_centers((M,) * dim) - 0.5 / M
    for idx in np.ndindex(*(quad_points,) * dim):
        off = np.array([x[i] for i in idx])
        wt = np.prod([w[i] for i in idx])
        pts = base + off
        out += wt * np.asarray(profile(pts[..., 0] if dim == 1 else pts))
    return DensityField(out, M, dim)


def _cell_potential(pot, t, M, dim):
    c = cell_centers((M,) * dim)
    return np.asarray(pot(t, c[..., 0] if dim == 1 else c))


def stationary_profile(scalars, pot, alpha, M):
    """``rho_bar_{alpha, V}`` at the cell centres."""
    dim = scalars.model.dim
    c = cell_centers((M,) * dim)
    return DensityField(rho_bar(scalars.model, alpha, pot, c[..., 0] if dim == 1 else c, 0.0), M, dim)


def _fluxes(scalars, rho, W, h):
    """Face fluxes ``-(phi_R - phi_L)/h - chi(mean rho) (W_R - W_L)/h`` per axis."""
    phi = np.asarray(scalars.phi(rho))
    out = []
    for ax in range(rho.ndim):
        rho_r = np.roll(rho, -1, axis=ax)
        chi_f = np.asarray(scalars.chi(0.5 * (rho + rho_r)))
        out.append(-(np.roll(phi, -1, axis=ax) - phi) / h - chi_f * (np.roll(W, -1, axis=ax) - W) / h)
    return out


def _divergence(fluxes, h):
    div = np.zeros_like(fluxes[0])
    for ax, F in enumerate(fluxes):
        div += (F - np.roll(F, 1, axis=ax)) / h
    return div


def hydro_rhs(scalars, pot, t, rho, clamp=True):
    """Time derivative of the cell averages; ``rho`` is a :class:`DensityField` or an array."""
    field_ = rho if isinstance(rho, DensityField) else DensityField(rho, np.shape(rho)[0], np.ndim(rho))
    vals = field_.values
    if clamp:
        vals, _ = scalars.clamp(vals, CLAMP_DELTA)
    W = _cell_potential(pot, t, field_.M, field_.dim)
    out = -_divergence(_fluxes(scalars, vals, W, field_.h), field_.h)
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(out))[0]
        raise SolverError(f"non-finite right-hand side at cell {tuple(bad)}", time=t)
    return out


class _Discretisation:
    def __init__(self, scalars, pot, M, dim):
        self.scalars, self.pot, self.M, self.dim = scalars, pot, M, dim
        self.h = 1.0 / M
        self.shape = (M,) * dim
        n = M**dim
        idx = np.arange(n).reshape(self.shape)
        self.right = [np.roll(idx, -1, axis=ax).ravel() for ax in range(dim)]
        self.idx = idx.ravel()
        self.n = n
        self.n_clamped = 0
        self.static = pot.is_time_independent
        self._W0 = _cell_potential(pot, 0.0, M, dim)

    def W(self, t):
        return self._W0 if self.static else _cell_potential(self.pot, t, self.M, self.dim)

    def rhs(self, t, y):
        rho = y.reshape(self.shape)
        rho_c, cnt = self.scalars.clamp(rho, CLAMP_DELTA)
        self.n_clamped += cnt
        return (-_divergence(_fluxes(self.scalars, rho_c, self.W(t), self.h), self.h)).ravel()

    def jac(self, t, y):
        sf, h = self.scalars, self.h
        rho, _ = sf.clamp(y, CLAMP_DELTA)
        W = self.W(t).ravel()
        dphi = np.asarray(sf.phi_prime(rho))
        rows, cols, vals = [], [], []
        for R in self.right:
            L_ = self.idx
            avg = 0.5 * (rho[L_] + rho[R])
            dchi = np.asarray(sf.chi_prime(avg))
            dW = (W[R] - W[L_]) / h
            # face flux derivatives w.r.t. left and right cells
            dF_l = dphi[L_] / h - 0.5 * dchi * dW
            dF_r = -dphi[R] / h - 0.5 * dchi * dW
            # d rho_L/dt gets -F/h, d rho_R/dt gets +F/h
            for target, sgn in ((L_, -1.0), (R, 1.0)):
                rows += [target, target]
                cols += [L_, R]
                vals += [sgn * dF_l / h, sgn * dF_r / h]
        return sparse.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self.n, self.n)
        )


def solve_pde(scalars, pot, rho0, T, times=None, method="Radau", rtol=1e-10, atol=1e-12, n_times=201):
    """Solve the hydrodynamic equation from ``rho0`` (a :class:`DensityField`) up to ``T``.

    ``pot`` carries the external potential and the tilt. Mass is checked to
    ``1e-12`` relative and restored by a uniform shift if the integrator
    drifts (reported in ``info``).
    """
    if not isinstance(rho0, DensityField):
        raise ContractViolation("rho0 must be a DensityField")
    if rho0.dim != scalars.model.dim:
        raise ContractViolation("grid dimension does not match the model")
    if np.any(rho0.values <= 0) or (scalars.n_max is not None and np.any(rho0.values >= scalars.n_max)):
        raise BoundaryError("initial density must lie inside (0, N_max)")
    times = np.linspace(0.0, T, n_times) if times is None else np.asarray(times, dtype=float)
    disc = _Discretisation(scalars, pot, rho0.M, rho0.dim)
    y0 = rho0.values.ravel().copy()
    sol = solve_ivp(disc.rhs, (times[0], times[-1]), y0, method=method, t_eval=times,
                    rtol=rtol, atol=atol, jac=disc.jac)
    if not sol.success:
        t_fail = float(sol.t[-1]) if sol.t.size else times[0]
        raise SolverError(f"hydrodynamic solve failed (step-size collapse?): {sol.message}", time=t_fail)
    vals = sol.y.T.reshape((times.size,) + disc.shape)
    mass0 = y0.sum()
    drift = np.abs(vals.reshape(times.size, -1).sum(axis=1) - mass0) / max(abs(mass0), 1e-300)
    corrected = False
    if np.max(drift) > 1e-12:
        shift = (mass0 - vals.reshape(times.size, -1).sum(axis=1)) / disc.n
        vals = vals + shift.reshape((-1,) + (1,) * rho0.dim)
        corrected = True
    info = {
        "nfev": int(sol.nfev),
        "njev": int(sol.njev),
        "n_clamped": int(disc.n_clamped),
        "mass_drift": float(np.max(drift)),
        "mass_corrected": corrected,
    }
    return DensityField(vals, rho0.M, rho0.dim, times, info)


# ---------------------------------------------------------------------------
# Weak formulation and free energy
# ---------------------------------------------------------------------------


def _spectral_grad(values, dim):
    M = values.shape[-1]
    k = np.fft.fftfreq(M, d=1.0 / M) * 2j * np.pi
    if M % 2 == 0:
        k[M // 2] = 0.0
    out = []
    vhat = np.fft.fftn(values, axes=tuple(range(-dim, 0)))
    for ax in range(dim):
        shape = [1] * values.ndim
        shape[values.ndim - dim + ax] = M
        out.append(np.real(np.fft.ifftn(vhat * k.reshape(shape), axes=tuple(range(-dim, 0)))))
    return out


def weak_residual(series, scalars, pot, G, envelope=None):
    """Difference of the two sides of the weak formulation for test function ``G``.

    ``G(t, u) = e(t) G(u)`` with ``G`` a :class:`FourierSeries` and ``e`` an
    optional envelope (default constant one). Space integrals use the
    midpoint rule on cells, time integrals Simpson's rule.
    """
    if not series.is_series:
        raise ContractViolation("a time series is required")
    dim = series.dim
    c = cell_centers((series.M,) * dim)
    u = c[..., 0] if dim == 1 else c
    g = G(u)
    lap_g = G.laplacian(u)
    grad_g = G.gradient(u)
    e = (lambda t: np.ones_like(np.asarray(t, float))) if envelope is None else envelope
    de = (lambda t: np.zeros_like(np.asarray(t, float))) if envelope is None else envelope.derivative
    t = series.times
    vol = series.h**dim
    axes = tuple(range(1, dim + 1))
    rho = series.values
    lhs = (np.sum(rho[-1] * g) * e(t[-1]) - np.sum(rho[0] * g) * e(t[0])) * vol
    lhs -= integrate_samples(t, np.sum(rho * g, axis=axes) * vol * de(t), strict=False)[0]
    rhs_t = np.zeros(t.size)
    for k, tk in enumerate(t):
        r = rho[k]
        gradV = pot.gradient(tk, u)
        chi = np.asarray(scalars.chi(r))
        rhs_t[k] = e(tk) * vol * (
            np.sum(np.asarray(scalars.phi(r)) * lap_g) - np.sum(chi[..., None] * gradV * grad_g)
        )
    rhs = integrate_samples(t, rhs_t, strict=False)[0]
    return float(lhs - rhs)


def macro_free_energy(scalars, pot, alpha, rho, t=0.0):
    """``int f(rho) - f(rho_bar) - f'(rho_bar)(rho - rho_bar) du`` by the midpoint rule."""
    field_ = rho if isinstance(rho, DensityField) else DensityField(rho, np.shape(rho)[-1], np.ndim(rho))
    vals = field_.values
    upper = scalars.n_max
    if np.any(vals <= 0) or (upper is not None and np.any(vals >= upper)):
        raise BoundaryError("free energy needs densities inside (0, N_max)")
    c = cell_centers((field_.M,) * field_.dim)
    rb = rho_bar(scalars.model, alpha, pot, c[..., 0] if field_.dim == 1 else c, t)
    dens = scalars.f(vals) - scalars.f(rb) - scalars.f_prime(rb) * (vals - rb)
    return float(np.sum(dens) * field_.h**field_.dim)


def macro_free_energy_variational(scalars, pot, alpha, rho, h_func=None, t=0.0):
    """Variational form ``<rho, h> - int log Z1(f'(alpha) + h - V) / Z1(f'(alpha) - V)``.

    Evaluated at ``h_func`` (cell values) or, by default, at the maximiser
    ``f'(rho) - f'(rho_bar)``.
    """
    from .lattice import partition_Z1

    field_ = rho if isinstance(rho, DensityField) else DensityField(rho, np.shape(rho)[-1], np.ndim(rho))
    vals = field_.values
    c = cell_centers((field_.M,) * field_.dim)
    u = c[..., 0] if field_.dim == 1 else c
    v = np.asarray(pot(t, u))
    theta0 = float(scalars.f_prime(alpha)) - v
    rb = scalars.f_prime_inverse(theta0)
    hv = scalars.f_prime(vals) - scalars.f_prime(rb) if h_func is None else np.asarray(h_func)

    def log_z(theta):
        if scalars.model.kind == "sep":
            return np.logaddexp(0.0, theta)
        if scalars.model.is_linear_zrp:
            return np.exp(theta)
        return np.log(np.array([partition_Z1(scalars.model, x) for x in np.ravel(theta)])).reshape(np.shape(theta))

    dens = vals * hv - (log_z(theta0 + hv) - log_z(theta0))
    return float(np.sum(dens) * field_.h**field_.dim)

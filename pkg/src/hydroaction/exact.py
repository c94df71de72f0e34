"""Exact master-equation engine on a fixed particle-number sector.

The sector is enumerated once; every quantity on configuration space
(current, mobility, force, the dissipation potentials and the action) is then
a vectorised expression over the sector's transition list. Configuration
space sums over ordered pairs ``(eta, eta')`` are computed on *unordered*
pairs with rates aggregated over parallel edges (on a torus with ``L = 2`` the
moves ``i -> i+e`` and ``i -> i-e`` reach the same configuration).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.integrate import solve_ivp
from scipy.special import logsumexp

from .errors import (
    ContractViolation,
    InconsistencyError,
    InvalidConfigurationError,
    SectorSizeError,
    SolverError,
)
from .lattice import Potential, ScalarFunctions, TorusLattice, partition_Z1, rho_bar, theta_of_density
from .numerics import integrate_samples

__all__ = [
    "ConfigSector",
    "MuPath",
    "TransitionField",
    "SiteFields",
    "FreeEnergy",
    "ActionBreakdown",
    "enumerate_sector",
    "sector_size",
    "evolve",
    "canonical_fields",
    "psi",
    "psi_star",
    "pairing",
    "onsager_machlup",
    "micro_free_energy",
    "micro_action",
    "kl_rate",
    "chain_rule_residual",
    "project",
    "empirical_measure",
    "block_average",
    "mollified_field",
    "local_equilibrium_defect",
    "product_measure",
    "stationary_measure",
    "point_mass",
    "time_average",
    "action_series",
    "generator_rhs",
    "bond_gradient",
    "divergence",
    "linear_force_bounds",
    "psi_star_lower_bound",
    "detailed_balance_residual",
    "gradient_identity_residual",
    "EdgeRates",
]

DEFAULT_STATE_CAP = 2_000_000
MOBILITY_ZERO = 1e-300


# ---------------------------------------------------------------------------
# Sector enumeration
# ---------------------------------------------------------------------------


def sector_size(model, L, d, N):
    n = L**d
    if model.kind == "sep":
        return math.comb(n, N) if 0 <= N <= n else 0
    return math.comb(N + n - 1, n - 1)


class ConfigSector:
    """All configurations of ``N`` particles on the torus ``T_L^d``.

    Attributes of interest: ``states`` (``(S, L^d)`` occupation numbers in
    lexicographic order) and the directed transition list ``src, dst,
    site_from, site_to, direction, sign`` (one entry per move ``(eta, i, k,
    +-)`` with positive rate).
    """

    def __init__(self, model, L, d, N, cap=DEFAULT_STATE_CAP):
        if model.dim != d:
            raise ContractViolation(f"model dimension {model.dim} != lattice dimension {d}")
        if N < 0 or (model.n_max is not None and N > model.n_max * L**d):
            raise InvalidConfigurationError(f"N={N} particles do not fit on {L**d} sites")
        size = sector_size(model, L, d, N)
        if size > cap:
            raise SectorSizeError(
                f"sector has {size} states, above the cap of {cap}; use the kmc engine instead"
            )
        self.model = model
        self.lattice = TorusLattice(L, d)
        self.N = int(N)
        self.states = self._enumerate()
        self._build_index()
        self._build_transitions()

    @property
    def L(self):
        return self.lattice.L

    @property
    def dim(self):
        return self.lattice.dim

    @property
    def n_sites(self):
        return self.lattice.n_sites

    @property
    def size(self):
        return self.states.shape[0]

    def __len__(self):
        return self.size

    def _enumerate(self):
        n, N = self.n_sites, self.N
        if N == 0:
            states = np.zeros((1, n), dtype=np.int64)
        elif self.model.kind == "sep":
            combos = np.fromiter(
                itertools.chain.from_iterable(itertools.combinations(range(n), N)),
                dtype=np.int64,
                count=math.comb(n, N) * N,
            ).reshape(-1, N)
            states = np.zeros((combos.shape[0], n), dtype=np.int64)
            rows = np.repeat(np.arange(combos.shape[0]), N)
            states[rows, combos.ravel()] = 1
        elif n == 1:
            states = np.array([[N]], dtype=np.int64)
        else:
            count = math.comb(N + n - 1, n - 1)
            bars = np.fromiter(
                itertools.chain.from_iterable(itertools.combinations(range(N + n - 1), n - 1)),
                dtype=np.int64,
                count=count * (n - 1),
            ).reshape(-1, n - 1)
            edges = np.concatenate(
                [np.full((count, 1), -1), bars, np.full((count, 1), N + n - 1)], axis=1
            )
            states = np.diff(edges, axis=1) - 1
        # lexicographic order, site 0 most significant
        order = np.lexsort(states.T[::-1])
        return np.ascontiguousarray(states[order])

    def _build_index(self):
        radix = 2 if self.model.kind == "sep" else self.N + 1
        self._radix = radix
        if self.n_sites * math.log2(max(radix, 2)) < 62:
            self._weights = radix ** np.arange(self.n_sites - 1, -1, -1, dtype=np.int64)
            self._codes = self.states @ self._weights
            self._lookup = None
        else:
            self._weights = None
            self._codes = None
            self._lookup = {tuple(s): k for k, s in enumerate(self.states)}

    def index_of(self, states):
        """Indices of configurations (array ``(m, L^d)`` or a single one)."""
        states = np.asarray(states, dtype=np.int64)
        single = states.ndim == 1
        states = np.atleast_2d(states)
        if self._lookup is None:
            codes = states @ self._weights
            idx = np.searchsorted(self._codes, codes)
            idx = np.minimum(idx, self.size - 1)
            if not np.all(self._codes[idx] == codes):
                raise InvalidConfigurationError("configuration is not in this sector")
        else:
            try:
                idx = np.array([self._lookup[tuple(s)] for s in states])
            except KeyError as exc:
                raise InvalidConfigurationError("configuration is not in this sector") from exc
        return int(idx[0]) if single else idx

    def _build_transitions(self):
        model, lat, st = self.model, self.lattice, self.states
        src, dst, s_from, s_to, kdir, sgn = [], [], [], [], [], []
        g1 = model.g1(st)
        g2 = model.g2(st)
        for k in range(lat.dim):
            for sign in (1, -1):
                nb = lat.shift(k, sign)
                for i in range(lat.n_sites):
                    j = nb[i]
                    rate = g1[:, i] * g2[:, j]
                    rows = np.flatnonzero(rate > 0)
                    if rows.size == 0:
                        continue
                    new = st[rows].copy()
                    new[:, i] -= 1
                    new[:, j] += 1
                    src.append(rows)
                    dst.append(self.index_of(new))
                    s_from.append(np.full(rows.size, i))
                    s_to.append(np.full(rows.size, j))
                    kdir.append(np.full(rows.size, k))
                    sgn.append(np.full(rows.size, sign))
        cat = (lambda xs: np.concatenate(xs).astype(np.int64)) if src else (lambda xs: np.zeros(0, np.int64))
        self.src, self.dst = cat(src), cat(dst)
        self.site_from, self.site_to = cat(s_from), cat(s_to)
        self.direction, self.sign = cat(kdir), cat(sgn)
        self.base_rate = model.g1(self.states[self.src, self.site_from]) * model.g2(
            self.states[self.src, self.site_to]
        )
        # bond slot (m, k) crossed by the move, m the lower end of the bond
        lower = np.where(self.sign > 0, self.site_from, self.site_to)
        self.bond = lower * lat.dim + self.direction
        # unordered configuration pairs
        lo = np.minimum(self.src, self.dst)
        hi = np.maximum(self.src, self.dst)
        key = lo * self.size + hi
        uniq, inv = np.unique(key, return_inverse=True)
        self.pair_lo = uniq // self.size
        self.pair_hi = uniq % self.size
        self.edge_pair = inv
        self.edge_forward = self.src == lo
        # move of the lower-indexed configuration's partner, for force evaluation
        self.pair_from = np.zeros(len(uniq), dtype=np.int64)
        self.pair_to = np.zeros(len(uniq), dtype=np.int64)
        fw = np.flatnonzero(self.edge_forward)
        self.pair_from[inv[fw]] = self.site_from[fw]
        self.pair_to[inv[fw]] = self.site_to[fw]

    @property
    def n_edges(self):
        return self.src.size

    @property
    def n_pairs(self):
        return self.pair_lo.size

    @cached_property
    def incidence(self):
        """``B`` with ``B[dst, e] = 1, B[src, e] = -1``."""
        E = self.n_edges
        rows = np.concatenate([self.dst, self.src])
        cols = np.concatenate([np.arange(E), np.arange(E)])
        vals = np.concatenate([np.ones(E), -np.ones(E)])
        return sparse.csr_matrix((vals, (rows, cols)), shape=(self.size, E))

    @cached_property
    def source_selector(self):
        E = self.n_edges
        return sparse.csr_matrix((np.ones(E), (np.arange(E), self.src)), shape=(E, self.size))

    def has_reverse_transitions(self):
        """Every move ``eta -> eta'`` has a reverse move ``eta' -> eta``."""
        fwd = set(zip(self.src.tolist(), self.dst.tolist()))
        return all((b, a) in fwd for a, b in fwd)

    # -- potentials on this lattice ------------------------------------------------

    def site_values(self, series):
        pos = self.lattice.positions
        return np.asarray(series(pos if self.dim > 1 else pos[:, 0]), dtype=float)

    def edge_rates(self, pot):
        return EdgeRates(self, pot)

    def log_nu_star(self):
        """``sum_i log nu_*(eta(i))`` per configuration."""
        table = self.model.log_nu_star(max(self.N, 1) + 1)
        return table[self.states].sum(axis=1)

    def log_weights(self, pot, t=0.0):
        """Unnormalised ``log nu_*^V(eta) = sum log nu_* - sum V(i/L) eta(i)``."""
        v = self.site_values(lambda u: pot(t, u))
        return self.log_nu_star() - self.states @ v


def enumerate_sector(L, d, N, model, cap=DEFAULT_STATE_CAP):
    return ConfigSector(model, L, d, N, cap=cap)


class EdgeRates:
    """Time-dependent jump rates ``L^2 g1 g2 exp(-(V~(to) - V~(from)) / 2)`` per edge."""

    def __init__(self, sector, pot):
        self.sector = sector
        self.pot = pot
        vs = sector.site_values(pot.V)
        hs = sector.site_values(pot.H)
        self.dV = vs[sector.site_to] - vs[sector.site_from]
        self.dH = hs[sector.site_to] - hs[sector.site_from]
        self.log_base = np.log(sector.L**2 * sector.base_rate)
        self.static = pot.is_time_independent

    def log_rates(self, t):
        s = float(self.pot.envelope(t)) if not self.pot.H.is_zero else 0.0
        return self.log_base - 0.5 * (self.dV + s * self.dH)

    def __call__(self, t):
        return np.exp(self.log_rates(t))

    def unscaled(self, t):
        return self(t) / self.sector.L**2


# ---------------------------------------------------------------------------
# Measures
# ---------------------------------------------------------------------------


def _normalise_log(logw):
    return np.exp(logw - logsumexp(logw))


def product_measure(sector, density):
    """Product local-Gibbs measure with site densities ``density`` conditioned on the sector."""
    density = np.asarray(density, dtype=float).reshape(-1)
    if density.size != sector.n_sites:
        raise ContractViolation("one density per site required")
    theta = np.atleast_1d(theta_of_density(sector.model, density))
    return _normalise_log(sector.states @ theta + sector.log_nu_star())


def stationary_measure(sector, pot, t=0.0):
    """``nu_alpha^V`` conditioned on the sector (independent of ``alpha``)."""
    return _normalise_log(sector.log_weights(pot, t))


def point_mass(sector, eta):
    mu = np.zeros(sector.size)
    mu[sector.index_of(np.asarray(eta).reshape(-1))] = 1.0
    return mu


def _check_prob(mu, sector=None):
    mu = np.asarray(mu, dtype=float)
    if sector is not None and mu.shape != (sector.size,):
        raise ContractViolation("probability vector does not match the sector")
    if np.any(mu < -1e-12) or abs(mu.sum() - 1.0) > 1e-10:
        raise ContractViolation("probability vector must be nonnegative and sum to one")
    return np.maximum(mu, 0.0)


# ---------------------------------------------------------------------------
# Master equation
# ---------------------------------------------------------------------------


@dataclass
class MuPath:
    """Solution of the master equation sampled on ``times``."""

    sector: ConfigSector
    pot: Potential
    times: np.ndarray
    mu: np.ndarray
    stats: dict = field(default_factory=dict)

    def at(self, k):
        return self.mu[k]


_EXPLICIT_STIFFNESS = 5e3


def evolve(sector, pot, mu0, times, method="auto", rtol=1e-10, atol=1e-14):
    """Solve the forward equation ``d/dt mu = -div j`` on ``times``.

    ``method`` is any :func:`scipy.integrate.solve_ivp` method, ``"expm"``
    (time-independent rates only) for the matrix exponential, or ``"auto"``:
    the matrix exponential for time-independent rates, otherwise DOP853 when
    ``T * max exit rate`` is moderate (sparse LU fill-in makes implicit
    methods slow on large sectors) and Radau beyond that.
    """
    mu0 = _check_prob(mu0, sector)
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 1 or np.any(np.diff(times) <= 0):
        raise ContractViolation("times must be a strictly increasing grid")
    rates = EdgeRates(sector, pot)
    B = sector.incidence
    P = sector.source_selector
    if method == "auto":
        if rates.static:
            method = "expm"
        else:
            probe = np.linspace(times[0], times[-1], 9)
            exit_max = max(float(np.max(P.T @ rates(t))) for t in probe)
            method = "DOP853" if exit_max * (times[-1] - times[0]) < _EXPLICIT_STIFFNESS else "Radau"

    if method == "expm":
        if not rates.static:
            raise ContractViolation("the matrix exponential needs time-independent rates")
        from scipy.sparse.linalg import expm_multiply

        Q = (B @ sparse.diags(rates(times[0])) @ P).tocsr()
        if times.size == 1:
            mu = mu0[None, :]
        elif np.allclose(np.diff(times), times[1] - times[0], rtol=1e-12, atol=0):
            mu = expm_multiply(Q, mu0, start=0.0, stop=times[-1] - times[0], num=times.size, endpoint=True)
        else:
            mu = np.array([expm_multiply(Q * (t - times[0]), mu0) for t in times])
        stats = {"method": "expm"}
    else:
        def rhs(t, m):
            return B @ (rates(t) * m[sector.src])

        def jac(t, m):
            return (B @ sparse.diags(rates(t)) @ P).tocsc()

        if times.size == 1:
            mu = mu0[None, :]
            stats = {"method": method}
        else:
            implicit = method in ("Radau", "BDF", "LSODA")
            sol = solve_ivp(
                rhs, (times[0], times[-1]), mu0, method=method, t_eval=times,
                rtol=rtol, atol=atol, **({"jac": jac} if implicit else {}),
            )
            if not sol.success:
                raise SolverError(f"master equation integration failed: {sol.message}", time=float(sol.t[-1]))
            mu = sol.y.T
            stats = {"method": method, "nfev": int(sol.nfev), "njev": int(sol.njev), "nlu": int(sol.nlu)}
    mu = np.asarray(mu)
    drift = np.max(np.abs(mu.sum(axis=1) - 1.0))
    if drift > 1e-10:
        raise SolverError(f"normalisation drift {drift:.2e} exceeds 1e-10")
    stats["normalisation_drift"] = float(drift)
    return MuPath(sector, pot, times, mu, stats)


def generator_rhs(sector, pot, t, mu):
    """``d/dt mu`` at time ``t`` (exact, for continuity checks)."""
    return sector.incidence @ (EdgeRates(sector, pot)(t) * np.asarray(mu)[sector.src])


# ---------------------------------------------------------------------------
# Canonical structure on configuration space
# ---------------------------------------------------------------------------


@dataclass
class TransitionField:
    """Current, mobility and force on unordered pairs ``lo < hi``.

    ``j`` and ``F`` are oriented from ``lo`` to ``hi``; the values on the
    reversed pair are their negatives. ``F`` is ``nan`` where undefined.
    """

    lo: np.ndarray
    hi: np.ndarray
    j: np.ndarray
    a: np.ndarray
    F: np.ndarray

    @property
    def defined(self):
        return np.isfinite(self.F)


def _pair_rates(sector, rates):
    fw = np.bincount(sector.edge_pair, weights=np.where(sector.edge_forward, rates, 0.0), minlength=sector.n_pairs)
    bw = np.bincount(sector.edge_pair, weights=np.where(sector.edge_forward, 0.0, rates), minlength=sector.n_pairs)
    return fw, bw


def _force(sector, pot_ref, t, mu):
    """``F = -grad log(mu / nu^V)`` on pairs (``nan`` where a mass vanishes)."""
    logw = sector.log_weights(pot_ref, t)
    m_lo = mu[sector.pair_lo]
    m_hi = mu[sector.pair_hi]
    F = np.full(sector.n_pairs, np.nan)
    ok = (m_lo > 0) & (m_hi > 0)
    F[ok] = (np.log(m_lo[ok]) - logw[sector.pair_lo[ok]]) - (np.log(m_hi[ok]) - logw[sector.pair_hi[ok]])
    return F


def canonical_fields(sector, pot, t, mu, ref_pot=None):
    """Current ``j`` of the process with potential ``pot`` and force of ``ref_pot`` (default ``pot``)."""
    mu = _check_prob(mu, sector)
    fw, bw = _pair_rates(sector, EdgeRates(sector, pot)(t))
    flow_f = mu[sector.pair_lo] * fw
    flow_b = mu[sector.pair_hi] * bw
    j = flow_f - flow_b
    a = 2.0 * np.sqrt(flow_f * flow_b)
    F = _force(sector, pot if ref_pot is None else ref_pot, t, mu)
    return TransitionField(sector.pair_lo, sector.pair_hi, j, a, F)


def _psi_scalar(x):
    return x * np.arcsinh(x) - np.hypot(1.0, x) + 1.0


def psi(a, j, atol=1e-12):
    """Dissipation potential of the current, summed over both orientations of each pair.

    Pairs with zero mobility contribute zero; a nonzero current on such a
    pair raises :class:`InconsistencyError`.
    """
    a = np.asarray(a, dtype=float)
    j = np.asarray(j, dtype=float)
    zero = a <= MOBILITY_ZERO
    if np.any(np.abs(j[zero]) > atol):
        raise InconsistencyError(
            f"current {np.max(np.abs(j[zero])):.3e} on a pair with zero mobility"
        )
    pos = ~zero
    x = j[pos] / a[pos]
    return float(2.0 * np.sum(a[pos] * _psi_scalar(x)))


def psi_star(a, F):
    """Dual dissipation potential ``sum a (cosh(F/2) - 1)`` over ordered pairs."""
    a = np.asarray(a, dtype=float)
    F = np.asarray(F, dtype=float)
    pos = a > MOBILITY_ZERO
    return float(2.0 * np.sum(a[pos] * (np.cosh(0.5 * F[pos]) - 1.0)))


def pairing(j, F, a):
    """``<j, F> = 1/2 sum_{ordered} j F 1{a > 0}``."""
    a = np.asarray(a, dtype=float)
    pos = a > MOBILITY_ZERO
    return float(np.sum(np.asarray(j)[pos] * np.asarray(F)[pos]))


def onsager_machlup(a, j, F, atol=1e-12):
    return psi(a, j, atol) - pairing(j, F, a) + psi_star(a, F)


def _field_summary(field_, atol=1e-12):
    p = psi(field_.a, field_.j, atol)
    ps = psi_star(field_.a, field_.F)
    pr = pairing(field_.j, field_.F, field_.a)
    return p, ps, pr


# ---------------------------------------------------------------------------
# Free energy and action
# ---------------------------------------------------------------------------


@dataclass
class FreeEnergy:
    """Relative entropy of ``mu`` against ``nu_alpha^V``.

    ``value`` uses the full-space product measure, ``conditional`` the
    measure conditioned on the sector; ``log_sector_mass`` is the log of the
    sector's mass under the full-space measure (so ``value = conditional -
    log_sector_mass``).
    """

    value: float
    conditional: float
    log_sector_mass: float


def _log_nu_full(sector, pot, alpha, t):
    model = sector.model
    v = sector.site_values(lambda u: pot(t, u))
    theta = theta_of_density(model, alpha) - v
    log_z = np.array([math.log(partition_Z1(model, th)) for th in theta]) if model.kind != "sep" else np.logaddexp(0.0, theta)
    if model.is_linear_zrp:
        log_z = np.exp(theta)
    return sector.states @ theta + sector.log_nu_star() - log_z.sum()


def micro_free_energy(sector, pot, alpha, mu, t=0.0):
    mu = _check_prob(mu, sector)
    log_nu = _log_nu_full(sector, pot, alpha, t)
    log_mass = float(logsumexp(log_nu))
    pos = mu > 0
    full = float(np.sum(mu[pos] * (np.log(mu[pos]) - log_nu[pos])))
    return FreeEnergy(full, full + log_mass, log_mass)


def _coupling_density(sector, pot, alpha, t, mu):
    """``sum_i (rho_hat_i - rho_bar_i) d/dt V~_t(i/L)`` at one time."""
    dv = sector.site_values(lambda u: pot.dt(t, u))
    if not np.any(dv):
        return 0.0
    rho = mu @ sector.states
    pos = sector.lattice.positions
    rb = rho_bar(sector.model, alpha, pot, pos if sector.dim > 1 else pos[:, 0], t)
    return float(np.sum((rho - rb) * dv))


@dataclass
class ActionBreakdown:
    free_energy_T: float
    free_energy_0: float
    psi_integral: float
    psi_star_integral: float
    coupling_integral: float
    total: float
    quadrature_error: float
    series: dict = field(default_factory=dict)

    @property
    def delta_free_energy(self):
        return self.free_energy_T - self.free_energy_0

    @property
    def decomposed_total(self):
        return 0.5 * (self.delta_free_energy + self.psi_integral + self.psi_star_integral - self.coupling_integral)

    def to_dict(self):
        return {
            "free_energy_T": self.free_energy_T,
            "free_energy_0": self.free_energy_0,
            "psi_integral": self.psi_integral,
            "psi_star_integral": self.psi_star_integral,
            "coupling_integral": self.coupling_integral,
            "total": self.total,
            "quadrature_error": self.quadrature_error,
        }


def action_series(path, ref_pot, alpha=None, atol=1e-12, with_psi=True):
    """Per-time Psi, Psi*, pairing, Phi and coupling along ``path``."""
    sector = path.sector
    alpha = sector.N / sector.n_sites if alpha is None else alpha
    out = {k: np.zeros(path.times.size) for k in ("psi", "psi_star", "pairing", "phi", "coupling")}
    for k, t in enumerate(path.times):
        mu = np.maximum(path.mu[k], 0.0)
        mu = mu / mu.sum()
        fld = canonical_fields(sector, path.pot, t, mu, ref_pot=ref_pot)
        if with_psi:
            try:
                p, ps, pr = _field_summary(fld, atol)
            except InconsistencyError:
                # a current on a zero-mobility pair (e.g. a point mass at t=0):
                # Psi and the pairing diverge separately while Phi stays finite
                p = ps = pr = np.nan
                out["phi"][k] = 2.0 * _kl_density(sector, path.pot, ref_pot, t, mu)
                out["coupling"][k] = _coupling_density(sector, ref_pot, alpha, t, mu)
                continue
        else:
            p = ps = np.nan
            pr = pairing(fld.j, fld.F, fld.a)
        out["psi"][k] = p
        out["psi_star"][k] = ps
        out["pairing"][k] = pr
        out["phi"][k] = p - pr + ps
        out["coupling"][k] = _coupling_density(sector, ref_pot, alpha, t, mu)
    return out


def micro_action(path, ref_pot, alpha=None, rtol=1e-8, atol=1e-10, strict=True):
    """Relative entropy rate of the observed path measure against ``ref_pot`` dynamics.

    ``path`` is produced by :func:`evolve` under the observed potential.
    The total is ``1/2 int Phi(mu, j_obs, F_ref) dt``.
    """
    sector = path.sector
    alpha = sector.N / sector.n_sites if alpha is None else alpha
    ser = action_series(path, ref_pot, alpha)
    t = path.times
    total, err = integrate_samples(t, ser["phi"], rtol, atol, strict)
    ip, e1 = integrate_samples(t, ser["psi"], rtol, atol, False)
    ips, e2 = integrate_samples(t, ser["psi_star"], rtol, atol, False)
    ic, e3 = integrate_samples(t, ser["coupling"], rtol, atol, False)
    f0 = micro_free_energy(sector, ref_pot, alpha, _renorm(path.mu[0]), t[0]).value
    fT = micro_free_energy(sector, ref_pot, alpha, _renorm(path.mu[-1]), t[-1]).value
    qerr = 0.5 * float(np.nanmax([err, e1, e2, e3]))
    return ActionBreakdown(fT, f0, ip, ips, ic, 0.5 * total, qerr, ser)


def _renorm(mu):
    mu = np.maximum(mu, 0.0)
    return mu / mu.sum()


def _kl_density(sector, obs_pot, ref_pot, t, mu):
    lo_ = EdgeRates(sector, obs_pot).log_rates(t)
    lr = EdgeRates(sector, ref_pot).log_rates(t)
    ro, rr = np.exp(lo_), np.exp(lr)
    return float(np.sum(mu[sector.src] * (ro * (lo_ - lr) - ro + rr)))


def kl_rate(path, ref_pot):
    """Direct relative-entropy rate ``sum mu [r' log(r'/r) - r' + r]`` along ``path``.

    An independent formula for the integrand of the action (observed rates
    ``r'``, reference rates ``r``).
    """
    sector = path.sector
    obs = EdgeRates(sector, path.pot)
    ref = EdgeRates(sector, ref_pot)
    out = np.zeros(path.times.size)
    for k, t in enumerate(path.times):
        lo_, lr = obs.log_rates(t), ref.log_rates(t)
        ro, rr = np.exp(lo_), np.exp(lr)
        out[k] = np.sum(path.mu[k][sector.src] * (ro * (lo_ - lr) - ro + rr))
    return out


def chain_rule_residual(path, alpha=None, t1=None, t2=None, rtol=1e-8, atol=1e-10):
    """Residual of the free-energy chain rule between grid times ``t1 < t2``.

    ``F(t2) - F(t1) + int <j, F> dt - int sum (rho_hat - rho_bar) d/dt V~ dt``
    for the path's own potential.
    """
    sector, pot, t = path.sector, path.pot, path.times
    alpha = sector.N / sector.n_sites if alpha is None else alpha
    k1 = 0 if t1 is None else int(np.argmin(np.abs(t - t1)))
    k2 = t.size - 1 if t2 is None else int(np.argmin(np.abs(t - t2)))
    scale = max(1.0, abs(t[-1] - t[0]))
    if (t1 is not None and abs(t[k1] - t1) > 1e-12 * scale) or (t2 is not None and abs(t[k2] - t2) > 1e-12 * scale):
        raise ContractViolation("t1 and t2 must be points of the output grid")
    if k2 <= k1:
        raise ContractViolation("t1 must be smaller than t2")
    sub = MuPath(sector, pot, t[k1 : k2 + 1], path.mu[k1 : k2 + 1])
    ser = action_series(sub, pot, alpha, with_psi=False)
    ipair, _ = integrate_samples(sub.times, ser["pairing"], rtol, atol, False)
    icoup, _ = integrate_samples(sub.times, ser["coupling"], rtol, atol, False)
    f1 = micro_free_energy(sector, pot, alpha, _renorm(sub.mu[0]), sub.times[0]).value
    f2 = micro_free_energy(sector, pot, alpha, _renorm(sub.mu[-1]), sub.times[-1]).value
    return f2 - f1 + ipair - icoup


# ---------------------------------------------------------------------------
# Projections onto the lattice
# ---------------------------------------------------------------------------


@dataclass
class SiteFields:
    """Site densities and bond fields; bond arrays have shape ``(L^d, d)``."""

    rho: np.ndarray
    j: np.ndarray
    chi: np.ndarray
    a: np.ndarray
    phi: np.ndarray


def project(sector, pot, t, mu):
    """Averaged density, current, mobilities and ``phi_hat`` (unscaled rates)."""
    mu = _check_prob(mu, sector)
    model = sector.model
    n, d = sector.n_sites, sector.dim
    r = EdgeRates(sector, pot).unscaled(t)
    w = mu[sector.src] * r
    nb = n * d
    j = np.bincount(sector.bond, weights=sector.sign * w, minlength=nb)
    chi = 0.5 * np.bincount(sector.bond, weights=w, minlength=nb)
    # reverse of a forward move across the bond, evaluated in the target state
    fw = sector.sign > 0
    st = sector.states
    dst, i, ip = sector.dst[fw], sector.site_from[fw], sector.site_to[fw]
    s = float(pot.envelope(t)) if not pot.H.is_zero else 0.0
    vs = sector.site_values(pot.V) + s * sector.site_values(pot.H)
    r_rev = model.g1(st[dst, ip]) * model.g2(st[dst, i]) * np.exp(-0.5 * (vs[i] - vs[ip]))
    amob = 2.0 * np.sqrt(w[fw] * mu[dst] * r_rev)
    a = np.bincount(sector.bond[fw], weights=amob, minlength=nb)
    rho = mu @ st
    phi = mu @ model.dval(st)
    return SiteFields(rho, j.reshape(n, d), chi.reshape(n, d), a.reshape(n, d), phi)


def bond_gradient(sector, values):
    """``h(i + e_k) - h(i)`` as an ``(L^d, d)`` array."""
    lat = sector.lattice if hasattr(sector, "lattice") else sector
    values = np.asarray(values)
    return np.stack([values[lat.shift(k, 1)] - values for k in range(lat.dim)], axis=1)


def divergence(lattice, bond_field):
    """``sum_k (F_{i,i+e_k} - F_{i-e_k,i})``."""
    out = np.zeros(lattice.n_sites)
    for k in range(lattice.dim):
        out += bond_field[:, k] - bond_field[lattice.shift(k, -1), k]
    return out


def linear_force_bounds(sector, mu, G):
    """``(Psi*(mu, grad G~), Psi(mu, j^G), upper)`` for a linear test function ``G``.

    ``G`` is a callable on macroscopic positions. The chain ``Psi* <= Psi <=
    upper`` holds for every ``mu``.
    """
    from .lattice import Potential as _P

    mu = _check_prob(mu, sector)
    g_sites = sector.site_values(G)
    fld = canonical_fields(sector, _P.zero(sector.dim), 0.0, mu)
    grad = (sector.states[sector.pair_hi] - sector.states[sector.pair_lo]) @ g_sites
    jg = fld.a * np.sinh(0.5 * grad)
    ps = psi_star(fld.a, grad)
    p = psi(fld.a, jg)
    chi0 = project(sector, _P.zero(sector.dim), 0.0, mu).chi
    dg = bond_gradient(sector, g_sites)
    upper = 0.5 * float(np.sum(chi0 * (2.0 * sector.L * np.sinh(0.5 * dg)) ** 2))
    return ps, p, upper


def psi_star_lower_bound(sector, pot, mu, G, t=0.0):
    """``(Psi*(mu, F^V(mu)), sum[(L j^V)(L grad G) - chi^V (L grad G)^2 / 2])``."""
    mu = _check_prob(mu, sector)
    fld = canonical_fields(sector, pot, t, mu)
    F = np.where(fld.defined, fld.F, 0.0)
    ps = psi_star(fld.a, F)
    sf = project(sector, pot, t, mu)
    lg = sector.L * bond_gradient(sector, sector.site_values(G))
    bound = float(np.sum(sector.L * sf.j * lg - 0.5 * sf.chi * lg**2))
    return ps, bound


def detailed_balance_residual(sector, pot, t=0.0):
    """Max relative violation of ``nu(eta) r(eta, eta') = nu(eta') r(eta', eta)`` over pairs."""
    logw = sector.log_weights(pot, t)
    fw, bw = _pair_rates(sector, EdgeRates(sector, pot)(t))
    lhs = logw[sector.pair_lo] + np.log(fw)
    rhs = logw[sector.pair_hi] + np.log(bw)
    return float(np.max(np.abs(np.expm1(lhs - rhs)))) if lhs.size else 0.0


def gradient_identity_residual(sector, mu):
    """Max of ``|j0_{i,i+e} - (phi_i - phi_{i+e})|`` at ``V = 0``."""
    sf = project(sector, Potential.zero(sector.dim), 0.0, mu)
    return float(np.max(np.abs(sf.j + bond_gradient(sector, sf.phi))))


# ---------------------------------------------------------------------------
# Empirical tools and local equilibrium
# ---------------------------------------------------------------------------


def empirical_measure(eta, dim=1):
    """Atoms ``(positions, masses)`` of ``L^{-d} sum eta(i) delta_{i/L}`` (nonzero masses only)."""
    eta = np.asarray(eta)
    L = eta.shape[0] if eta.ndim == dim else round(eta.size ** (1.0 / dim))
    flat = eta.reshape(-1)
    lat = TorusLattice(L, dim)
    nz = np.flatnonzero(flat)
    pos = lat.positions[nz]
    return (pos[:, 0] if dim == 1 else pos), flat[nz] / L**dim


def block_average(states, L, dim, ell):
    """Cyclic box averages ``eta^ell(i)`` over ``|m|_inf <= ell``.

    ``states`` has shape ``(..., L^d)``; the result has the same shape.
    """
    states = np.asarray(states, dtype=float)
    lead = states.shape[:-1]
    x = states.reshape(lead + (L,) * dim)
    for ax in range(len(lead), len(lead) + dim):
        acc = np.zeros_like(x)
        for m in range(-ell, ell + 1):
            acc += np.roll(x, -m, axis=ax)
        x = acc
    return x.reshape(states.shape) / (2 * ell + 1) ** dim


def mollified_field(eta, eps, u, dim=1):
    """``(Theta_L(eta) * iota_eps)(u)`` with ``iota_eps = (2 eps)^{-d} 1_{[-eps, eps)^d}``."""
    eta = np.asarray(eta, dtype=float)
    L = round(eta.size ** (1.0 / dim))
    lat = TorusLattice(L, dim)
    pts = np.asarray(u, dtype=float).reshape(-1, dim)
    flat = eta.reshape(-1)
    out = np.zeros(pts.shape[0])
    for idx in np.flatnonzero(flat):
        diff = (pts - lat.positions[idx] + 0.5) % 1.0 - 0.5
        # [-eps, eps) in the torus metric; tolerance for lattice points on the edge
        inside = np.all((diff >= -eps - 1e-12) & (diff < eps - 1e-12), axis=1)
        out += inside * flat[idx]
    return out / (L**dim * (2.0 * eps) ** dim)


def _chi_hat_delta(model, states, lattice):
    """``chi_hat_{i,i+e_k}(delta_eta)`` with ``V = 0`` rates, shape ``(S, L^d, d)``."""
    g1, g2 = model.g1(states), model.g2(states)
    out = []
    for k in range(lattice.dim):
        nb = lattice.shift(k, 1)
        out.append(0.5 * (g1 * g2[:, nb] + g1[:, nb] * g2))
    return np.stack(out, axis=-1)


def local_equilibrium_defect(model, states, weights, L, eps, scalars=None, batch=4096):
    """Local-equilibrium defects ``(defect_chi, defect_phi)``.

    ``states`` is ``(S, L^d)`` with probability ``weights`` (a time-averaged
    law, or uniform weights over samples). Block size is ``floor(eps L)``;
    densities at the boundary of the state space are clamped into the open
    interval before evaluating ``chi`` and ``phi``.
    """
    dim = model.dim
    lat = TorusLattice(L, dim)
    ell = int(math.floor(eps * L))
    sf = scalars if scalars is not None else ScalarFunctions(model)
    states = np.asarray(states)
    weights = np.asarray(weights, dtype=float)
    dchi = 0.0
    dphi = 0.0
    for start in range(0, states.shape[0], batch):
        st = states[start : start + batch]
        w = weights[start : start + batch]
        dens = block_average(st, L, dim, ell)
        dens_c, _ = sf.clamp(dens, 1e-12)
        chi_hat = _chi_hat_delta(model, st, lat)
        chi_blk = np.stack(
            [block_average(chi_hat[..., k], L, dim, ell) for k in range(dim)], axis=-1
        )
        chi_eq = np.asarray(sf.chi(dens_c))
        dchi += float(w @ np.abs(chi_blk - chi_eq[..., None]).sum(axis=(1, 2)))
        phi_blk = block_average(model.dval(st), L, dim, ell)
        dphi += float(w @ np.abs(phi_blk - np.asarray(sf.phi(dens_c))).sum(axis=1))
    return dchi / L**dim, dphi / L**dim


def time_average(path):
    """``(1/T) int mu_t dt`` by Simpson's rule on the output grid."""
    from scipy.integrate import simpson

    t = path.times
    avg = simpson(path.mu, x=t, axis=0) / (t[-1] - t[0])
    avg = np.maximum(avg, 0.0)
    return avg / avg.sum()

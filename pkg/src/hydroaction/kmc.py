"""Kinetic Monte Carlo for tilted lattice gases and Girsanov action estimates.

Trajectories are simulated with a numba kernel. Time-dependent rates are
handled by Poisson thinning against the per-edge bound
``L^2 g1 g2 exp(-dV/2) exp(S |dH| / 2)`` with ``S >= max |s(t)|`` over
``[0, T]``. Each trajectory owns an RNG stream derived from the master seed,
so ensembles are bit-reproducible regardless of thread count.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import njit, prange

# the TBB layer warns on the system TBB; OpenMP is used unless overridden
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "omp"

from .errors import ContractViolation, EnvelopeViolationError, InvalidConfigurationError
from .lattice import Potential, TorusLattice, _Family, theta_of_density

__all__ = [
    "TrajectorySample",
    "EnsembleStats",
    "stream_seed",
    "sample_initial",
    "simulate",
    "girsanov_log_density",
    "action_estimate",
    "run_ensemble",
    "field_estimates",
]

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(4)
_STATUS_OK = 0
_STATUS_ENVELOPE = 1
_STATUS_OVERFLOW = 2
_STATUS_REJECTION = 3


def stream_seed(master, stream):
    """32-bit seed of trajectory ``stream`` derived from ``master``."""
    ss = np.random.SeedSequence(int(master), spawn_key=(int(stream),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------


@njit(cache=True)
def _env(kind, par, coef, t):
    if kind == 0:
        return par[0]
    if kind == 1:
        acc = 0.0
        for n in range(coef.size - 1, -1, -1):
            acc = acc * t + coef[n]
        return acc
    return par[3] + par[0] * math.cos(par[1] * t + par[2])


@njit(cache=True)
def _site_row(i, eta, nbr, g1t, g2t, dV, dH, L2, static, s0, sbound, c, w):
    """Refresh base rates and thinning bounds of site ``i``.

    Returns the row totals of the bounds, of the compensator terms
    ``c (e^y - 1)`` and of the relative-entropy terms ``c (y e^y - e^y + 1)``
    with ``y = -s dH / 2`` (the last two only for static tilts).
    """
    tot_w = 0.0
    tot_k = 0.0
    tot_kl = 0.0
    for q in range(nbr.shape[1]):
        cq = L2 * g1t[eta[i]] * g2t[eta[nbr[i, q]]] * math.exp(-0.5 * dV[i, q])
        c[i, q] = cq
        if static:
            y = -0.5 * s0 * dH[i, q]
            ey = math.exp(y)
            wq = cq * ey
            tot_k += wq - cq
            tot_kl += cq * (y * ey - ey + 1.0)
        else:
            wq = cq * math.exp(0.5 * sbound * abs(dH[i, q]))
        w[i, q] = wq
        tot_w += wq
    return tot_w, tot_k, tot_kl


@njit(cache=True)
def _tilt_rates(c, dH, s):
    """Compensator and relative-entropy rates at tilt strength ``s``."""
    comp = 0.0
    kl = 0.0
    for i in range(c.shape[0]):
        for q in range(c.shape[1]):
            if c[i, q] > 0.0:
                y = -0.5 * s * dH[i, q]
                ey = math.exp(y)
                comp += c[i, q] * (ey - 1.0)
                kl += c[i, q] * (y * ey - ey + 1.0)
    return comp, kl


@njit(cache=True)
def _sample_site(cdf_row):
    u = np.random.random()
    for n in range(cdf_row.size):
        if u < cdf_row[n]:
            return n
    return cdf_row.size - 1


@njit(cache=True)
def _trajectory(seed, eta, sample, cdf, c_tot, nbr, g1t, g2t, dV, dH, L2, T,
                kind, par, coef, static, sbound, gl_x, gl_w,
                snap_t, snaps, record, ev_t, ev_site, ev_dir, eta_init):
    """Simulate one trajectory in place; returns diagnostics.

    ``eta`` is overwritten with the final configuration (and, when
    ``sample`` is set, first filled with a product-measure draw); the
    initial configuration is copied to ``eta_init``.
    Returns ``(jump_term, compensator, kl_integral, n_events, n_rejected,
    n_init_draws, status)``; ``kl_integral`` is the time integral of the
    relative-entropy rate of the tilted against the untilted rates.
    """
    np.random.seed(seed)
    n, nq = nbr.shape
    n_draws = 0
    if sample:
        while True:
            n_draws += 1
            tot = 0
            for i in range(n):
                eta[i] = _sample_site(cdf[i])
                tot += eta[i]
            if tot <= c_tot * n:
                break
            if n_draws >= 10000:
                return 0.0, 0.0, 0.0, 0, 0, n_draws, _STATUS_REJECTION
    for i in range(n):
        eta_init[i] = eta[i]
    s0 = _env(kind, par, coef, 0.0)
    c = np.zeros((n, nq))
    w = np.zeros((n, nq))
    W = np.zeros(n)
    K = np.zeros(n)
    KL = np.zeros(n)
    Wt = 0.0
    Kt = 0.0
    KLt = 0.0
    for i in range(n):
        W[i], K[i], KL[i] = _site_row(i, eta, nbr, g1t, g2t, dV, dH, L2, static, s0, sbound, c, w)
        Wt += W[i]
        Kt += K[i]
        KLt += KL[i]
    t = 0.0
    jump = 0.0
    comp = 0.0
    kl = 0.0
    n_ev = 0
    n_rej = 0
    isnap = 0
    max_ev = ev_t.size
    since_refresh = 0
    while True:
        if Wt > 0.0:
            tau = -math.log(1.0 - np.random.random()) / Wt
        else:
            tau = np.inf
        t_new = t + tau
        t_end = min(t_new, T)
        while isnap < snap_t.size and snap_t[isnap] <= t_end and (snap_t[isnap] < t_new):
            for i in range(n):
                snaps[isnap, i] = eta[i]
            isnap += 1
        if t_end > t:
            if static:
                comp += Kt * (t_end - t)
                kl += KLt * (t_end - t)
            else:
                half = 0.5 * (t_end - t)
                mid = 0.5 * (t_end + t)
                for g in range(gl_x.size):
                    sg = _env(kind, par, coef, mid + half * gl_x[g])
                    cr, kr = _tilt_rates(c, dH, sg)
                    comp += gl_w[g] * half * cr
                    kl += gl_w[g] * half * kr
        if t_new >= T:
            break
        t = t_new
        # select an edge proportionally to its bound
        u = np.random.random() * Wt
        i = n - 1
        acc = 0.0
        for m in range(n):
            acc += W[m]
            if u < acc:
                i = m
                break
        u -= acc - W[i]
        q = nq - 1
        acc = 0.0
        for r in range(nq):
            acc += w[i, r]
            if u < acc:
                q = r
                break
        if w[i, q] <= 0.0:
            n_rej += 1
            continue
        s = s0
        if not static:
            s = _env(kind, par, coef, t)
            ratio = c[i, q] * math.exp(-0.5 * s * dH[i, q]) / w[i, q]
            if ratio > 1.0 + 1e-12:
                return jump, comp, kl, n_ev, n_rej, n_draws, _STATUS_ENVELOPE
            if np.random.random() >= ratio:
                n_rej += 1
                continue
        j = nbr[i, q]
        jump += -0.5 * s * dH[i, q]
        if record:
            if n_ev >= max_ev:
                return jump, comp, kl, n_ev, n_rej, n_draws, _STATUS_OVERFLOW
            ev_t[n_ev] = t
            ev_site[n_ev] = i
            ev_dir[n_ev] = q
        n_ev += 1
        eta[i] -= 1
        eta[j] += 1
        # refresh the rows whose rates depend on eta[i] or eta[j]
        for a in range(2 * nq + 2):
            if a == 0:
                m = i
            elif a == 1:
                m = j
            elif a < nq + 2:
                m = nbr[i, a - 2]
            else:
                m = nbr[j, a - nq - 2]
            wn, kn, kln = _site_row(m, eta, nbr, g1t, g2t, dV, dH, L2, static, s0, sbound, c, w)
            Wt += wn - W[m]
            Kt += kn - K[m]
            KLt += kln - KL[m]
            W[m] = wn
            K[m] = kn
            KL[m] = kln
        since_refresh += 1
        if since_refresh >= 4096:
            since_refresh = 0
            Wt = W.sum()
            Kt = K.sum()
            KLt = KL.sum()
    return jump, comp, kl, n_ev, n_rej, n_draws, _STATUS_OK


@njit(cache=True, parallel=True)
def _ensemble(seeds, eta0, sample, cdf, c_tot, nbr, g1t, g2t, dV, dH, L2, T,
              kind, par, coef, static, sbound, gl_x, gl_w, snap_t, snaps, hsite):
    n_traj = seeds.size
    out = np.zeros((n_traj, 7 + eta0.size))
    status = np.zeros(n_traj, dtype=np.int64)
    ev_t = np.zeros(0)
    ev_i = np.zeros(0, dtype=np.int64)
    for r in prange(n_traj):
        eta = eta0.copy()
        init = np.zeros(eta.size, dtype=np.int64)
        res = _trajectory(seeds[r], eta, sample, cdf, c_tot, nbr, g1t, g2t, dV, dH, L2, T,
                          kind, par, coef, static, sbound, gl_x, gl_w,
                          snap_t, snaps[r], False, ev_t, ev_i, ev_i, init)
        out[r, 0] = res[0]
        out[r, 1] = res[1]
        out[r, 2] = res[2]
        out[r, 3] = res[3]
        out[r, 4] = res[4]
        out[r, 5] = res[5]
        status[r] = res[6]
        acc = 0.0
        for i in range(eta.size):
            acc += eta[i] * hsite[i]
        out[r, 6] = acc
        for i in range(eta.size):
            out[r, 7 + i] = init[i]
    return out, status


# ---------------------------------------------------------------------------
# Set-up helpers
# ---------------------------------------------------------------------------


class _Tables:
    """Lattice neighbour table, rate lookup tables and potential differences."""

    def __init__(self, model, pot, L, n_max_particles):
        self.lattice = TorusLattice(L, model.dim)
        lat = self.lattice
        d = lat.dim
        self.nbr = np.stack([lat.shift(q // 2, 1 if q % 2 == 0 else -1) for q in range(2 * d)], axis=1)
        occ = np.arange(n_max_particles + 2)
        self.g1t = np.asarray(model.g1(occ), dtype=float)
        self.g2t = np.asarray(model.g2(occ), dtype=float)
        pos = lat.positions if d > 1 else lat.positions[:, 0]
        self.v_sites = np.asarray(pot.V(pos), dtype=float)
        self.h_sites = np.asarray(pot.H(pos), dtype=float)
        self.dV = self.v_sites[self.nbr] - self.v_sites[:, None]
        self.dH = self.h_sites[self.nbr] - self.h_sites[:, None]
        self.L2 = float(L**2)
        env = pot.envelope
        self.kind = {"constant": 0, "polynomial": 1, "cosine": 2}[env.kind]
        if env.kind == "constant":
            self.par = np.array([env.value, 0.0, 0.0, 0.0])
        else:
            self.par = np.array([env.amplitude, env.omega, env.phase, env.offset])
        self.coef = np.array(env.coeffs if env.coeffs else [0.0], dtype=float)
        self.static = bool(pot.is_time_independent)
        self.envelope = env


def _site_cdf(model, density):
    """Inverse-CDF tables of the product local-Gibbs law, one row per site."""
    density = np.asarray(density, dtype=float)
    theta = np.atleast_1d(theta_of_density(model, density))
    fam = _Family(model, theta)
    cdf = np.cumsum(fam.w, axis=1)
    cdf[:, -1] = 1.0
    return cdf


def _profile_values(profile, lattice):
    pos = lattice.positions if lattice.dim > 1 else lattice.positions[:, 0]
    vals = profile(pos) if callable(profile) else np.broadcast_to(np.asarray(profile, dtype=float), (lattice.n_sites,))
    return np.asarray(vals, dtype=float).reshape(-1)


def sample_initial(model, L, rho0, seed, stream=0, c_tot=None):
    """Product local-Gibbs draw with site laws ``nu_{rho0(i/L)}``.

    Draws are rejected while the total density exceeds ``c_tot``
    (default ``2 max rho0``).
    """
    lat = TorusLattice(L, model.dim)
    dens = _profile_values(rho0, lat)
    if np.any(dens <= 0) or (model.n_max is not None and np.any(dens >= model.n_max)):
        raise InvalidConfigurationError("initial densities must lie in (0, N_max)")
    c_tot = 2.0 * float(dens.max()) if c_tot is None else float(c_tot)
    cdf = _site_cdf(model, dens)
    eta = np.zeros(lat.n_sites, dtype=np.int64)
    tabs = _Tables(model, Potential.zero(model.dim), L, cdf.shape[1])
    res = _trajectory(
        stream_seed(seed, stream), eta, True, cdf, c_tot, tabs.nbr, tabs.g1t, tabs.g2t,
        tabs.dV, tabs.dH, tabs.L2, 0.0, 0, np.zeros(4), np.zeros(1), True, 0.0,
        _GL_NODES, _GL_WEIGHTS, np.zeros(0), np.zeros((0, lat.n_sites), dtype=np.int64),
        False, np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
        np.zeros(lat.n_sites, dtype=np.int64),
    )
    if res[6] == _STATUS_REJECTION:
        raise InvalidConfigurationError(
            f"total-density bound c_tot={c_tot:g} rejects more than 99.99% of draws"
        )
    return eta.reshape(lat.shape)


@dataclass
class TrajectorySample:
    """A recorded trajectory: initial state, jump events and bookkeeping."""

    eta0: np.ndarray
    event_times: np.ndarray
    event_sites: np.ndarray
    event_dirs: np.ndarray
    T: float
    L: int
    dim: int
    seed: int
    stream: int
    eta_T: np.ndarray
    kernel_log_density: float
    n_rejected: int = 0

    @property
    def n_events(self):
        return self.event_times.size

    def event_targets(self):
        lat = TorusLattice(self.L, self.dim)
        q = self.event_dirs
        out = np.empty_like(self.event_sites)
        for qq in range(2 * self.dim):
            sel = q == qq
            out[sel] = lat.shift(qq // 2, 1 if qq % 2 == 0 else -1)[self.event_sites[sel]]
        return out

    def replay(self, times=None):
        """Configurations after each event (or at the given ``times``)."""
        eta = self.eta0.reshape(-1).copy()
        tgt = self.event_targets()
        if times is None:
            out = [eta.copy()]
            for i, j in zip(self.event_sites, tgt):
                eta[i] -= 1
                eta[j] += 1
                if eta[i] < 0:
                    raise ContractViolation("inadmissible event")
                out.append(eta.copy())
            return np.array(out)
        times = np.asarray(times, dtype=float)
        out = np.empty((times.size, eta.size), dtype=eta.dtype)
        k = 0
        for m, t in enumerate(times):
            while k < self.n_events and self.event_times[k] <= t:
                eta[self.event_sites[k]] -= 1
                eta[tgt[k]] += 1
                k += 1
            out[m] = eta
        return out


def simulate(model, pot, eta0, T, seed, stream=0, max_events=10_000_000):
    """One trajectory of the process with potential ``pot`` (events recorded)."""
    eta0 = np.asarray(eta0, dtype=np.int64)
    model.check_configuration(eta0)
    L = eta0.shape[0]
    lat = TorusLattice(L, model.dim)
    if eta0.size != lat.n_sites:
        raise ContractViolation("configuration shape does not match the model dimension")
    tabs = _Tables(model, pot, L, int(eta0.sum()))
    eta = eta0.reshape(-1).copy()
    cap = int(max_events)
    ev_t = np.zeros(cap)
    ev_i = np.zeros(cap, dtype=np.int64)
    ev_q = np.zeros(cap, dtype=np.int64)
    sbound = tabs.envelope.abs_bound(T)
    seed32 = stream_seed(seed, stream)
    res = _trajectory(
        seed32, eta, False, np.zeros((1, 1)), 0.0, tabs.nbr, tabs.g1t, tabs.g2t, tabs.dV, tabs.dH,
        tabs.L2, float(T), tabs.kind, tabs.par, tabs.coef, tabs.static, sbound, _GL_NODES, _GL_WEIGHTS,
        np.zeros(0), np.zeros((0, lat.n_sites), dtype=np.int64), True, ev_t, ev_i, ev_q,
        np.zeros(lat.n_sites, dtype=np.int64),
    )
    jump, comp, _, n_ev, n_rej, _, status = res
    if status == _STATUS_ENVELOPE:
        raise EnvelopeViolationError("thinning bound violated; the envelope bound is wrong")
    if status == _STATUS_OVERFLOW:
        raise ContractViolation(f"more than {max_events} events; raise max_events")
    return TrajectorySample(
        eta0.copy(), ev_t[:n_ev].copy(), ev_i[:n_ev].copy(), ev_q[:n_ev].copy(), float(T), L, model.dim,
        int(seed), int(stream), eta.reshape(lat.shape), float(jump - comp), int(n_rej),
    )


def girsanov_log_density(sample, model, pot, n_nodes=8):
    """``log dP^{V+H~}/dP^V`` of a recorded trajectory, recomputed from its events.

    Uses the boundary form ``-1/2 [sum eta_T H~_T - sum eta_0 H~_0 -
    int sum eta_t d/dt H~_t dt]`` minus the compensator
    ``int sum_edges r^V (exp(-grad H~ / 2) - 1) dt``; the compensator is
    integrated with Gauss-Legendre on every inter-jump segment.
    """
    if pot.H.is_zero:
        return 0.0
    L = sample.L
    lat = TorusLattice(L, sample.dim)
    configs = sample.replay()
    tabs = _Tables(model, pot, L, int(sample.eta0.sum()))
    env = pot.envelope
    bounds = np.concatenate([[0.0], sample.event_times, [sample.T]])
    h = tabs.h_sites
    # boundary and time-derivative terms
    eh = configs @ h
    s_b = env(bounds)
    boundary = eh[-1] * s_b[-1] - eh[0] * s_b[0] - np.sum(eh * (s_b[1:] - s_b[:-1]))
    # compensator
    g1 = tabs.g1t[configs]
    g2 = tabs.g2t[configs[:, tabs.nbr]]
    base = tabs.L2 * g1[:, :, None] * g2 * np.exp(-0.5 * tabs.dV)[None]
    x, wq = np.polynomial.legendre.leggauss(n_nodes)
    half = 0.5 * np.diff(bounds)
    mid = 0.5 * (bounds[1:] + bounds[:-1])
    comp = 0.0
    for xg, wg in zip(x, wq):
        s = env(mid + half * xg)
        comp += np.sum(wg * half * np.sum(base * np.expm1(-0.5 * s[:, None, None] * tabs.dH[None]), axis=(1, 2)))
    del lat
    return float(-0.5 * boundary - comp)


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------


@dataclass
class EnsembleStats:
    """Means, variances and standard errors of per-trajectory quantities."""

    count: int
    mean: dict = field(default_factory=dict)
    variance: dict = field(default_factory=dict)
    stderr: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def add(self, name, values):
        values = np.asarray(values, dtype=float)
        self.mean[name] = float(values.mean()) if values.size else np.nan
        self.variance[name] = float(values.var(ddof=1)) if values.size > 1 else 0.0
        self.stderr[name] = math.sqrt(self.variance[name] / values.size) if values.size else np.nan


@dataclass
class EnsembleResult:
    """Per-trajectory columns, initial states and density snapshots of an ensemble."""

    per_trajectory: np.ndarray
    snapshots: np.ndarray
    snapshot_times: np.ndarray
    L: int
    dim: int
    initial_mean: np.ndarray | None = None

    @property
    def jump_term(self):
        return self.per_trajectory[:, 0]

    @property
    def compensator(self):
        return self.per_trajectory[:, 1]

    @property
    def log_density(self):
        return self.per_trajectory[:, 0] - self.per_trajectory[:, 1]

    @property
    def kl_integral(self):
        return self.per_trajectory[:, 2]

    @property
    def n_events(self):
        return self.per_trajectory[:, 3]

    @property
    def n_rejected(self):
        return self.per_trajectory[:, 4]

    @property
    def initial_states(self):
        return self.per_trajectory[:, 7:]


def control_variate_mean(y, x, x_mean):
    """Regression-adjusted mean of ``y`` using controls ``x`` with known mean ``x_mean``.

    Returns ``(mean, stderr)``; the standard error uses the residual
    variance with ``n - p - 1`` degrees of freedom.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float).reshape(y.size, -1)
    n, p = x.shape
    if n <= p + 2:
        raise ContractViolation("too few samples for the number of controls")
    xc = x - x.mean(axis=0)
    yc = y - y.mean()
    beta = np.linalg.lstsq(xc, yc, rcond=None)[0]
    adj = y - (x - np.asarray(x_mean, dtype=float)) @ beta
    resid = yc - xc @ beta
    s2 = float(resid @ resid) / (n - p - 1)
    return float(adj.mean()), math.sqrt(s2 / n)


def set_threads(threads):
    """Size the worker pool (``HYDROACTION_THREADS`` is the fallback)."""
    if threads is None:
        threads = int(os.environ.get("HYDROACTION_THREADS", "0") or 0)
    if threads and threads > 0:
        numba.set_num_threads(min(int(threads), numba.config.NUMBA_NUM_THREADS))


def run_ensemble(model, pot, L, rho0, T, n_traj, seed, snapshot_times=None, c_tot=None,
                 threads=None, stream_offset=0, eta0=None):
    """Simulate ``n_traj`` trajectories.

    Initial states are drawn from the product law with site densities
    ``rho0(i/L)``, or all start from the fixed configuration ``eta0`` when it
    is given. Per-trajectory columns are ``(jump_term, compensator,
    kl_integral, n_events, n_rejected, n_initial_draws, sum_i eta_T(i)
    H(i/L), eta_0(0), ..., eta_0(L^d - 1))``; snapshots have shape
    ``(n_traj, n_times, L^d)``.
    """
    set_threads(threads)
    lat = TorusLattice(L, model.dim)
    if eta0 is None:
        dens = _profile_values(rho0, lat)
        if np.any(dens <= 0) or (model.n_max is not None and np.any(dens >= model.n_max)):
            raise InvalidConfigurationError("initial densities must lie in (0, N_max)")
        c_tot = 2.0 * float(dens.max()) if c_tot is None else float(c_tot)
        cdf = _site_cdf(model, dens)
        n_cap = int(math.ceil(c_tot * lat.n_sites)) + cdf.shape[1]
        start = np.zeros(lat.n_sites, dtype=np.int64)
        init_mean = np.array([float(np.squeeze(_Family(model, th).mean)) for th in np.atleast_1d(theta_of_density(model, dens))])
    else:
        start = np.asarray(eta0, dtype=np.int64).reshape(-1)
        if start.size != lat.n_sites:
            raise ContractViolation("configuration shape does not match the lattice")
        model.check_configuration(start)
        cdf, c_tot, n_cap = np.zeros((1, 1)), 0.0, int(start.sum())
        init_mean = start.astype(float)
    tabs = _Tables(model, pot, L, n_cap)
    snap_t = np.asarray([] if snapshot_times is None else snapshot_times, dtype=float)
    snaps = np.zeros((n_traj, snap_t.size, lat.n_sites), dtype=np.int64)
    seeds = np.array([stream_seed(seed, stream_offset + r) for r in range(n_traj)], dtype=np.int64)
    out, status = _ensemble(
        seeds, start, eta0 is None, cdf, c_tot, tabs.nbr, tabs.g1t, tabs.g2t,
        tabs.dV, tabs.dH, tabs.L2, float(T), tabs.kind, tabs.par, tabs.coef, tabs.static,
        tabs.envelope.abs_bound(T), _GL_NODES, _GL_WEIGHTS, snap_t, snaps, tabs.h_sites,
    )
    if np.any(status == _STATUS_ENVELOPE):
        raise EnvelopeViolationError("thinning bound violated; the envelope bound is wrong")
    if np.any(status == _STATUS_REJECTION):
        raise InvalidConfigurationError(f"total-density bound c_tot={c_tot:g} rejects almost every draw")
    return EnsembleResult(out, snaps, snap_t, L, model.dim, init_mean)


def action_estimate(model, pot, L, rho0, T, n_traj, seed, threads=None, eta0=None, stream_offset=0):
    """Monte Carlo estimates of the action of ``V + H~`` against ``V``.

    ``pot`` carries the reference ``V`` and the tilt ``H~ = s(t) H``. See
    :func:`action_stats` for the estimators.
    """
    res = run_ensemble(model, pot, L, rho0, T, n_traj, seed, threads=threads, eta0=eta0,
                       stream_offset=stream_offset)
    return action_stats(res, fixed_start=eta0 is not None)


def action_stats(res, fixed_start=False):
    """Action estimators of an ensemble run under the tilted law.

    ``action`` averages the Girsanov log-density; ``kl_action`` averages
    the time integral of the relative-entropy rate along the trajectories,
    with the initial occupations as control variates (their product-law
    means are known). Both are unbiased; ``*_rescaled`` entries are divided
    by ``L^d``.
    """
    n_traj = res.per_trajectory.shape[0]
    vol = res.L**res.dim
    stats = EnsembleStats(n_traj)
    stats.add("action", res.log_density)
    stats.add("action_rescaled", res.log_density / vol)
    stats.add("events", res.n_events)
    kl = res.kl_integral
    if not fixed_start and n_traj >= 50 * (vol + 2):
        m, se = control_variate_mean(kl, res.initial_states, res.initial_mean)
    elif not fixed_start and n_traj >= 10:
        m, se = control_variate_mean(kl, res.initial_states.sum(axis=1), res.initial_mean.sum())
    else:
        m = float(kl.mean())
        se = float(kl.std(ddof=1) / math.sqrt(n_traj)) if n_traj > 1 else np.nan
    stats.mean["kl_action"], stats.stderr["kl_action"] = m, se
    stats.mean["kl_action_rescaled"], stats.stderr["kl_action_rescaled"] = m / vol, se / vol
    stats.extra["rejected_fraction"] = float(res.n_rejected.sum() / max(1.0, res.n_events.sum() + res.n_rejected.sum()))
    return stats


def field_estimates(snapshots, model, L, eps, scalars=None):
    """Density field time series and local-equilibrium defect estimates.

    ``snapshots`` has shape ``(n_traj, n_times, L^d)``. The defect of each
    trajectory is its time average over the snapshot grid; means and
    standard errors are over trajectories.
    """
    from .exact import local_equilibrium_defect

    snapshots = np.asarray(snapshots)
    n_traj, n_t, n_sites = snapshots.shape
    stats = EnsembleStats(n_traj)
    dens = snapshots.mean(axis=0)
    dens_se = snapshots.std(axis=0, ddof=1) / math.sqrt(n_traj) if n_traj > 1 else np.zeros_like(dens, dtype=float)
    per_chi = np.zeros(n_traj)
    per_phi = np.zeros(n_traj)
    w = np.full(n_t, 1.0 / n_t)
    for r in range(n_traj):
        per_chi[r], per_phi[r] = local_equilibrium_defect(model, snapshots[r], w, L, eps, scalars)
    stats.add("defect_chi", per_chi)
    stats.add("defect_phi", per_phi)
    stats.extra["density"] = dens
    stats.extra["density_stderr"] = dens_se
    return stats

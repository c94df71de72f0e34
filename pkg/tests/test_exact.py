import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from hydroaction.errors import InconsistencyError, SectorSizeError
from hydroaction.exact import (
    ConfigSector,
    block_average,
    canonical_fields,
    chain_rule_residual,
    divergence,
    empirical_measure,
    enumerate_sector,
    evolve,
    generator_rhs,
    kl_rate,
    linear_force_bounds,
    local_equilibrium_defect,
    micro_action,
    micro_free_energy,
    mollified_field,
    onsager_machlup,
    pairing,
    point_mass,
    product_measure,
    project,
    psi,
    psi_star,
    psi_star_lower_bound,
    sector_size,
    stationary_measure,
    time_average,
)
from hydroaction.lattice import Envelope, FourierSeries, LatticeModel, Potential, ScalarFunctions, TorusLattice

SEP = LatticeModel.sep()
WALKERS = LatticeModel.zrp("linear")
TABLE = LatticeModel.zrp((1.0, 1.5, 1.75, 2.0))


def two_site():
    sector = ConfigSector(SEP, 2, 1, 1)
    # lexicographic order: (0, 1) then (1, 0)
    assert sector.index_of(np.array([1, 0])) == 1
    return sector


def cosine_pot(amp_v=0.4, amp_h=0.3, omega=20.0):
    return Potential(FourierSeries.cosine(amp_v), FourierSeries(((1, 0.1, amp_h),)),
                     Envelope("cosine", amplitude=1.0, omega=omega, offset=0.2))


def test_sector_sizes():
    assert enumerate_sector(4, 1, 2, SEP).size == 6
    assert enumerate_sector(3, 1, 2, WALKERS).size == 6
    s = enumerate_sector(2, 1, 1, SEP)
    assert s.size == 2
    pairs = set(zip(s.src.tolist(), s.dst.tolist()))
    assert pairs == {(0, 1), (1, 0)}
    for model, L, d, N in [(SEP, 5, 1, 2), (WALKERS, 4, 1, 5), (TABLE, 3, 2, 3), (SEP, 3, 2, 4)]:
        model = dataclasses.replace(model, dim=d)
        sec = ConfigSector(model, L, d, N)
        assert sec.size == sector_size(model, L, d, N)
        assert np.unique(sec.states, axis=0).shape[0] == sec.size
        assert np.all(sec.states.sum(axis=1) == N)
        assert sec.has_reverse_transitions
        # lexicographic order
        keys = [tuple(x) for x in sec.states]
        assert keys == sorted(keys)


def test_sector_cap():
    with pytest.raises(SectorSizeError):
        ConfigSector(WALKERS, 10, 1, 10, cap=1000)


def test_two_site_relaxation_matches_closed_form():
    sector = two_site()
    times = np.linspace(0, 0.3, 31)
    mu0 = point_mass(sector, [1, 0])
    for method in ("expm", "Radau", "DOP853"):
        path = evolve(sector, Potential.zero(), mu0, times, method=method)
        np.testing.assert_allclose(path.mu[:, 1], 0.5 + 0.5 * np.exp(-16 * times), atol=1e-9)


def test_evolve_against_dense_expm():
    sector = ConfigSector(TABLE, 3, 1, 3)
    pot = Potential.static(FourierSeries.cosine(0.5))
    rng = np.random.default_rng(3)
    mu0 = rng.dirichlet(np.ones(sector.size))
    Q = np.zeros((sector.size, sector.size))
    rates = sector.edge_rates(pot)(0.0)
    np.add.at(Q, (sector.dst, sector.src), rates)
    np.add.at(Q, (sector.src, sector.src), -rates)
    path = evolve(sector, pot, mu0, np.array([0.0, 0.01, 0.02]), method="Radau", rtol=1e-12)
    np.testing.assert_allclose(path.mu[-1], expm(0.02 * Q) @ mu0, atol=1e-10)


def test_stationary_measure_is_invariant():
    sector = ConfigSector(TABLE, 4, 1, 4)
    pot = Potential.static(FourierSeries(((1, 0.5, 0.2), (2, 0.0, 0.3))))
    mu = stationary_measure(sector, pot)
    path = evolve(sector, pot, mu, np.linspace(0, 0.2, 5))
    np.testing.assert_allclose(path.mu, np.broadcast_to(mu, path.mu.shape), atol=1e-12)
    np.testing.assert_allclose(path.mu.sum(axis=1), 1.0, atol=1e-12)


def test_time_dependent_evolution_conserves_mass():
    sector = ConfigSector(WALKERS, 3, 1, 3)
    path = evolve(sector, cosine_pot(), product_measure(sector, [1, 1, 1]), np.linspace(0, 0.1, 21))
    assert path.stats["normalisation_drift"] < 1e-10
    np.testing.assert_allclose(path.mu @ sector.states.sum(axis=1), 3.0, atol=1e-9)


def test_canonical_fields_two_site():
    sector = two_site()
    p = 0.7
    fld = canonical_fields(sector, Potential.zero(), 0.0, np.array([1 - p, p]))
    # symmetric rate c = L^2 * (two parallel edges) = 8; j on (10) -> (01) is c(2p - 1)
    assert -fld.j[0] == pytest.approx(8 * (2 * p - 1))
    assert fld.a[0] == pytest.approx(2 * math.sqrt(8 * p * 8 * (1 - p)))


def test_force_vanishes_at_equilibrium():
    sector = ConfigSector(TABLE, 4, 1, 3)
    pot = Potential.static(FourierSeries.cosine(0.8))
    fld = canonical_fields(sector, pot, 0.0, stationary_measure(sector, pot))
    np.testing.assert_allclose(fld.F, 0.0, atol=1e-12)
    np.testing.assert_allclose(fld.j, 0.0, atol=1e-12)
    assert psi_star(fld.a, fld.F) == pytest.approx(0.0, abs=1e-20)


def test_force_undefined_without_mass():
    sector = ConfigSector(SEP, 4, 1, 2)
    fld = canonical_fields(sector, Potential.zero(), 0.0, point_mass(sector, [1, 1, 0, 0]))
    assert not np.all(fld.defined)
    # the point mass has a current on zero-mobility pairs
    with pytest.raises(InconsistencyError):
        psi(fld.a, fld.j)


def test_psi_star_hand_value():
    assert psi_star(np.array([2.0]), np.array([1.0])) == pytest.approx(4 * (math.cosh(0.5) - 1), rel=1e-14)
    assert psi_star(np.array([2.0]), np.array([1.0])) == pytest.approx(0.510504, abs=1e-6)
    assert psi(np.array([0.0]), np.array([0.0])) == 0.0


@settings(max_examples=1000, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_fenchel_young_random_small_sectors(seed):
    rng = np.random.default_rng(seed)
    model = [SEP, WALKERS, TABLE][seed % 3]
    L = 3 + seed % 2
    N = 2 if model is SEP else 1 + seed % 3
    sector = ConfigSector(model, L, 1, N)
    mu = rng.dirichlet(np.ones(sector.size))
    fld = canonical_fields(sector, Potential.static(FourierSeries.cosine(rng.normal())), 0.0, mu)
    j = rng.normal(scale=5.0, size=fld.j.size)
    F = rng.normal(scale=3.0, size=fld.F.size)
    assert onsager_machlup(fld.a, j, F) >= -1e-10
    assert onsager_machlup(fld.a, fld.j, fld.F) >= -1e-10
    j_opt = fld.a * np.sinh(0.5 * F)
    assert abs(onsager_machlup(fld.a, j_opt, F)) < 1e-10 * max(1.0, float(np.sum(fld.a)))


@settings(max_examples=100, deadline=None)
@given(a=st.lists(st.floats(0.0, 10.0), min_size=1, max_size=8), seed=st.integers(0, 1000))
def test_psi_and_psi_star_are_even(a, seed):
    a = np.array(a)
    rng = np.random.default_rng(seed)
    j = rng.normal(size=a.size) * (a > 1e-300)
    F = rng.normal(size=a.size)
    assert psi(a, j) == pytest.approx(psi(a, -j), rel=1e-12, abs=1e-300)
    assert psi_star(a, F) == pytest.approx(psi_star(a, -F), rel=1e-12, abs=1e-300)
    assert psi(a, j) >= 0 and psi_star(a, F) >= 0
    assert pairing(j, F, a) == pytest.approx(-pairing(-j, F, a))


def test_kl_two_site_hand_value():
    sector = two_site()
    fe = micro_free_energy(sector, Potential.zero(), 0.5, np.array([0.1, 0.9]))
    assert fe.conditional == pytest.approx(0.9 * math.log(1.8) + 0.1 * math.log(0.2), abs=1e-12)
    assert fe.conditional == pytest.approx(0.368064, abs=1e-6)
    assert fe.value == pytest.approx(fe.conditional - fe.log_sector_mass, abs=1e-14)


def test_free_energy_zero_at_conditioned_equilibrium():
    sector = ConfigSector(TABLE, 4, 1, 4)
    pot = Potential.static(FourierSeries.cosine(0.5))
    fe = micro_free_energy(sector, pot, 1.0, stationary_measure(sector, pot))
    assert abs(fe.conditional) < 1e-12
    assert fe.value >= 0


def test_free_energy_differences_independent_of_alpha():
    sector = ConfigSector(WALKERS, 4, 1, 3)
    pot = Potential.static(FourierSeries.cosine(0.5))
    rng = np.random.default_rng(0)
    m1, m2 = rng.dirichlet(np.ones(sector.size)), rng.dirichlet(np.ones(sector.size))
    d1 = micro_free_energy(sector, pot, 0.4, m1).value - micro_free_energy(sector, pot, 0.4, m2).value
    d2 = micro_free_energy(sector, pot, 1.9, m1).value - micro_free_energy(sector, pot, 1.9, m2).value
    assert d1 == pytest.approx(d2, abs=1e-10)


def test_action_vanishes_for_reference_dynamics():
    sector = ConfigSector(WALKERS, 3, 1, 3)
    pot = cosine_pot()
    path = evolve(sector, pot, product_measure(sector, [1.5, 0.5, 1.0]), np.linspace(0, 0.05, 201))
    ab = micro_action(path, pot)
    assert abs(ab.total) < 1e-10
    assert ab.total == pytest.approx(ab.decomposed_total, abs=1e-8)


def test_action_breakdown_and_independent_quadrature():
    sector = two_site()
    ref = Potential.zero()
    obs = Potential(FourierSeries.zero(), FourierSeries.cosine(0.6))
    times = np.linspace(0, 0.2, 401)
    path = evolve(sector, obs, np.array([0.5, 0.5]), times)
    ab = micro_action(path, ref, 0.5)
    assert ab.total >= -ab.quadrature_error
    assert ab.total == pytest.approx(ab.decomposed_total, abs=1e-8)
    fine_t = np.linspace(0, 0.2, 20001)
    fine = evolve(sector, obs, np.array([0.5, 0.5]), fine_t)
    trap = float(np.trapezoid(kl_rate(fine, ref), fine_t))
    assert ab.total == pytest.approx(trap, abs=1e-6)


def test_action_with_time_dependent_tilt_matches_kl_rate():
    sector = ConfigSector(TABLE, 4, 1, 3)
    ref = Potential.static(FourierSeries.cosine(0.4))
    obs = ref.with_tilt(FourierSeries(((1, 0.0, 0.3),)), Envelope("polynomial", coeffs=(0.5, 4.0)))
    times = np.linspace(0, 0.05, 401)
    path = evolve(sector, obs, product_measure(sector, [1.0, 0.5, 1.0, 0.5]), times)
    ab = micro_action(path, ref)
    kl = float(np.trapezoid(kl_rate(path, ref), times))
    assert ab.total == pytest.approx(kl, rel=1e-5)
    assert ab.total == pytest.approx(ab.decomposed_total, abs=1e-8)


def test_chain_rule_stationary():
    sector = ConfigSector(WALKERS, 3, 1, 2)
    pot = Potential.static(FourierSeries.cosine(0.3))
    path = evolve(sector, pot, stationary_measure(sector, pot), np.linspace(0, 0.1, 11))
    assert abs(chain_rule_residual(path)) < 1e-12


def test_chain_rule_two_site_relaxation():
    sector = two_site()
    path = evolve(sector, Potential.static(FourierSeries.cosine(0.7)), np.array([0.8, 0.2]), np.linspace(0, 0.3, 601))
    assert abs(chain_rule_residual(path, 0.5)) < 1e-6
    assert abs(chain_rule_residual(path, 0.5, t1=path.times[100], t2=path.times[500])) < 1e-6


def test_chain_rule_three_site_time_dependent():
    sector = ConfigSector(WALKERS, 3, 1, 3)
    pot = cosine_pot()
    mu0 = product_measure(sector, [2.0, 0.5, 0.5])
    coarse = evolve(sector, pot, mu0, np.linspace(0, 0.1, 401))
    fine = evolve(sector, pot, mu0, np.linspace(0, 0.1, 801))
    r1, r2 = chain_rule_residual(coarse), chain_rule_residual(fine)
    assert abs(r1) < 1e-5 and abs(r2) < 1e-5
    assert abs(r2) <= abs(r1) + 1e-9


def test_projection_gradient_identity_and_continuity():
    sector = ConfigSector(TABLE, 4, 1, 4)
    rng = np.random.default_rng(1)
    mu = rng.dirichlet(np.ones(sector.size))
    sf = project(sector, Potential.zero(), 0.0, mu)
    phi_next = sf.phi[sector.lattice.shift(0, 1)]
    np.testing.assert_allclose(sf.j[:, 0], sf.phi - phi_next, atol=1e-12)
    # d/dt rho = -div (L^2 j) along the forward equation
    pot = cosine_pot()
    rho_dot = generator_rhs(sector, pot, 0.3, mu) @ sector.states
    sf_t = project(sector, pot, 0.3, mu)
    np.testing.assert_allclose(rho_dot, -divergence(sector.lattice, sector.L**2 * sf_t.j), atol=1e-10)
    # mobility bound with equality at equilibrium
    assert np.all(sf_t.a <= 2 * sf_t.chi + 1e-12)
    eq = stationary_measure(sector, pot, 0.3)
    sf_eq = project(sector, pot, 0.3, eq)
    np.testing.assert_allclose(sf_eq.a, 2 * sf_eq.chi, rtol=1e-10)
    np.testing.assert_allclose(sf_eq.j, 0.0, atol=1e-12)


def test_projection_two_site():
    sf = project(two_site(), Potential.zero(), 0.0, np.array([0.3, 0.7]))
    np.testing.assert_allclose(sf.rho, [0.7, 0.3])


def test_linear_force_bounds_random():
    rng = np.random.default_rng(7)
    for model, N in ((SEP, 2), (WALKERS, 3), (TABLE, 4)):
        sector = ConfigSector(model, 4, 1, N)
        for _ in range(10):
            mu = rng.dirichlet(np.ones(sector.size))
            G = FourierSeries(((1, rng.normal(), rng.normal()), (2, rng.normal(), rng.normal())))
            ps, p, upper = linear_force_bounds(sector, mu, G)
            assert ps <= p * (1 + 1e-12) + 1e-12
            assert p <= upper * (1 + 1e-12) + 1e-12
            pot = Potential.static(FourierSeries.cosine(rng.normal()))
            ps_v, bound = psi_star_lower_bound(sector, pot, mu, G)
            assert ps_v >= bound - 1e-10


def test_empirical_measure():
    pos, mass = empirical_measure(np.array([2, 0, 1]))
    np.testing.assert_allclose(pos, [0.0, 2.0 / 3.0])
    np.testing.assert_allclose(mass, [2.0 / 3.0, 1.0 / 3.0])
    eta = np.random.default_rng(0).integers(0, 4, size=(5, 5))
    _, mass = empirical_measure(eta, dim=2)
    assert mass.sum() == pytest.approx(eta.sum() / 25)


@pytest.mark.parametrize("L, eps", [(10, 0.25), (12, 0.3), (9, 0.2)])
def test_mollified_field_identity(L, eps):
    eta = np.random.default_rng(L).integers(0, 5, size=L)
    ell = math.floor(eps * L)
    u = np.arange(L) / L
    expected = (2 * ell + 1) / (2 * eps * L) * block_average(eta, L, 1, ell)
    np.testing.assert_allclose(mollified_field(eta, eps, u), expected, atol=1e-12)


def test_local_equilibrium_point_mass_oracle():
    L, eps = 8, 0.25
    ell = 2
    eta = np.array([3, 0, 1, 2, 0, 0, 4, 1])
    dchi, dphi = local_equilibrium_defect(WALKERS, eta[None], np.ones(1), L, eps)
    blk = block_average(eta, L, 1, ell)
    # chi_hat on a bond is (eta(i) + eta(i+1)) / 2 and chi(a) = a for walkers
    chi_hat = 0.5 * (eta + np.roll(eta, -1))
    direct_chi = np.abs(block_average(chi_hat, L, 1, ell) - blk).sum() / L
    assert dchi == pytest.approx(direct_chi, abs=1e-14)
    assert dphi == pytest.approx(0.0, abs=1e-14)
    flat = np.full(L, 2)
    assert local_equilibrium_defect(WALKERS, flat[None], np.ones(1), L, eps) == pytest.approx((0.0, 0.0), abs=1e-12)


def test_time_average_is_probability():
    sector = ConfigSector(SEP, 4, 1, 2)
    path = evolve(sector, Potential.zero(), point_mass(sector, [1, 1, 0, 0]), np.linspace(0, 0.2, 21))
    avg = time_average(path)
    assert avg.sum() == pytest.approx(1.0) and np.all(avg >= 0)


def test_two_dimensional_sector():
    model = LatticeModel.zrp("linear", dim=2)
    sector = ConfigSector(model, 2, 2, 2)
    pot = Potential.static(FourierSeries.cosine(0.3, k=(1, 1), dim=2))
    assert sector.size == sector_size(model, 2, 2, 2)
    mu = stationary_measure(sector, pot)
    path = evolve(sector, pot, mu, np.linspace(0, 0.1, 3))
    np.testing.assert_allclose(path.mu[-1], mu, atol=1e-12)
    assert TorusLattice(2, 2).n_sites == sector.n_sites
    sf = ScalarFunctions(model)
    assert sf.chi(0.5) == 0.5

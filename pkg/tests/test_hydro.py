import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hydroaction.errors import BoundaryError, ContractViolation
from hydroaction.hydro import (
    DensityField,
    cell_profile,
    hydro_rhs,
    macro_free_energy,
    macro_free_energy_variational,
    solve_pde,
    stationary_profile,
    weak_residual,
)
from hydroaction.lattice import Envelope, FourierSeries, LatticeModel, Potential, ScalarFunctions

SEP = ScalarFunctions(LatticeModel.sep())
WALKERS = ScalarFunctions(LatticeModel.zrp("linear"))
TABLE = ScalarFunctions(LatticeModel.zrp((1.0, 1.5, 1.75, 2.0)))
BUMP = FourierSeries(((1, 0.5, 0.0),), 1.0)


def heat_cell_average(M, t, amp=0.5):
    # exact cell average of 1 + amp cos(2 pi u) exp(-4 pi^2 t)
    factor = math.sin(math.pi / M) / (math.pi / M)
    c = (np.arange(M) + 0.5) / M
    return 1.0 + amp * factor * np.cos(2 * np.pi * c) * math.exp(-4 * math.pi**2 * t)


def test_rhs_vanishes_on_constants():
    for sf in (SEP, WALKERS, TABLE):
        rho = np.full(16, 0.4)
        np.testing.assert_allclose(hydro_rhs(sf, Potential.zero(), 0.0, rho), 0.0, atol=1e-12)


def test_walkers_rhs_is_discrete_laplacian():
    M = 128
    rho = cell_profile(BUMP, M)
    out = hydro_rhs(WALKERS, Potential.zero(), 0.0, rho)
    c = rho.centers
    np.testing.assert_allclose(out, -2 * np.pi**2 * np.cos(2 * np.pi * c), atol=2e-2)
    err = [np.max(np.abs(hydro_rhs(WALKERS, Potential.zero(), 0.0, cell_profile(BUMP, m)).ravel()
                         + 2 * np.pi**2 * np.cos(2 * np.pi * cell_profile(BUMP, m).centers))) for m in (32, 64)]
    assert err[1] < err[0] / 3


def test_rhs_vanishes_on_stationary_profile_at_second_order():
    pot = Potential.static(FourierSeries.cosine(0.7))
    res = []
    for M in (32, 64, 128):
        rho = stationary_profile(TABLE, pot, 0.8, M)
        res.append(np.max(np.abs(hydro_rhs(TABLE, pot, 0.0, rho))))
    assert res[1] < res[0] / 3 and res[2] < res[1] / 3


def test_heat_equation_accuracy():
    M = 256
    T = 0.05
    series = solve_pde(WALKERS, Potential.zero(), cell_profile(BUMP, M), T, n_times=11)
    err = math.sqrt(np.mean((series.values[-1] - heat_cell_average(M, T)) ** 2))
    assert err < 1e-4
    coarse = solve_pde(WALKERS, Potential.zero(), cell_profile(BUMP, 64), T, n_times=3)
    err_c = math.sqrt(np.mean((coarse.values[-1] - heat_cell_average(64, T)) ** 2))
    assert err < err_c / 8


@pytest.mark.parametrize("sf", [SEP, TABLE])
def test_constant_profile_stays_constant(sf):
    series = solve_pde(sf, Potential.zero(), DensityField(np.full(32, 0.3), 32), 0.1, n_times=5)
    np.testing.assert_allclose(series.values, 0.3, atol=1e-12)


def test_mass_conservation_with_time_dependent_tilt():
    pot = Potential.static(FourierSeries.cosine(0.5)).with_tilt(
        FourierSeries(((1, 0.0, 1.0),)), Envelope("cosine", amplitude=1.0, omega=20.0))
    rho0 = cell_profile(FourierSeries(((1, 0.2, 0.1),), 0.5), 64)
    series = solve_pde(SEP, pot, rho0, 0.1, n_times=21)
    mass = series.mass()
    np.testing.assert_allclose(mass, mass[0], rtol=1e-12)
    assert series.info["mass_drift"] < 1e-8
    assert np.all(series.values > 0) and np.all(series.values < 1)


def test_solve_pde_input_checks():
    with pytest.raises(ContractViolation):
        solve_pde(SEP, Potential.zero(), np.full(8, 0.5), 0.1)
    with pytest.raises(BoundaryError):
        solve_pde(SEP, Potential.zero(), DensityField(np.full(8, 1.0), 8), 0.1)
    with pytest.raises(ContractViolation):
        DensityField(np.zeros((3, 8)), 8, times=np.arange(2.0))


def test_weak_residual():
    pot = Potential.static(FourierSeries.cosine(0.4))
    one = FourierSeries((), 1.0)
    res = {}
    for M in (64, 128):
        series = solve_pde(TABLE, pot, cell_profile(BUMP, M), 0.05, n_times=101)
        res[M] = abs(weak_residual(series, TABLE, pot, FourierSeries.cosine(1.0)))
    assert abs(weak_residual(series, TABLE, pot, one)) < 1e-12
    # midpoint quadrature of cell averages is second order in the mesh
    assert res[128] < 1e-4
    assert 3.0 < res[64] / res[128] < 5.0
    env = Envelope("polynomial", coeffs=(1.0, 3.0))
    assert abs(weak_residual(series, TABLE, pot, FourierSeries(((2, 0.0, 1.0),)), env)) < 1e-4
    with pytest.raises(ContractViolation):
        weak_residual(series.snapshot(0), TABLE, pot, one)


def test_macro_free_energy_values():
    rb = stationary_profile(TABLE, Potential.static(FourierSeries.cosine(0.3)), 0.9, 64)
    assert macro_free_energy(TABLE, Potential.static(FourierSeries.cosine(0.3)), 0.9, rb) == pytest.approx(0.0, abs=1e-14)
    val = macro_free_energy(SEP, Potential.zero(), 0.5, np.full(16, 0.6))
    assert val == pytest.approx(0.6 * math.log(1.2) + 0.4 * math.log(0.8), abs=1e-12)
    assert val == pytest.approx(0.0201355, abs=1e-7)
    with pytest.raises(BoundaryError):
        macro_free_energy(SEP, Potential.zero(), 0.5, np.full(4, 1.0))


@pytest.mark.parametrize("sf", [SEP, WALKERS, TABLE])
def test_macro_free_energy_variational_form(sf):
    pot = Potential.static(FourierSeries.cosine(0.5))
    rho = cell_profile(FourierSeries(((1, 0.1, 0.2),), 0.5), 32)
    direct = macro_free_energy(sf, pot, 0.6, rho)
    assert macro_free_energy_variational(sf, pot, 0.6, rho) == pytest.approx(direct, abs=1e-8)
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert macro_free_energy_variational(sf, pot, 0.6, rho, h_func=rng.normal(size=32)) <= direct + 1e-12


def _ordered_solutions(sf, amp, shift, M=32):
    pot = Potential.static(FourierSeries.cosine(0.6))
    lo = cell_profile(FourierSeries(((1, amp, 0.0), (3, 0.0, 0.05)), 0.4), M)
    hi = DensityField(lo.values + shift, M)
    return solve_pde(sf, pot, lo, 0.05, n_times=6), solve_pde(sf, pot, hi, 0.05, n_times=6)


@settings(max_examples=20, deadline=None)
@given(shift=st.floats(0.01, 0.3), amp=st.floats(0.0, 0.15))
def test_comparison_principle(shift, amp):
    a, b = _ordered_solutions(SEP, amp, shift)
    assert np.all(b.values >= a.values - 1e-10)


def test_comparison_principle_generic_rates():
    a, b = _ordered_solutions(TABLE, 0.1, 0.2, M=16)
    assert np.all(b.values >= a.values - 1e-10)


def test_free_energy_is_non_increasing():
    pot = Potential.static(FourierSeries.cosine(0.8))
    rho0 = cell_profile(FourierSeries(((1, 0.0, 0.3), (2, 0.2, 0.0)), 0.6), 64)
    series = solve_pde(SEP, pot, rho0, 0.1, n_times=41)
    fe = np.array([macro_free_energy(SEP, pot, 0.6, series.snapshot(k)) for k in range(len(series))])
    assert np.all(np.diff(fe) <= 1e-12)
    assert fe[-1] < 0.5 * fe[0]

"""Core types: construction, moments, transforms."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qcond.core import (
    ClassicalEnsemble,
    DegenerateEnsembleError,
    GridResolutionError,
    PositionGrid,
    SupportEscapeError,
    SystemSpec,
    force_moments,
    gaussian_state,
    moments,
    wigner_moments,
    wigner_transform,
)


@pytest.fixture
def grid():
    return PositionGrid(-10.0, 10.0, 128)


def test_grid_requires_power_of_two():
    with pytest.raises(ValueError):
        PositionGrid(-1, 1, 100)
    with pytest.raises(ValueError):
        PositionGrid(-1, 1, 8)


def test_quartic_cap_enforced():
    with pytest.raises(ValueError):
        SystemSpec(mass=1.0, potential_coeffs=(0, 0, 0, 0, 0, 1.0))


def test_effective_potential_includes_drive_and_control():
    spec = SystemSpec(mass=1.0, potential_coeffs=(0, 0, 0.5),
                      drive_amplitude=2.0, drive_frequency=3.0, control_offset=0.7)
    x, t = 1.5, 0.4
    expected = 0.5 * x**2 + 2.0 * x * np.cos(3.0 * t) - 0.7 * x
    assert spec.potential(x, t) == pytest.approx(expected, rel=1e-14)
    # force is the exact negative gradient
    expected_f = -(x + 2.0 * np.cos(3.0 * t) - 0.7)
    assert spec.force(x, t) == pytest.approx(expected_f, rel=1e-14)


# --- gaussian_state -----------------------------------------------------------


def test_gaussian_state_minimum_uncertainty(grid):
    st_ = gaussian_state(grid, 0.0, 0.0, 1.0, hbar=1.0)
    m = moments(st_)
    assert m.x_mean == pytest.approx(0.0, abs=1e-9)
    assert m.p_mean == pytest.approx(0.0, abs=1e-9)
    assert m.c_xx == pytest.approx(1.0, rel=1e-7)
    assert m.c_pp == pytest.approx(0.25, rel=1e-7)
    assert m.c_xp == pytest.approx(0.0, abs=1e-9)
    assert m.purity == pytest.approx(1.0, abs=1e-9)


def test_gaussian_state_translation(grid):
    m = moments(gaussian_state(grid, 2.0, -1.0, 0.5, hbar=1.0))
    assert m.x_mean == pytest.approx(2.0, abs=1e-6)
    assert m.p_mean == pytest.approx(-1.0, abs=1e-6)


def test_gaussian_state_cpp_scales_with_hbar(grid):
    # analytic: C_pp = hbar^2 / (4 sigma_x^2)
    m = moments(gaussian_state(grid, 0.0, 0.0, 1.0, hbar=2.0))
    assert m.c_pp == pytest.approx(1.0, rel=1e-7)


def test_gaussian_state_rejects_coarse_grid():
    coarse = PositionGrid(-10, 10, 16)
    with pytest.raises(GridResolutionError):
        gaussian_state(coarse, 0.0, 0.0, 0.5, hbar=1.0)


def test_gaussian_state_rejects_support_escape(grid):
    with pytest.raises(SupportEscapeError):
        gaussian_state(grid, 9.0, 0.0, 1.0, hbar=1.0)


@settings(max_examples=25, deadline=None)
@given(
    x0=st.floats(-3.0, 3.0),
    p0=st.floats(-3.0, 3.0),
    sigma=st.floats(0.4, 1.4),
)
def test_gaussian_state_roundtrip_property(x0, p0, sigma):
    grid = PositionGrid(-12.0, 12.0, 128)
    m = moments(gaussian_state(grid, x0, p0, sigma, hbar=1.0))
    assert m.x_mean == pytest.approx(x0, abs=2e-6 * max(1, abs(x0)))
    assert m.p_mean == pytest.approx(p0, abs=2e-6 * max(1, abs(p0)))
    assert m.c_xx == pytest.approx(sigma**2, rel=2e-6)
    assert m.c_pp == pytest.approx(1.0 / (4 * sigma**2), rel=2e-6)
    # uncertainty floor for every constructed state
    assert m.uncertainty_product() >= 0.25 * (1 - 1e-6)


# --- moments ------------------------------------------------------------------


def test_moments_energy_gaussian_harmonic(grid):
    # <H> = C_pp/2m + (C_xx + x^2)/2 * mw^2 ... for x0=0: 0.5*(C_pp + C_xx) here
    sys_ = SystemSpec(mass=1.0, hbar=1.0, potential_coeffs=(0, 0, 0.5))
    m = moments(gaussian_state(grid, 0.0, 0.0, 1.0, hbar=1.0), sys_, 0.0)
    assert m.energy == pytest.approx(0.625, rel=1e-6)


def test_moments_two_point_ensemble():
    ens = ClassicalEnsemble([1.0, -1.0], [0.0, 0.0], [0.5, 0.5])
    m = moments(ens)
    assert m.x_mean == pytest.approx(0.0)
    assert m.c_xx == pytest.approx(1.0)


def test_moments_single_particle():
    m = moments(ClassicalEnsemble([3.0], [2.0], [1.0]))
    assert (m.x_mean, m.p_mean) == (3.0, 2.0)
    assert m.c_xx == m.c_pp == m.c_xp == 0.0


def test_empty_ensemble_rejected():
    with pytest.raises(DegenerateEnsembleError):
        ClassicalEnsemble(np.array([]), np.array([]), np.array([]))


# --- force_moments ------------------------------------------------------------


def test_force_moments_linear_force(grid):
    sys_ = SystemSpec(mass=1.0, potential_coeffs=(0, 0, 0.5))
    st_ = gaussian_state(grid, 2.0, 0.0, 1.0, hbar=1.0)
    f, df, d2f = force_moments(st_, sys_)
    assert f == pytest.approx(-2.0, rel=1e-6)  # spread-independent for linear force
    assert df == pytest.approx(-1.0, rel=1e-12)
    assert d2f == 0.0


def test_force_moments_quartic_centered(grid):
    sys_ = SystemSpec(mass=1.0, potential_coeffs=(0, 0, 0, 0, 0.25))
    st_ = gaussian_state(grid, 0.0, 0.0, 1.0, hbar=1.0)
    f, _, _ = force_moments(st_, sys_)
    assert f == pytest.approx(0.0, abs=1e-9)  # odd moment of centered gaussian


def test_force_moments_quartic_displaced(grid):
    # <F> = -<x^3> = -(x0^3 + 3 x0 C_xx) for a gaussian: oracle by quadrature too
    sys_ = SystemSpec(mass=1.0, potential_coeffs=(0, 0, 0, 0, 0.25))
    st_ = gaussian_state(grid, 1.0, 0.0, 1.0, hbar=1.0)
    f, _, _ = force_moments(st_, sys_)
    assert f == pytest.approx(-4.0, rel=1e-6)
    # independent quadrature oracle
    dens = st_.position_density()
    x = grid.x
    quad = -np.sum(x**3 * dens) * grid.dx
    assert f == pytest.approx(quad, rel=1e-9)


def test_force_moments_ensemble_matches_weighted_sum():
    sys_ = SystemSpec(mass=1.0, potential_coeffs=(0, 0, 0, 0, 0.25))
    rng = np.random.default_rng(5)
    x = rng.normal(1.0, 0.5, 700)
    w = rng.random(700)
    w /= w.sum()
    ens = ClassicalEnsemble(x, np.zeros_like(x), w)
    f, _, _ = force_moments(ens, sys_)
    assert f == pytest.approx(-np.dot(w, x**3), rel=1e-12)


# --- wigner -------------------------------------------------------------------


def test_wigner_gaussian_positive_and_normalized(grid):
    st_ = gaussian_state(grid, 0.0, 0.0, 1.0, hbar=1.0)
    w = wigner_transform(st_)
    assert w.normalization() == pytest.approx(1.0, abs=1e-6)
    assert w.values.min() > -1e-9  # gaussian wigner is positive
    # peak consistent with normalization: 1/(2 pi sigma_x sigma_p)
    peak = w.values.max()
    assert peak == pytest.approx(1.0 / (2 * np.pi * 1.0 * 0.5), rel=1e-3)


def test_wigner_grid_spacing_matches_conjugate_convention(grid):
    st_ = gaussian_state(grid, 0.0, 0.0, 1.0, hbar=1.0)
    w = wigner_transform(st_)
    assert w.p_grid.size == grid.n_points
    assert w.dp == pytest.approx(2 * np.pi * 1.0 / (grid.n_points * grid.dx), rel=1e-12)


def test_wigner_cat_state_negative_fringes():
    # superposition of displaced gaussians shows interference with W < 0
    grid = PositionGrid(-12.0, 12.0, 128)
    from qcond.core import QuantumState, gaussian_wavefunction

    psi = gaussian_wavefunction(grid, 3.0, 0.0, 0.8, 1.0) + gaussian_wavefunction(
        grid, -3.0, 0.0, 0.8, 1.0
    )
    psi /= np.sqrt(np.sum(np.abs(psi) ** 2) * grid.dx)
    state = QuantumState(grid, np.outer(psi, psi.conj()), 1.0).normalized()
    w = wigner_transform(state)
    assert w.values.min() < -0.01  # fringes
    # brute-force quadrature oracle on the fringe region
    w_slow = _brute_force_wigner(state)
    assert np.max(np.abs(w.values - w_slow)) < 1e-8


def _brute_force_wigner(state):
    """O(n^3) direct quadrature of the transform on the upsampled density."""
    grid = state.grid
    n, dx, hbar = grid.n_points, grid.dx, state.hbar
    # same spectral interpolation trick, independent summation path
    f = np.fft.fft2(state.rho)
    fp = np.zeros((2 * n, 2 * n), dtype=complex)
    ix = np.fft.fftfreq(n, 1.0 / n).astype(int)
    fp[np.ix_(ix, ix)] = f
    half = n // 2
    fp[-half, :] *= 0.5
    fp[half, :] = fp[-half, :]
    fp[:, -half] *= 0.5
    fp[:, half] = fp[:, -half]
    rho_fine = np.fft.ifft2(fp) * 4.0
    du = dx / 2.0
    p_sel = np.fft.fftshift(np.pi * hbar * np.fft.fftfreq(2 * n, du))[::2]
    w = np.zeros((n, n))
    js = np.arange(2 * n) - n
    for i in range(n):
        a = 2 * i + js
        b = 2 * i - js
        ok = (a >= 0) & (a < 2 * n) & (b >= 0) & (b < 2 * n)
        chi = np.zeros(2 * n, dtype=complex)
        chi[ok] = rho_fine[a[ok], b[ok]]
        u = js * du
        for m_idx, p in enumerate(p_sel):
            w[i, m_idx] = (np.sum(np.exp(-2j * p * u / hbar) * chi) * du / (np.pi * hbar)).real
    return w


def test_wigner_moments_match_state_moments(grid):
    sys_ = SystemSpec(mass=1.0, hbar=1.0, potential_coeffs=(0, 0, 0.5))
    st_ = gaussian_state(grid, 1.3, -0.7, 0.8, hbar=1.0)
    m_rho = moments(st_, sys_, 0.0)
    m_w = wigner_moments(wigner_transform(st_), sys_, 0.0)
    assert m_w.x_mean == pytest.approx(m_rho.x_mean, abs=1e-6)
    assert m_w.p_mean == pytest.approx(m_rho.p_mean, abs=1e-6)
    assert m_w.c_xx == pytest.approx(m_rho.c_xx, rel=1e-6)
    assert m_w.c_pp == pytest.approx(m_rho.c_pp, rel=1e-6)
    assert m_w.c_xp == pytest.approx(m_rho.c_xp, abs=1e-6)
    assert m_w.energy == pytest.approx(m_rho.energy, rel=1e-6)

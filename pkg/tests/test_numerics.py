import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from adiapump import numerics as nm
from conftest import random_hermitian


@given(st.integers(1, 6), st.integers(0, 2**31 - 1), st.floats(-5, 5))
def test_expm_hermitian_matches_scipy(d, seed, scale):
    h = random_hermitian(np.random.default_rng(seed), d)
    ref = scipy.linalg.expm(-1j * scale * h)
    assert nm.maxabs(nm.expm_hermitian(h, scale) - ref) < 1e-11


@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_expm_hermitian_is_unitary(d, seed):
    h = random_hermitian(np.random.default_rng(seed), d, 10.0)
    assert nm.unitarity_residual(nm.expm_hermitian(h, 3.0)) < 1e-12


def test_prefix_products_order(rng):
    mats = np.stack([nm.expm_hermitian(random_hermitian(rng, 3), 1.0) for _ in range(5)])
    out = nm.prefix_products(mats)
    acc = np.eye(3)
    for j, m in enumerate(mats):
        acc = m @ acc
        assert nm.maxabs(out[j] - acc) < 1e-13


def test_grid_derivative_fourth_order():
    errs = []
    for n in (65, 129):
        t = np.linspace(0, 1, n)
        d = nm.grid_derivative(np.sin(3 * t), t[1] - t[0])
        errs.append(np.max(np.abs(d - 3 * np.cos(3 * t))))
    assert errs[1] < errs[0] / 12


def test_stencil_derivative_near_boundary():
    # one-sided stencils are third order: error ~ h^3 f(4) / 4
    f = lambda x: np.exp(2 * x)
    for x in (0.0, 0.5, 1.0):
        assert abs(nm.stencil_derivative(f, x, 1e-3) - 2 * np.exp(2 * x)) < 1e-8 * np.exp(2 * x)
        assert abs(nm.stencil_derivative(f, x, 1e-2, order=2) - 4 * np.exp(2 * x)) < 1e-5


def test_simpson_weights_integrate_cubics_exactly():
    t = np.linspace(0, 1, 33)
    w = nm.simpson_weights(33, t[1] - t[0])
    assert abs(w @ (t**3 - t) - (0.25 - 0.5)) < 1e-14


def test_uniform_grid_rejects_nonuniform():
    with pytest.raises(ValueError):
        nm.uniform_grid(np.array([0.0, 0.1, 0.3, 1.0]))


@given(st.integers(2, 6), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_lowdin_is_orthonormal_and_closest(d, k, seed):
    k = min(k, d)
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(d, k)) + 1j * rng.normal(size=(d, k))
    q = nm.lowdin(v)
    assert nm.maxabs(q.conj().T @ q - np.eye(k)) < 1e-12
    # polar factor: q^dag v is Hermitian positive
    m = q.conj().T @ v
    assert nm.maxabs(m - m.conj().T) < 1e-10
    assert np.all(np.linalg.eigvalsh((m + m.conj().T) / 2) > 0)


@given(st.floats(0.5, 3.0), st.floats(-3, 3))
def test_fit_slope_recovers_power_law(p, c):
    eps = 2.0 ** -np.arange(3, 8)
    fit = nm.fit_slope(eps, np.exp(c) * eps**p)
    assert abs(fit.slope - p) < 1e-9
    assert fit.r_squared > 1 - 1e-12
    assert not fit.inconclusive


def test_fit_slope_flags_noise():
    eps = 2.0 ** -np.arange(3, 8)
    fit = nm.fit_slope(eps, [1e-3, 1e-1, 1e-4, 1e-2, 1e-3])
    assert fit.inconclusive
    assert not fit.within(1.0, 10.0)


def test_fit_slope_zero_residuals_inconclusive():
    fit = nm.fit_slope([0.5, 0.25, 0.125], [0.0, 0.0, 0.0])
    assert fit.inconclusive


def test_fit_slope_noise_floor():
    eps = 2.0 ** -np.arange(3, 8)
    fit = nm.fit_slope(eps, 1e-15 * eps, noise_floor=1e-12)
    assert fit.at_noise_floor and fit.inconclusive

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from adiapump import evolve, model
from adiapump.errors import DomainError, ShapeError
from adiapump.model import SpectralSelection
from adiapump.numerics import maxabs

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SZ = np.diag([1.0, -1.0]).astype(complex)
T = np.linspace(0, 1, 129)


@given(st.floats(0.05, 1.0), st.integers(0, 1000))
@settings(max_examples=10)
def test_constant_family_exact_exponential(eps, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    h = (a + a.conj().T) / 2
    U = evolve.propagate_exact(model.constant_family(h), 0.5, eps, T)
    for j in (0, 64, 128):
        assert maxabs(U.matrices[j] - scipy.linalg.expm(-1j * T[j] * h / eps)) < 1e-10


def test_commuting_family_exponential_of_integral():
    h0 = np.diag([0.5, -1.0, 2.0]) + 0.3 * (np.eye(3, k=1) + np.eye(3, k=-1))
    f = model.commuting_family(lambda t: 2 + np.sin(2 * np.pi * t),
                               lambda t: 2 * np.pi * np.cos(2 * np.pi * t), h0)
    eps = 0.1
    U = evolve.propagate_exact(f, 0.0, eps, T)
    F = 2 * T + (1 - np.cos(2 * np.pi * T)) / (2 * np.pi)
    ref = np.stack([scipy.linalg.expm(-1j * x * h0 / eps) for x in F])
    assert maxabs(U.matrices - ref) < 3e-7
    W = evolve.propagate_transport(f, 0.0, T, selection=SpectralSelection(-1.0, 1))
    assert maxabs(W.matrices - np.eye(3)) < 1e-9


def rotating_field_oracle(theta, radius, shift, eps, t):
    # H(t) = R(t) H(0) R(t)^dag with R = exp(-i sz w t / 2), w = 2 pi
    w = 2 * np.pi
    h0 = radius * (np.sin(theta) * SX + np.cos(theta) * SZ) + shift * np.eye(2)
    gen = h0 / eps - 0.5 * w * SZ
    return scipy.linalg.expm(-0.5j * w * t * SZ) @ scipy.linalg.expm(-1j * t * gen)


@given(st.floats(0.2, 1.2), st.floats(0.05, 0.5), st.floats(0.0, 1.0))
@settings(max_examples=8)
def test_rotating_field_exact_solution(theta0, eps, alpha):
    f = model.two_level_family(theta0=theta0, theta1=0.3, radius=1.5, shift1=0.4)
    U = evolve.propagate_exact(f, alpha, eps, T)
    th = theta0 + 0.3 * alpha
    for j in (32, 128):
        ref = rotating_field_oracle(th, 1.5, 0.4 * alpha, eps, T[j])
        assert maxabs(U.matrices[j] - ref) < 1e-6


def test_exact_propagation_reports_convergence():
    f = model.random_family(dim=3, seed=1)
    U = evolve.propagate_exact(f, 0.3, 0.05, T)
    assert U.kind == "exact" and U.convergence < evolve.TOL_PROP
    assert U.unitarity_residual() < 1e-12
    assert U.integrator_steps == U.extras["substeps"] * (T.size - 1)


def test_trajectory_spline_hits_nodes():
    f = model.random_family(dim=3, seed=1)
    U = evolve.propagate_exact(f, 0.3, 0.25, T)
    assert maxabs(U.at(T[10]) - U.matrices[10]) < 1e-12
    assert U.at(np.array([0.1, 0.2])).shape == (2, 3, 3)


def test_transport_intertwines_and_phase_commutes():
    f = model.random_family(dim=5, rank=2, seed=6)
    sel = SpectralSelection(0.0, 2)
    W = evolve.propagate_transport(f, 0.2, T, selection=sel)
    assert np.max(W.extras["intertwining_residual"]) < evolve.TOL_INTERTWINE
    phi = evolve.propagate_phase(f, 0.2, 0.1, W)
    assert np.max(phi.extras["commutator_residual"]) < 1e-6
    W1 = evolve.propagate_transport(f, 0.2, T, True, 0.1, sel)
    assert W1.kind == "superadiabatic_transport"
    assert np.max(W1.extras["intertwining_residual"]) < evolve.TOL_INTERTWINE


def test_first_and_second_order_scaling():
    f = model.two_level_family(theta0=0.6, theta1=0.5, radius=4.0, shift1=0.3, smooth_start=True)
    sel = SpectralSelection(-4.0, 1)
    W = evolve.propagate_transport(f, 0.3, T, selection=sel)
    r = [evolve.residual_point(f, 0.3, e, sel, T, W=W) for e in (1 / 16, 1 / 32)]
    assert 1.6 < r[0]["first_order"] / r[1]["first_order"] < 2.5
    assert 3.2 < r[0]["second_order"] / r[1]["second_order"] < 5.0
    assert r[1]["second_order"] < r[1]["first_order"]


def test_constant_family_adiabatic_pair_is_exact():
    h = np.diag([-1.0, 0.0, 2.0]).astype(complex)
    f = model.constant_family(h)
    r = evolve.residual_point(f, 0.5, 0.1, SpectralSelection(0.0, 1), T)
    assert r["first_order"] < 1e-9 and r["second_order"] < 1e-9
    W = evolve.propagate_transport(f, 0.5, T, selection=SpectralSelection(0.0, 1))
    assert maxabs(W.matrices - np.eye(3)) == 0.0


def test_tol_cross_formula():
    assert evolve.tol_cross(1.0, 1e-4) == 1e-5
    assert evolve.tol_cross(1e-3, 1e-2) == pytest.approx(1e-3 / 1e-3 * 1e-4)
    assert evolve.tol_cross(1e-3, 1e-2, boundary=True) == pytest.approx(1e-3)


def test_charge_cross_identity_random_family():
    f = model.random_family(dim=3, rank=1, seed=5)
    eps = 0.125
    U = evolve.propagate_exact(f, 0.4, eps, T, charge=True)
    q1 = evolve.charge_time_quadrature(f, 0.4, eps, trajectory=U)
    q2 = evolve.charge_alpha_derivative(f, 0.4, eps, t_grid=T, center=U)
    assert maxabs(q1.matrix - q1.matrix.conj().T) < 1e-9
    assert maxabs(q1.matrix - q2.matrix) < q2.flags["tol_cross"]
    assert q2.flags["richardson_ok"]


def test_charge_one_sided_at_boundary():
    f = model.random_family(dim=3, rank=1, seed=5)
    q = evolve.charge_alpha_derivative(f, 1.0, 0.25, t_grid=T, richardson=False)
    assert q.flags["one_sided"]
    ref = evolve.charge_time_quadrature(f, 1.0, 0.25, t_grid=T)
    assert maxabs(q.matrix - ref.matrix) < q.flags["tol_cross"]


def test_charge_vanishes_for_alpha_independent_family():
    f = model.random_family(dim=3, rank=1, seed=5, alpha_dependent=False)
    q = evolve.charge_time_quadrature(f, 0.4, 0.1, t_grid=T)
    assert maxabs(q.matrix) == 0.0


def test_argument_errors():
    f = model.random_family(dim=3, seed=1)
    with pytest.raises(ValueError):
        evolve.propagate_exact(f, 0.5, 0.0, T)
    with pytest.raises(DomainError):
        evolve.propagate_exact(f, 1.5, 0.1, T)
    with pytest.raises(ValueError):
        evolve.propagate_transport(f, 0.5, T, superadiabatic=True)
    W = evolve.propagate_transport(f, 0.5, T, selection=SpectralSelection())
    with pytest.raises(ValueError):
        evolve.propagate_phase(f, 0.5, 0.1, W, superadiabatic=True)
    with pytest.raises(ShapeError):
        evolve.propagate_phase(f, 0.5, 0.1, W, t_grid=np.linspace(0, 1, 65))
    with pytest.raises(ValueError):
        evolve.charge_time_quadrature(f, 0.5, 0.1, t=0.3333, t_grid=np.linspace(0, 1, 9))


def test_dump_trajectory_csv(tmp_path):
    f = model.random_family(dim=3, seed=1)
    W = evolve.propagate_transport(f, 0.5, T, selection=SpectralSelection())
    U = evolve.propagate_exact(f, 0.5, 0.1, T)
    phi = evolve.propagate_phase(f, 0.5, 0.1, W)
    path = tmp_path / "traj.csv"
    evolve.dump_trajectory_csv(path, U, W, phi)
    rows = path.read_text().splitlines()
    assert len(rows) == T.size + 1 and rows[0].startswith("t,unitarity_residual")

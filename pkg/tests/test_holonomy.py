import json

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from adiapump import evolve, examplefam as ex, holonomy as hol, model
from adiapump.errors import DegeneracyError, FrameError, PeriodicityError
from adiapump.model import SpectralSelection
from adiapump.numerics import maxabs

T = np.linspace(0, 1, 513)


def wrap(x):
    return float(np.angle(np.exp(1j * x)))


@pytest.mark.parametrize("theta0", [0.3, 0.9, 1.4])
@pytest.mark.parametrize("smooth", [False, True])
def test_berry_phase_spin_half(theta0, smooth):
    f = model.two_level_family(theta0=theta0, theta1=0.0, radius=1.0, shift1=0.0,
                               smooth_start=smooth)
    cap = np.pi * (1 - np.cos(theta0))
    for e_ref, sign in ((-1.0, -1.0), (1.0, 1.0)):
        W = evolve.propagate_transport(f, 0.5, T, selection=SpectralSelection(e_ref, 1))
        bp = hol.berry_phase(f, 0.5, W)
        assert abs(wrap(bp.beta - sign * cap)) < 1e-6
        # the quadrature cross-check uses grid differences of the eigenvector
        assert bp.agreement < 1e-5
        assert bp.parallel_residual < 1e-6
        assert bp.eigen_index == pytest.approx(e_ref)


def test_berry_phase_needs_simple_eigenvalue():
    f = model.random_family(dim=4, rank=2, seed=1)
    W = evolve.propagate_transport(f, 0.5, T, selection=SpectralSelection(0.0, 2))
    with pytest.raises(DegeneracyError):
        hol.berry_phase(f, 0.5, W)


@pytest.mark.parametrize("theta_c", [np.pi / 6, np.pi / 4, np.pi / 3])
def test_holonomy_closed_form_latitudes(theta_c):
    sp = ex.SpecialCaseParams(ex.latitude_loop(theta_c, "r1"), theta0=0.4)
    hm = hol.holonomy_B(sp.frame(T, 0.0), T)
    assert maxabs(hm.B - sp.holonomy_closed_form(0.0)) < 1e-6
    assert hm.unitarity_residual() < 1e-10


def test_holonomy_consistent_with_transport():
    sp = ex.SpecialCaseParams(ex.latitude_loop(np.pi / 4, "r1", radius=2.0), theta0=0.4, E=1.0)
    f = sp.family()
    W = evolve.propagate_transport(f, 0.0, T, selection=SpectralSelection(0.0, 2))
    hm = hol.holonomy_B(sp.frame(T, 0.0), T, W=W, projectors=W.extras["slow"].on_output("P"))
    assert hm.w_consistency < 1e-6


def test_connection_is_antihermitian():
    sp = ex.SpecialCaseParams(ex.latitude_loop(0.7, "r2"), theta0=0.2)
    g = hol.connection(sp.frame(T, 0.0), T)
    # exact anti-Hermiticity up to the grid-difference error
    assert maxabs(g + np.conj(np.swapaxes(g, -1, -2))) < 1e-6


def test_gauge_change_of_holonomy():
    sp = ex.SpecialCaseParams(ex.latitude_loop(0.8, "r1"), theta0=0.5)
    psi = sp.frame(T, 0.0)
    # periodic gauge chi = psi u, u(t) = exp(-2 i X sin(2 pi t)), so c = chi^dag psi = u^dag
    x = np.array([[0.3, 0.2 - 0.1j], [0.2 + 0.1j, -0.4]])
    s_t = np.sin(2 * np.pi * T)
    u = np.stack([scipy.linalg.expm(-2j * x * v) for v in s_t])
    chi = psi @ u
    c = np.conj(np.swapaxes(u, -1, -2))
    c_dot = 2j * (2 * np.pi * np.cos(2 * np.pi * T))[:, None, None] * (x @ c)
    b_psi = hol.holonomy_B(psi, T).B
    b_chi = hol.holonomy_B(chi, T).B
    assert maxabs(b_chi - hol.gauge_holonomy(b_psi, c[0], c[-1])) < 1e-7
    g_psi, g_chi = hol.connection(psi, T), hol.connection(chi, T)
    for j in (3, 200, 400):
        assert maxabs(g_chi[j] - hol.gauge_gamma(g_psi[j], c[j], c_dot[j])) < 1e-6


def test_frame_errors():
    bad = np.ones((T.size, 4, 2), dtype=complex)
    with pytest.raises(FrameError):
        hol.holonomy_B(bad, T)
    with pytest.raises(FrameError):
        hol.holonomy_B(np.ones((5, 4, 2)), T)


def test_aligned_and_projected_frames():
    f = model.random_family(dim=5, rank=2, seed=3)
    sel = SpectralSelection(0.0, 2)
    slow = evolve.slow_objects(f, 0.3, T, sel)
    p = slow.on_output("P")
    ref = hol.reference_vectors(f, 0.3, sel)
    fr = hol.projected_frame(p, ref)
    hol.check_frame(fr, p)
    assert maxabs(fr[0] - fr[-1]) < 1e-9
    al = hol.aligned_eigenframe(f, 0.3, T, sel)
    hol.check_frame(al, p)


def test_dynamical_term_two_level():
    f = model.two_level_family(radius=2.0, shift1=0.7)
    dyn, info = hol.dynamical_term(f, 0.4, 0.1, SpectralSelection(-2.0, 1), T)
    assert dyn == pytest.approx(7.0, abs=1e-8)
    assert info["richardson_ok"]


def test_isolated_eigenvalue():
    f = model.two_level_family(radius=2.0, shift0=0.1)
    W = evolve.slow_objects(f, 0.0, T, SpectralSelection(-2.0, 1))
    e, r = hol.isolated_eigenvalue(f, 0.0, T[100], W.on_output("P")[100])
    assert e == pytest.approx(-1.9, abs=1e-10)


def test_simple_case_charge_formula():
    f = model.two_level_family(theta0=0.6, theta1=0.5, radius=4.0, shift1=0.3, smooth_start=True)
    rep = hol.charge_matrix_elements_periodic(f, 0.4, 1 / 32, "simple",
                                              SpectralSelection(-4.0, 1), T)
    assert rep.residual < 0.05
    assert rep.dynamical_term == pytest.approx(0.3 * 32, rel=1e-9)
    # geometric term: d beta / d alpha with beta = -pi (1 - cos theta), theta = 0.6 + 0.5 alpha
    assert rep.geometric_term[0, 0].real == pytest.approx(-np.pi * np.sin(0.8) * 0.5, abs=1e-6)
    d = json.loads(rep.to_json())
    assert d["case"] == "simple" and list(d) == sorted(d)


def test_degenerate_cases_agree():
    sp = ex.SpecialCaseParams(ex.latitude_loop(np.pi / 4, "r1", radius=16.0), theta0=0.3,
                              theta0_slope=np.pi, E=8.0)
    f = sp.family()
    sel = SpectralSelection(0.0, 2)
    exact = evolve.charge_time_quadrature(f, 0.5, 0.125, t_grid=T)
    reps = [hol.charge_matrix_elements_periodic(f, 0.5, 0.125, case, sel, T, frame=sp.frame,
                                                exact=exact)
            for case in ("degenerate_parallel", "degenerate_framed")]
    assert maxabs(reps[0].geometric_term - reps[1].geometric_term) < 1e-6
    assert maxabs(reps[1].geometric_term - sp.charge_bracket_closed_form(0.5)) < 1e-6


def test_leading_order_on_open_path():
    f = model.random_family(dim=3, rank=1, seed=2, coupling=0.05)
    rep = hol.charge_leading_order(f, 0.5, 1 / 16, SpectralSelection(0.0, 1), T)
    assert rep.case == "leading_order"
    assert rep.residual < 0.1


def test_charge_formula_preconditions():
    f = model.random_family(dim=3, rank=1, seed=2)
    open_f = model.HamiltonianFamily(3, f.eval, f.dt_eval, f.dalpha_eval, f.dtt_eval)
    with pytest.raises(PeriodicityError):
        hol.charge_matrix_elements_periodic(open_f, 0.5, 0.1, "simple", SpectralSelection(), T)
    g = model.random_family(dim=4, rank=2, seed=2)
    with pytest.raises(DegeneracyError):
        hol.charge_matrix_elements_periodic(g, 0.5, 0.1, "simple", SpectralSelection(0.0, 2), T)
    with pytest.raises(ValueError):
        hol.charge_matrix_elements_periodic(f, 0.5, 0.1, "bogus", SpectralSelection(), T)


@given(st.integers(0, 500), st.sampled_from([0.0, 0.5, 1.0]))
@settings(max_examples=5)
def test_zero_order_identity(seed, alpha):
    f = model.random_family(dim=4, rank=1, seed=seed)
    assert hol.zero_order_identity_residual(f, alpha, np.linspace(0, 1, 33),
                                            SpectralSelection(0.0, 1)) < 1e-7

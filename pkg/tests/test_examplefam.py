import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adiapump import examplefam as ex, holonomy as hol, model, spectral
from adiapump.errors import NormalizationError, PreconditionError, SelfIntersectionError
from adiapump.model import SpectralSelection
from adiapump.numerics import maxabs, stencil_derivative

T = np.linspace(0, 1, 513)
real = st.floats(-2, 2)
cplx = st.builds(complex, real, real)


def random_z(rng, n):
    return rng.normal(size=n) + 1j * rng.normal(size=n)


@given(st.integers(2, 5), st.integers(0, 10_000), st.floats(-3, 3))
def test_spectrum_closed_form(n, seed, E):
    z = random_z(np.random.default_rng(seed), n)
    w = np.linalg.eigvalsh(ex.build_H(z, E))
    assert maxabs(w - ex.spectrum_closed_form(z, E)) < 1e-10
    assert ex.top_eigenvalue(z, E) == pytest.approx(w[-1], abs=1e-10)


@given(st.integers(2, 5), st.integers(0, 10_000), st.floats(-3, 3))
def test_kernel_projector(n, seed, E):
    z = random_z(np.random.default_rng(seed), n)
    h = ex.build_H(z, E)
    p = ex.kernel_projector(z, E)
    assert p.rank == n - 1
    assert maxabs(h @ p.matrix) < 1e-10
    w, v = np.linalg.eigh(h)
    idx = np.argsort(np.abs(w))[: n - 1]
    assert maxabs(p.matrix - v[:, idx] @ v[:, idx].conj().T) < 1e-10


def test_build_H_batched():
    z = np.arange(6).reshape(2, 3) * (1 + 1j)
    assert ex.build_H(z, 1.0).shape == (2, 4, 4)


@given(cplx, cplx, cplx)
def test_special_eigenvectors_span_kernel(z0, z1, z2):
    z = np.array([z0, z1, z2])
    if abs(z1) ** 2 + abs(z2) ** 2 < 1e-3 or abs(z1**2 + z2**2) ** 2 + abs(z0) ** 2 < 1e-3:
        return
    h = ex.build_H(z)
    for variant in ("canonical", "orthogonal"):
        psi1, psi2 = ex.special_eigenvectors(z0, z1, z2, variant)
        assert maxabs(h @ psi1) < 1e-10 and maxabs(h @ psi2) < 1e-10
        assert abs(np.linalg.norm(psi1) - 1) < 1e-12 and abs(np.linalg.norm(psi2) - 1) < 1e-12
    o1, o2 = ex.special_eigenvectors(z0, z1, z2, "orthogonal")
    assert abs(np.vdot(o1, o2)) < 1e-12


@given(cplx, cplx, cplx)
def test_canonical_frame_overlap(z0, z1, z2):
    # <psi1|psi2> = N1 N2 conj(z0) 2i Im(z1 conj(z2)): zero only when z1 conj(z2) is real
    if abs(z1) ** 2 + abs(z2) ** 2 < 1e-3 or abs(z1**2 + z2**2) ** 2 + abs(z0) ** 2 < 1e-3:
        return
    psi1, psi2 = ex.special_eigenvectors(z0, z1, z2)
    s12 = abs(z1) ** 2 + abs(z2) ** 2
    d2 = abs(z1**2 + z2**2) ** 2 + abs(z0) ** 2 * s12
    ref = np.conj(z0) * 2j * (z1 * np.conj(z2)).imag / np.sqrt(s12 * d2)
    assert abs(np.vdot(psi1, psi2) - ref) < 1e-12


def test_variants_coincide_for_real_z12():
    a = ex.special_eigenvectors(0.3 + 0.4j, 0.7, -1.2)
    b = ex.special_eigenvectors(0.3 + 0.4j, 0.7, -1.2, "orthogonal")
    assert maxabs(a[0] - b[0]) < 1e-14 and maxabs(a[1] - b[1]) < 1e-14


def test_normalization_degeneracy():
    with pytest.raises(NormalizationError):
        ex.special_eigenvectors(0.0, 1.0, 1j)
    # z1^2 + z2^2 = 0 alone is fine when z0 != 0
    ex.special_eigenvectors(0.5, 1.0, 1j)
    with pytest.raises(PreconditionError):
        ex.special_eigenvectors(1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        ex.special_eigenvectors(1.0, 1.0, 0.0, "other")


def numeric_gamma(z_of, j, h=1e-4):
    t = T[j]
    f = lambda s: ex.frame_from_z(z_of(np.array([s])))[0]
    d = stencil_derivative(f, t, h)
    fr = f(t)
    return -fr.conj().T @ d


def loop_z(theta, shifts=(0.0, 0.0, 0.0)):
    L = ex.fourier_loop({"r0": {"a": [0.4, 0.3], "b": [0.2]}, "r1": {"a": [0.9, 0.2]},
                         "r2": {"a": [0.1], "b": [0.7, 0.1]}})
    ph = np.exp(1j * np.asarray(theta))
    return L, (lambda t: L.r(t) * ph + np.asarray(shifts)), (lambda t: L.dr(t) * ph)


@pytest.mark.parametrize("theta", [(0.4, 0.0, 0.0), (1.1, 0.3, 0.3), (-0.7, 0.2, 0.2 + np.pi)])
def test_gamma_general_matches_frame_derivative(theta):
    _, z_of, dz_of = loop_z(theta)
    for j in (40, 170, 333):
        g = ex.gamma_general(z_of(T[j]), dz_of(T[j]))
        assert maxabs(g - numeric_gamma(z_of, j)) < 1e-8


def test_gamma_moduli_and_real_phases_agree_with_general():
    L, z_of, dz_of = loop_z((0.6, 0.25, 0.25 + np.pi))
    for j in (10, 250):
        r, dr = L.r(T[j]), L.dr(T[j])
        g = ex.gamma_moduli(r, (0.6, 0.25, 0.25 + np.pi), dr)
        assert maxabs(g - ex.gamma_general(z_of(T[j]), dz_of(T[j]))) < 1e-12
        g_real = ex.gamma_real_phases(r, 0.6, dr)
        g_mod = ex.gamma_moduli(r, (0.6, 0.0, 0.0), dr)
        assert maxabs(g_real - g_mod) < 1e-12
    assert maxabs(ex.gamma_entries("moduli", (r, (0.6, 0, 0)), dr) - g_mod) == 0.0


def test_gamma_z0_variation_matches_general():
    f, df, _ = ex.circle_2d()
    th0, r12 = 0.7, (0.6, 0.8)
    for t in (0.1, 0.55):
        t12, dt12 = f(t), df(t)
        z = np.array([t12[0] * np.exp(1j * th0) + t12[1], r12[0], r12[1]])
        dz = np.array([dt12[0] * np.exp(1j * th0) + dt12[1], 0, 0])
        g = ex.gamma_z0_variation(t12, th0, r12, dt12)
        assert maxabs(g - ex.gamma_general(z, dz)) < 1e-12


def test_gamma_off_stratum_raises():
    with pytest.raises(PreconditionError):
        ex.gamma_general(np.array([1, 1, 1j]), np.array([0, 1, 0]))
    with pytest.raises(ValueError):
        ex.gamma_entries("nope", None, None)


def test_kato_closed_form_matches_contour_generator():
    z_of = lambda t, a: np.stack([np.exp(2j * np.pi * np.asarray(t)) * 0.8,
                                  0.5 + 0.3 * np.sin(2 * np.pi * np.asarray(t)),
                                  0.6 + 0j * np.asarray(t), 0.2j + 0 * np.asarray(t)], axis=-1)
    fam = ex.ZLoop(4, z_of).family()
    zhat = ex.unit_direction(z_of(T, 0.0))
    fixed, fixed_dot = ex.phase_fixed_direction(zhat, T)
    conn = np.einsum("ti,ti->t", fixed.conj(), fixed_dot)
    assert np.max(np.abs(conn)) < 1e-6
    k_closed = ex.kato_closed_form(fixed, fixed_dot)
    sel = SpectralSelection(0.0, 3)
    for j in (50, 300):
        k = spectral.kato_generator(fam, T[j], 0.0, selection=sel).matrix
        assert maxabs(k - k_closed[j]) < 1e-5


# ---------------------------------------------------------------------------
# solid angle


@pytest.mark.parametrize("theta_c", [np.pi / 6, np.pi / 4, np.pi / 3, 2.0])
@pytest.mark.parametrize("axis", ["r1", "r2"])
def test_latitude_cap_area(theta_c, axis):
    L = ex.latitude_loop(theta_c, axis)
    cap = 2 * np.pi * (1 - np.cos(theta_c))
    cap = cap if cap <= 2 * np.pi else cap - 4 * np.pi
    line, solid = ex.omega_line_integral(L), ex.omega_solid_angle(L)
    assert abs(solid - cap) < 1e-6
    assert abs(line - solid) < 1e-6
    R = L.reversed()
    assert abs(ex.omega_line_integral(R) + line) < 1e-9
    assert abs(ex.omega_solid_angle(R) + solid) < 1e-6


def test_line_integral_offset_around_r0_axis():
    # the one-form is singular on the r0 axis; loops winding around it pick up -2 pi per turn
    for theta_c in (0.4, 1.0):
        L = ex.latitude_loop(theta_c, "r0")
        assert ex.omega_line_integral(L) - ex.omega_solid_angle(L) == pytest.approx(-2 * np.pi,
                                                                                   abs=1e-6)


def test_octant():
    assert ex.omega_solid_angle(ex.octant_polygon()) == pytest.approx(np.pi / 2, abs=1e-9)
    vals = [ex.omega_line_integral(ex.octant_polygon_cut(c)) for c in (1e-2, 1e-3, 1e-4)]
    errs = [abs(v - np.pi / 2) for v in vals]
    assert errs[2] < 1e-6 and errs[0] > errs[1] > errs[2]
    cut = ex.octant_polygon_cut(1e-2)
    assert abs(ex.omega_line_integral(cut) - ex.omega_solid_angle(cut)) < 1e-6
    # through the r0-axis vertex every edge lies in a plane of constant azimuth or r0 = 0,
    # so the uncut triangle integrates to zero: the corner carries the whole angle
    assert ex.omega_line_integral(ex.octant_polygon()) == pytest.approx(0.0, abs=1e-12)


@given(st.floats(0.2, 1.2), st.floats(0.1, 0.5), st.floats(0, 2 * np.pi))
@settings(max_examples=10)
def test_polygon_line_equals_solid(tilt, spread, phase):
    base = np.array([np.cos(tilt), np.sin(tilt), 0.0])
    u = np.cross(base, [0, 0, 1.0])
    u /= np.linalg.norm(u)
    v = np.cross(base, u)
    angles = phase + np.array([0, 1.7, 3.1, 4.6])
    verts = [base + spread * (np.cos(a) * u + np.sin(a) * v) for a in angles]
    L = ex.great_circle_polygon(verts)
    if np.any(np.hypot(L.r(np.linspace(0, 1, 400))[:, 1], L.r(np.linspace(0, 1, 400))[:, 2]) < 1e-3):
        return
    assert abs(ex.omega_line_integral(L) - ex.omega_solid_angle(L)) < 1e-6


def test_planar_loop_has_zero_angle():
    L = ex.fourier_loop({"r1": {"a": [2.0, 1.0]}, "r2": {"b": [1.0]}})
    assert ex.omega_line_integral(L) == 0.0
    assert ex.omega_solid_angle(L) == pytest.approx(0.0, abs=1e-12)


def test_self_intersection_detected():
    eight = ex.fourier_loop({"r0": {"a": [2.0]}, "r1": {"b": [0.5]}, "r2": {"b": [0.0, 0.5]}})
    with pytest.raises(SelfIntersectionError):
        ex.omega_solid_angle(eight)
    assert not ex.is_simple_spherical(eight.r(np.arange(256) / 256))


def test_open_loop_rejected():
    L = ex.LoopSpec("open", lambda t: np.stack([np.ones_like(t), t + 0.1, 0 * t + 1.0], -1),
                    lambda t: np.stack([0 * t, 1 + 0 * t, 0 * t], -1))
    with pytest.raises(PreconditionError):
        ex.omega_line_integral(L)


# ---------------------------------------------------------------------------
# closed-form holonomies


@given(st.floats(-4, 4), st.floats(-4, 4))
def test_closed_form_B1_unitary_and_derivative(om, th):
    b = ex.closed_form_B1(om, th)
    assert maxabs(b.conj().T @ b - np.eye(2)) < 1e-12
    fd = stencil_derivative(lambda s: ex.closed_form_B1(om, s), th, 1e-4, lo=-10, hi=10)
    assert maxabs(fd - ex.closed_form_B1_dtheta(om, th)) < 1e-9


def test_constant_phase_B_matches_B1():
    L = ex.latitude_loop(0.9, "r1")
    th0 = 0.35
    f = ex.real_phase_factor(L.r(T), L.dr(T))
    b = ex.constant_phase_B(f * np.exp(1j * th0), T)
    assert maxabs(b - ex.closed_form_B1(ex.omega_line_integral(L), th0)) < 1e-8
    with pytest.raises(PreconditionError):
        ex.constant_phase_B(np.exp(2j * np.pi * T), T)


def test_special_case_frame_alpha_derivative():
    sp = ex.SpecialCaseParams(ex.latitude_loop(0.6, "r1"), theta0=0.2, theta0_slope=1.3)
    for t in (0.0, 0.4):
        fd = stencil_derivative(lambda a: sp.frame(t, a), 0.5, 1e-4)
        assert maxabs(fd - sp.frame_dalpha(t, 0.5)) < 1e-9


def test_special_case_family_kernel_is_frame():
    sp = ex.SpecialCaseParams(ex.latitude_loop(0.6, "r1", radius=2.0), theta0=0.2, E=1.0)
    f = sp.family()
    p = spectral.riesz_projector(f, 0.3, 0.0, selection=SpectralSelection(0.0, 2)).matrix
    fr = sp.frame(0.3, 0.0)
    assert maxabs(p - fr @ fr.conj().T) < 1e-10
    with pytest.raises(PreconditionError):
        ex.SpecialCaseParams(sp.loop, theta1=0.3).holonomy_closed_form(0.0)


def test_z0_variation_closed_form():
    f, df, ddf = ex.circle_2d()
    zp = ex.Z0VariationParams(f, df, ddt_loop=ddf)
    hm = hol.holonomy_B(zp.frame(T), T)
    assert maxabs(hm.B - zp.holonomy_closed_form()) < 1e-6
    # loop not enclosing the origin of the (t1, t2) plane: no phase
    f2, df2, _ = ex.circle_2d(center=(2.0, 0.0), radius=0.5)
    g = ex.Z0VariationParams(f2, df2)
    assert abs(np.angle(g.holonomy_closed_form()[1, 1])) < 0.2

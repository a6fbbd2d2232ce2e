"""Bordered Hamiltonians with a permanently degenerate kernel.

``H(z) = [[E, <z|], [|z>, 0]]`` on ``C (+) C^n``.  Its spectrum is
``{(E - s)/2, 0 (n-1 times), (E + s)/2}`` with ``s = sqrt(E^2 + 4 |z|^2)`` and its
kernel is ``0 (+) z^perp``.  For ``n = 3`` explicit kernel frames, their
connection one-forms and, for moduli-only loops, the holonomy are known in
closed form; the holonomy angle is the solid angle swept by the unit vector of
``(r0, r1, r2)``.

Coordinates are always ordered ``(r0, r1, r2)``; this order is right-handed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import cumulative_simpson, simpson

from .errors import (ConvergenceError, NormalizationError, PreconditionError,
                     SelfIntersectionError)
from .model import HamiltonianFamily
from .numerics import dagger, grid_derivative
from .spectral import Contour, Projector

TWO_PI = 2 * np.pi


# ---------------------------------------------------------------------------
# the bordered family


def build_H(z, E=0.0):
    """Bordered Hermitian matrix; ``z`` may carry leading batch axes."""
    z = np.asarray(z, dtype=complex)
    n = z.shape[-1]
    out = np.zeros(z.shape[:-1] + (n + 1, n + 1), dtype=complex)
    out[..., 0, 0] = E
    out[..., 1:, 0] = z
    out[..., 0, 1:] = np.conj(z)
    return out


def spectrum_closed_form(z, E=0.0):
    """Sorted eigenvalues predicted by the closed form."""
    z = np.asarray(z, dtype=complex)
    n = z.shape[-1]
    s = np.sqrt(E**2 + 4 * np.sum(np.abs(z) ** 2, axis=-1))
    lo, hi = 0.5 * (E - s), 0.5 * (E + s)
    zeros = np.zeros(np.shape(lo) + (n - 1,))
    return np.concatenate([np.asarray(lo)[..., None], zeros, np.asarray(hi)[..., None]], axis=-1)


def kernel_projector(z, E=0.0) -> Projector:
    """``diag(0, I - |zhat><zhat|)``, the projector onto ``ker H(z)``."""
    z = np.asarray(z, dtype=complex)
    norm = np.linalg.norm(z)
    if norm == 0.0:
        raise PreconditionError("kernel projector needs z != 0")
    zh = z / norm
    n = z.size
    p = np.zeros((n + 1, n + 1), dtype=complex)
    p[1:, 1:] = np.eye(n) - np.outer(zh, zh.conj())
    lo, _, hi = spectrum_closed_form(z, E)[[0, 1, -1]]
    radius = 0.5 * min(abs(lo), abs(hi))
    return Projector(p, n - 1, Contour(0.0, radius))


def top_eigenvalue(z, E=0.0):
    return float(spectrum_closed_form(z, E)[-1])


# ---------------------------------------------------------------------------
# phase fixing and the kernel transport for general n


@dataclass(frozen=True)
class ZLoop:
    """Path ``t -> (z(t, alpha), E(t, alpha))`` for the bordered family.

    ``z_of`` accepts a float or a 1-d array of times and returns ``(..., n)``.
    ``dz_of`` is optional; without it derivatives come from finite differences.
    """

    n: int
    z_of: Callable
    E_of: Callable = lambda t, a: 0.0 * np.asarray(t, dtype=float)
    dz_of: Optional[Callable] = None
    phase_fixed: bool = False
    name: str = "zloop"

    def family(self) -> HamiltonianFamily:
        return HamiltonianFamily(self.n + 1, _bordered(self.z_of, self.E_of),
                                 _bordered(self.dz_of, None) if self.dz_of else None,
                                 name=self.name, periodic_t=True,
                                 smoothness_note="bordered family along a z-loop")


def _bordered(z_fn, e_fn):
    def f(t, a):
        z = np.asarray(z_fn(t, a), dtype=complex)
        e = 0.0 if e_fn is None else np.asarray(e_fn(t, a), dtype=float)
        out = build_H(z, 0.0)
        out[..., 0, 0] = e
        return out
    return f


def unit_direction(z):
    z = np.asarray(z, dtype=complex)
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise PreconditionError("z vanishes on the loop")
    return z / norm


def phase_fixed_direction(zhat, t_grid, zhat_dot=None):
    """Rotate ``zhat(t)`` by ``exp(-i theta(t))`` so that ``<zhat|d zhat/dt> = 0``.

    ``theta' = -i <zhat|zhat'>`` is integrated with cumulative Simpson; returns
    the rotated samples and their time derivative.
    """
    zhat = np.asarray(zhat, dtype=complex)
    h = t_grid[1] - t_grid[0]
    if zhat_dot is None:
        zhat_dot = grid_derivative(zhat, h)
    conn = np.einsum("ti,ti->t", zhat.conj(), zhat_dot)
    theta_dot = (-1j * conn).real
    theta = cumulative_simpson(theta_dot, x=t_grid, initial=0.0)
    rot = np.exp(-1j * theta)[:, None]
    fixed = zhat * rot
    fixed_dot = (zhat_dot - 1j * theta_dot[:, None] * zhat) * rot
    return fixed, fixed_dot


def kato_closed_form(zt, zt_dot):
    """``i(|dz~><z~| - |z~><dz~|)`` with ``z~ = (0, zhat)`` phase-fixed."""
    zt = np.asarray(zt, dtype=complex)
    zd = np.asarray(zt_dot, dtype=complex)
    pad = [(0, 0)] * (zt.ndim - 1) + [(1, 0)]
    a, b = np.pad(zt, pad), np.pad(zd, pad)
    return 1j * (b[..., :, None] * a[..., None, :].conj() - a[..., :, None] * b[..., None, :].conj())


# ---------------------------------------------------------------------------
# n = 3: explicit kernel frames


def _norms(z0, z1, z2):
    s12 = abs(z1) ** 2 + abs(z2) ** 2
    d2 = abs(z1**2 + z2**2) ** 2 + abs(z0) ** 2 * s12
    return s12, d2


def special_eigenvectors(z0, z1, z2, variant="canonical"):
    """Two kernel vectors of ``H(z0, z1, z2)`` (4-vectors, basis ``e0..e3``).

    ``variant="canonical"`` returns
    ``psi1 = N1 (conj(z2) e2 - conj(z1) e3)`` and
    ``psi2 = N2 (conj(z1^2 + z2^2) e1 - conj(z0)(conj(z1) e2 + conj(z2) e3))``;
    these are orthogonal exactly when ``z1 conj(z2)`` is real.
    ``variant="orthogonal"`` replaces ``psi2`` by the normalized
    ``(|z1|^2 + |z2|^2) e1 - conj(z0)(z1 e2 + z2 e3)``, orthogonal to ``psi1``
    for every ``z``; both variants coincide when ``z1`` and ``z2`` are real.
    """
    z0, z1, z2 = complex(z0), complex(z1), complex(z2)
    s12, d2 = _norms(z0, z1, z2)
    if s12 <= 0.0:
        raise PreconditionError("|z1|^2 + |z2|^2 must be positive")
    n1 = 1.0 / np.sqrt(s12)
    psi1 = n1 * np.array([0, 0, np.conj(z2), -np.conj(z1)], dtype=complex)
    if variant == "canonical":
        if d2 < 1e-14:
            raise NormalizationError("psi2 normalization vanishes (z1^2 + z2^2 = 0 and z0 = 0)")
        c = np.conj(z1**2 + z2**2)
        psi2 = np.array([0, c, -np.conj(z0) * np.conj(z1), -np.conj(z0) * np.conj(z2)]) / np.sqrt(d2)
    elif variant == "orthogonal":
        v = np.array([0, s12, -np.conj(z0) * z1, -np.conj(z0) * z2], dtype=complex)
        psi2 = v / np.linalg.norm(v)
    else:
        raise ValueError("variant must be 'canonical' or 'orthogonal'")
    return psi1, psi2


def frame_from_z(z, variant="canonical"):
    """Stacked ``(..., 4, 2)`` kernel frames for an array of ``(z0, z1, z2)``."""
    z = np.asarray(z, dtype=complex)
    flat = z.reshape(-1, 3)
    out = np.empty((flat.shape[0], 4, 2), dtype=complex)
    for i, (a, b, c) in enumerate(flat):
        out[i, :, 0], out[i, :, 1] = special_eigenvectors(a, b, c, variant)
    return out.reshape(z.shape[:-1] + (4, 2))


def _stratum_check(z1, z2):
    if abs((z1 * np.conj(z2)).imag) > 1e-12 * max(1.0, abs(z1) ** 2 + abs(z2) ** 2):
        raise PreconditionError(
            "the closed-form connection assumes an orthonormal frame, i.e. z1 conj(z2) real")


def gamma_general(z, dz):
    """``Gamma_sr = -<psi_s|d psi_r>`` from the general closed form.

    Valid where the frame is orthonormal (``z1 conj(z2)`` real).
    """
    z0, z1, z2 = (complex(v) for v in z)
    d0, d1, d2_ = (complex(v) for v in dz)
    _stratum_check(z1, z2)
    s12, den = _norms(z0, z1, z2)
    n1sq, n2sq = 1.0 / s12, 1.0 / den
    c = z1**2 + z2**2
    g11 = 1j * n1sq * (z1 * np.conj(d1) + z2 * np.conj(d2_)).imag
    g22 = 1j * n2sq * (2 * c * (np.conj(z1) * np.conj(d1) + np.conj(z2) * np.conj(d2_))
                       + abs(z0) ** 2 * (z1 * np.conj(d1) + z2 * np.conj(d2_))
                       + s12 * z0 * np.conj(d0)).imag
    g21 = np.sqrt(n1sq * n2sq) * z0 * (z2 * np.conj(d1) - z1 * np.conj(d2_))
    g12 = -np.conj(g21)
    return -np.array([[g11, g12], [g21, g22]], dtype=complex)


def gamma_moduli(r, theta, dr):
    """Moduli-only variation ``z_j = r_j exp(i theta_j)``, ``dtheta = 0``."""
    r0, r1, r2 = (float(v) for v in r)
    th0, th1, th2 = (float(v) for v in theta)
    dr0, dr1, dr2 = (float(v) for v in dr)
    _stratum_check(r1 * np.exp(1j * th1), r2 * np.exp(1j * th2))
    s12 = r1**2 + r2**2
    if s12 <= 0:
        raise PreconditionError("r1^2 + r2^2 must be positive")
    n1 = 1 / np.sqrt(s12)
    n2 = 1 / np.sqrt(s12 * r0**2 + r1**4 + r2**4 + 2 * r1**2 * r2**2 * np.cos(2 * (th1 - th2)))
    g22 = 2j * n2**2 * np.sin(2 * (th1 - th2)) * r1 * r2 * (r1 * dr2 - r2 * dr1)
    g21 = n1 * n2 * r0 * np.exp(1j * th0) * (np.exp(-1j * (th1 - th2)) * r2 * dr1
                                              - np.exp(1j * (th1 - th2)) * r1 * dr2)
    return -np.array([[0.0, -np.conj(g21)], [g21, g22]], dtype=complex)


def real_phase_factor(r, dr):
    """``f = r0 (r1 dr2 - r2 dr1) / ((r1^2 + r2^2) |r|)``; vectorized over rows."""
    r = np.asarray(r, dtype=float)
    dr = np.asarray(dr, dtype=float)
    r0, r1, r2 = r[..., 0], r[..., 1], r[..., 2]
    s12 = r1**2 + r2**2
    if np.any(s12 <= 0):
        raise PreconditionError("r1^2 + r2^2 must be positive")
    return r0 * (r1 * dr[..., 2] - r2 * dr[..., 1]) / (s12 * np.sqrt(r0**2 + s12))


def gamma_real_phases(r, theta0, dr):
    """``theta1 = theta2 = 0``: ``Gamma = f [[0, -e^{-i theta0}], [e^{i theta0}, 0]]``."""
    f = float(real_phase_factor(r, dr))
    return f * np.array([[0, -np.exp(-1j * theta0)], [np.exp(1j * theta0), 0]])


def gamma_z0_variation(t12, theta0, r12, dt12):
    """``z0 = t1 e^{i theta0} + t2`` varying, ``z1 = r1``, ``z2 = r2`` fixed.

    ``Gamma = diag(0, -i sin(theta0)(t1 dt2 - t2 dt1) / (r1^2 + r2^2 + |z0|^2))``.
    """
    t1, t2 = (float(v) for v in t12)
    r1, r2 = (float(v) for v in r12)
    dt1, dt2 = (float(v) for v in dt12)
    s12 = r1**2 + r2**2
    if s12 <= 0:
        raise PreconditionError("r1^2 + r2^2 must be positive")
    z0sq = t1**2 + t2**2 + 2 * t1 * t2 * np.cos(theta0)
    g = -1j * np.sin(theta0) * (t1 * dt2 - t2 * dt1) / (s12 + z0sq)
    return np.array([[0, 0], [0, g]], dtype=complex)


def gamma_entries(case, point, differential):
    """Dispatch to the closed-form connection matrices.

    ``case``: ``"general"`` (point ``z``, differential ``dz``),
    ``"moduli"`` (point ``(r, theta)``, differential ``dr``),
    ``"real_phases"`` (point ``(r, theta0)``, differential ``dr``),
    ``"z0_variation"`` (point ``((t1, t2), theta0, (r1, r2))``, differential ``(dt1, dt2)``).
    """
    if case == "general":
        return gamma_general(point, differential)
    if case == "moduli":
        return gamma_moduli(point[0], point[1], differential)
    if case == "real_phases":
        return gamma_real_phases(point[0], point[1], differential)
    if case == "z0_variation":
        return gamma_z0_variation(point[0], point[1], point[2], differential)
    raise ValueError(f"unknown case {case!r}")


# ---------------------------------------------------------------------------
# loops in (r0, r1, r2)


@dataclass(frozen=True)
class LoopSpec:
    """Closed path ``t -> r(t)`` in ``(r0, r1, r2)``, ``t`` in [0, 1].

    ``breakpoints`` lists interior parameters where the path is only
    continuous (polygon corners); smooth loops leave it empty.
    """

    name: str
    r: Callable
    dr: Callable
    ddr: Optional[Callable] = None
    breakpoints: tuple = ()
    params: dict = field(default_factory=dict)

    def reversed(self) -> "LoopSpec":
        ddr = (lambda t: self.ddr(1 - np.asarray(t))) if self.ddr else None
        return LoopSpec(self.name + "_reversed", lambda t: self.r(1 - np.asarray(t)),
                        lambda t: -self.dr(1 - np.asarray(t)), ddr,
                        tuple(sorted(1 - b for b in self.breakpoints)), dict(self.params))

    def closure_gap(self):
        return float(np.max(np.abs(self.r(0.0) - self.r(1.0))))


_AXES = {"r0": 0, "r1": 1, "r2": 2}


def _axis_vector(axis):
    if isinstance(axis, str):
        v = np.zeros(3)
        v[_AXES[axis]] = 1.0
        return v
    v = np.asarray(axis, dtype=float)
    return v / np.linalg.norm(v)


def _tangent_basis(a):
    # (u, v) with (u, v, a) right-handed
    helper = np.array([1.0, 0, 0]) if abs(a[0]) < 0.9 else np.array([0, 1.0, 0])
    u = np.cross(helper, a)
    u /= np.linalg.norm(u)
    v = np.cross(a, u)
    return u, v


def latitude_loop(theta_c, axis="r1", radius=1.0, orientation=1, name=None) -> LoopSpec:
    """Circle at polar angle ``theta_c`` about ``axis``, counterclockwise seen from
    the tip of the axis when ``orientation = +1``."""
    a = _axis_vector(axis)
    u, v = _tangent_basis(a)
    w = TWO_PI * orientation
    ct, st = np.cos(theta_c), np.sin(theta_c)

    def r(t):
        ph = w * np.asarray(t, dtype=float)[..., None]
        return radius * (ct * a + st * (np.cos(ph) * u + np.sin(ph) * v))

    def dr(t):
        ph = w * np.asarray(t, dtype=float)[..., None]
        return radius * st * w * (-np.sin(ph) * u + np.cos(ph) * v)

    def ddr(t):
        ph = w * np.asarray(t, dtype=float)[..., None]
        return -radius * st * w**2 * (np.cos(ph) * u + np.sin(ph) * v)

    label = axis if isinstance(axis, str) else "custom"
    return LoopSpec(name or f"latitude({label},{theta_c:.6g})", r, dr, ddr,
                    params={"theta_c": theta_c, "axis": label, "radius": radius,
                            "orientation": orientation})


def fourier_loop(coeffs, name="fourier") -> LoopSpec:
    """``r_j(t) = a_j0 + sum_k (a_jk cos 2 pi k t + b_jk sin 2 pi k t)``.

    ``coeffs`` maps ``"r0"|"r1"|"r2"`` to ``{"a": [a0, a1, ...], "b": [b1, ...]}``.
    """
    rows = []
    for key in ("r0", "r1", "r2"):
        c = coeffs.get(key, {"a": [0.0]})
        a = np.asarray(c.get("a", [0.0]), dtype=float)
        b = np.asarray(c.get("b", []), dtype=float)
        rows.append((a, b))

    def evaluate(t, order):
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape + (3,))
        for j, (a, b) in enumerate(rows):
            if order == 0:
                out[..., j] += a[0]
            for k in range(1, a.size):
                w = TWO_PI * k
                out[..., j] += a[k] * w**order * np.cos(w * t + order * np.pi / 2)
            for k in range(1, b.size + 1):
                w = TWO_PI * k
                out[..., j] += b[k - 1] * w**order * np.sin(w * t + order * np.pi / 2)
        return out

    return LoopSpec(name, lambda t: evaluate(t, 0), lambda t: evaluate(t, 1),
                    lambda t: evaluate(t, 2), params={"coeffs": coeffs})


def _slerp_pieces(verts):
    verts = [np.asarray(v, dtype=float) / np.linalg.norm(v) for v in verts]
    pieces = []
    for a, b in zip(verts, verts[1:] + verts[:1]):
        ang = np.arccos(np.clip(a @ b, -1.0, 1.0))
        if ang < 1e-12 or ang > np.pi - 1e-9:
            raise PreconditionError("polygon edges must join distinct, non-antipodal points")
        pieces.append((a, b, ang))
    return pieces


def great_circle_polygon(vertices: Sequence, radius=1.0, name="polygon") -> LoopSpec:
    """Spherical polygon traversed edge by edge at constant speed."""
    pieces = _slerp_pieces(list(vertices))
    m = len(pieces)

    def locate(t):
        t = np.asarray(t, dtype=float)
        s = np.clip(t, 0.0, 1.0) * m
        k = np.minimum(np.floor(s).astype(int), m - 1)
        return k, s - k

    def eval_(t, order):
        k, u = locate(t)
        out = np.zeros(np.shape(t) + (3,))
        kk, uu = np.atleast_1d(k), np.atleast_1d(u)
        res = np.zeros((kk.size, 3))
        for j, (a, b, ang) in enumerate(pieces):
            mask = kk == j
            if not mask.any():
                continue
            x = uu[mask][:, None] * ang
            perp = (b - a * np.cos(ang)) / np.sin(ang)
            if order == 0:
                res[mask] = np.cos(x) * a + np.sin(x) * perp
            else:
                res[mask] = (-np.sin(x) * a + np.cos(x) * perp) * ang * m
        out = res.reshape(np.shape(t) + (3,))
        return radius * out

    return LoopSpec(name, lambda t: eval_(t, 0), lambda t: eval_(t, 1), None,
                    tuple(k / m for k in range(1, m)),
                    params={"vertices": [list(map(float, v)) for v in vertices]})


def octant_polygon(radius=1.0) -> LoopSpec:
    """Spherical triangle ``(1,0,0) -> (0,1,0) -> (0,0,1)`` (``r0``, ``r1``, ``r2`` axes)."""
    return great_circle_polygon([(1, 0, 0), (0, 1, 0), (0, 0, 1)], radius, "octant")


def octant_polygon_cut(cut=1e-2, radius=1.0) -> LoopSpec:
    """Octant triangle with the corner on the ``r0`` axis replaced by a short
    great-circle chord at angular distance ``cut`` from the axis."""
    a = np.array([0.0, 0.0, 1.0])   # r2 axis
    b = np.array([1.0, 0.0, 0.0])   # r0 axis (singular line of the one-form)
    c = np.array([0.0, 1.0, 0.0])   # r1 axis
    p = np.cos(cut) * b + np.sin(cut) * a
    q = np.cos(cut) * b + np.sin(cut) * c
    return great_circle_polygon([c, a, p, q], radius, f"octant_cut({cut:g})")


# ---------------------------------------------------------------------------
# solid angle two ways


def omega_one_form(r):
    """Covector ``A`` with ``A . dr`` the holonomy-angle integrand (rows of ``r``)."""
    r = np.asarray(r, dtype=float)
    r0, r1, r2 = r[..., 0], r[..., 1], r[..., 2]
    s12 = r1**2 + r2**2
    pref = -r0 / (s12 * np.sqrt(r0**2 + s12))
    return np.stack([np.zeros_like(r0), -pref * r2, pref * r1], axis=-1)


def _integrand(loop, t):
    r = loop.r(t)
    if np.any(r[..., 1] ** 2 + r[..., 2] ** 2 <= 0):
        raise PreconditionError("loop meets the line r1 = r2 = 0")
    return np.einsum("...i,...i->...", omega_one_form(r), loop.dr(t))


def omega_line_integral(loop: LoopSpec, tol=1e-10, n0=64, n_max=2**20) -> float:
    """Line integral of ``-r0 (r1 dr2 - r2 dr1) / ((r1^2 + r2^2) |r|)`` around ``loop``.

    Smooth loops use the periodic trapezoid rule; piecewise-smooth loops use
    Gauss-Legendre on each piece.  Nodes double until the change is below ``tol``.
    """
    if loop.closure_gap() > 1e-10:
        raise PreconditionError(f"loop is not closed (gap {loop.closure_gap():.2e})")
    edges = np.concatenate([[0.0], np.asarray(loop.breakpoints, dtype=float), [1.0]])

    def rule(n):
        if edges.size == 2:
            t = np.arange(n) / n
            return float(np.sum(_integrand(loop, t)) / n)
        x, w = np.polynomial.legendre.leggauss(n)
        total = 0.0
        for lo, hi in zip(edges[:-1], edges[1:]):
            t = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
            total += 0.5 * (hi - lo) * float(np.sum(w * _integrand(loop, t)))
        return total

    n = n0
    prev = rule(n)
    limit = n_max if edges.size == 2 else 512
    while True:
        n *= 2
        if n > limit:
            raise ConvergenceError(f"line integral not converged at {limit} nodes")
        cur = rule(n)
        if abs(cur - prev) < tol:
            return cur
        prev = cur


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _arcs_cross(p, q):
    """Pairwise crossing test of great-circle arcs ``p[i] -> p[i+1]`` (closed polygon).

    Adjacent arcs share an endpoint and are skipped.
    """
    a, b = p, np.roll(p, -1, axis=0)
    c, d = q, np.roll(q, -1, axis=0)
    n1 = np.cross(a, b)
    n2 = np.cross(c, d)
    x = np.cross(n1[:, None, :], n2[None, :, :])
    norm = np.linalg.norm(x, axis=-1)
    ok = norm > 1e-15
    x = np.where(ok[..., None], x / np.where(ok, norm, 1.0)[..., None], 0.0)
    hits = np.zeros(norm.shape, dtype=bool)
    for sgn in (1.0, -1.0):
        y = sgn * x
        on1 = ((np.einsum("ik,ijk->ij", np.cross(a, n1), y) >= 0) &
               (np.einsum("ijk,ik->ij", y, np.cross(b, n1) * -1) >= 0))
        on2 = ((np.einsum("jk,ijk->ij", np.cross(c, n2), y) >= 0) &
               (np.einsum("ijk,jk->ij", y, np.cross(d, n2) * -1) >= 0))
        hits |= on1 & on2
    return hits & ok


def is_simple_spherical(points) -> bool:
    """True when no two non-adjacent arcs of the closed spherical polygon cross."""
    p = _unit(np.asarray(points, dtype=float))
    m = p.shape[0]
    hits = _arcs_cross(p, p)
    idx = np.arange(m)
    gap = np.abs(idx[:, None] - idx[None, :])
    adjacent = (gap <= 1) | (gap == m - 1)
    return not np.any(hits & ~adjacent)


def spherical_polygon_area(points) -> float:
    """Area to the left of a closed spherical polygon (geodesic edges), in [0, 4 pi)."""
    v = _unit(np.asarray(points, dtype=float))
    prev, nxt = np.roll(v, 1, axis=0), np.roll(v, -1, axis=0)
    t_in = np.cross(np.cross(prev, v), v)
    t_out = np.cross(np.cross(v, nxt), v)
    turn = np.arctan2(np.einsum("ij,ij->i", np.cross(t_in, t_out), v),
                      np.einsum("ij,ij->i", t_in, t_out))
    area = TWO_PI - float(np.sum(turn))
    return float(np.mod(area, 2 * TWO_PI))


def omega_solid_angle(loop: LoopSpec, nodes=2**15, check_nodes=1024) -> float:
    """Oriented solid angle enclosed by the radial projection of ``loop``.

    The left-hand region (counterclockwise seen from outside counts positive)
    is measured by Gauss-Bonnet on a fine polygon, then mapped to (-2 pi, 2 pi]
    by choosing the smaller of the two complementary regions.
    """
    if loop.closure_gap() > 1e-10:
        raise PreconditionError("loop is not closed")
    if loop.breakpoints:
        edges = np.concatenate([[0.0], np.asarray(loop.breakpoints, dtype=float)])
        per = max(2, nodes // edges.size)
        bounds = np.concatenate([edges, [1.0]])
        t = np.concatenate([np.linspace(lo, hi, per, endpoint=False)
                            for lo, hi in zip(bounds[:-1], bounds[1:])])
        tc = np.concatenate([np.linspace(lo, hi, max(2, check_nodes // edges.size), endpoint=False)
                             for lo, hi in zip(bounds[:-1], bounds[1:])])
    else:
        t = np.arange(nodes) / nodes
        tc = np.arange(check_nodes) / check_nodes
    r = loop.r(t)
    if np.any(np.linalg.norm(r, axis=-1) <= 0):
        raise PreconditionError("loop passes through the origin")
    if not is_simple_spherical(loop.r(tc)):
        raise SelfIntersectionError("projected loop intersects itself")
    area = spherical_polygon_area(r)
    return area if area <= TWO_PI else area - 2 * TWO_PI


# ---------------------------------------------------------------------------
# closed-form holonomies


def closed_form_B1(omega, theta0):
    """``[[cos W, sin W e^{-i t0}], [-sin W e^{i t0}, cos W]]``."""
    c, s = np.cos(omega), np.sin(omega)
    return np.array([[c, s * np.exp(-1j * theta0)], [-s * np.exp(1j * theta0), c]])


def closed_form_B1_dtheta(omega, theta0):
    """Derivative of ``closed_form_B1`` with respect to ``theta0``."""
    s = np.sin(omega)
    return np.array([[0, -1j * s * np.exp(-1j * theta0)], [-1j * s * np.exp(1j * theta0), 0]])


def constant_phase_B(x, t_grid, tol=1e-8):
    """Holonomy for ``Gamma = [[0, -conj(x)], [x, 0]]`` when ``x = rho(t) e^{i v}``.

    ``x`` holds samples on the uniform ``t_grid`` (odd length, Simpson).
    Returns ``exp(int rho * M)`` with ``M = [[0, -e^{-iv}], [e^{iv}, 0]]``.
    """
    x = np.asarray(x, dtype=complex)
    scale = np.max(np.abs(x))
    if scale == 0.0:
        return np.eye(2, dtype=complex)
    vartheta = float(np.angle(x[np.argmax(np.abs(x))]))
    rot = x * np.exp(-1j * vartheta)
    if np.max(np.abs(rot.imag)) > tol * max(1.0, scale):
        raise PreconditionError("arg x(t) is not constant; no closed-form holonomy")
    R = simpson(rot.real, x=t_grid)
    c, s = np.cos(R), np.sin(R)
    return np.array([[c, -s * np.exp(-1j * vartheta)], [s * np.exp(1j * vartheta), c]])


# ---------------------------------------------------------------------------
# the n = 3 family along a loop


@dataclass(frozen=True)
class SpecialCaseParams:
    """Special-case family ``z = (r0 e^{i theta0(alpha)}, r1 e^{i theta1}, r2 e^{i theta2})``
    with ``(r0, r1, r2)`` following ``loop`` and ``theta0(alpha) = theta0 + theta0_slope * alpha``."""

    loop: LoopSpec
    theta0: float = 0.3
    theta0_slope: float = 0.0
    theta1: float = 0.0
    theta2: float = 0.0
    E: float = 0.5

    def theta0_of(self, alpha):
        return self.theta0 + self.theta0_slope * alpha

    def z(self, t, alpha, order=0):
        fn = (self.loop.r, self.loop.dr, self.loop.ddr)[order]
        r = fn(t)
        ph = np.array([np.exp(1j * self.theta0_of(alpha)), np.exp(1j * self.theta1),
                       np.exp(1j * self.theta2)])
        return r * ph

    def z_dalpha(self, t, alpha):
        r = self.loop.r(t)
        out = np.zeros(r.shape, dtype=complex)
        out[..., 0] = 1j * self.theta0_slope * r[..., 0] * np.exp(1j * self.theta0_of(alpha))
        return out

    def family(self, name="special_case") -> HamiltonianFamily:
        e = self.E

        def h(t, a):
            return build_H(self.z(t, a), e)

        def ht(t, a):
            return build_H(self.z(t, a, 1), 0.0)

        def htt(t, a):
            return build_H(self.z(t, a, 2), 0.0)

        def ha(t, a):
            return build_H(self.z_dalpha(t, a), 0.0)

        return HamiltonianFamily(
            4, h, ht, ha, htt if self.loop.ddr is not None else None,
            periodic_t=True, periodic_alpha=False, name=name,
            params={"loop": self.loop.name, "theta0": self.theta0,
                    "theta0_slope": self.theta0_slope, "theta1": self.theta1,
                    "theta2": self.theta2, "E": self.E},
            smoothness_note="analytic along smooth loops")

    def frame(self, t, alpha, variant="canonical"):
        return frame_from_z(self.z(t, alpha), variant)

    def frame_dalpha(self, t, alpha):
        """``d psi / d alpha`` for the canonical frame (only ``psi2`` depends on ``theta0``)."""
        z = np.atleast_2d(self.z(t, alpha))
        out = np.zeros(z.shape[:-1] + (4, 2), dtype=complex)
        z0, z1, z2 = z[..., 0], z[..., 1], z[..., 2]
        _, d2 = _norms(z0, z1, z2)
        n2 = 1 / np.sqrt(d2)
        dz0bar = -1j * self.theta0_slope * np.conj(z0)
        out[..., 2, 1] = -n2 * dz0bar * np.conj(z1)
        out[..., 3, 1] = -n2 * dz0bar * np.conj(z2)
        return out[0] if np.ndim(t) == 0 else out

    def omega(self, **kw):
        return omega_line_integral(self.loop, **kw)

    def holonomy_closed_form(self, alpha):
        if self.theta1 != 0.0 or self.theta2 != 0.0:
            raise PreconditionError("closed-form holonomy needs theta1 = theta2 = 0")
        return closed_form_B1(self.omega(), self.theta0_of(alpha))

    def charge_bracket_closed_form(self, alpha):
        """``i(B^dag A B + B^dag dB - A)`` at ``t = 1`` from the closed forms,
        where ``A = F(0)^dag dF(0)/dalpha`` and ``d`` is ``d/dalpha``."""
        om = self.omega()
        th = self.theta0_of(alpha)
        B = closed_form_B1(om, th)
        dB = closed_form_B1_dtheta(om, th) * self.theta0_slope
        F0 = self.frame(0.0, alpha)
        A = dagger(F0) @ self.frame_dalpha(0.0, alpha)
        return 1j * (dagger(B) @ A @ B + dagger(B) @ dB - A)


@dataclass(frozen=True)
class Z0VariationParams:
    """``z0 = t1(t) e^{i theta0} + t2(t)`` along a planar loop, ``z1 = r1``, ``z2 = r2`` fixed."""

    t_loop: Callable          # t -> (..., 2)
    dt_loop: Callable
    theta0: float = 0.7
    r1: float = 0.6
    r2: float = 0.8
    E: float = 0.5
    ddt_loop: Optional[Callable] = None

    def z(self, t, alpha=0.0, order=0):
        fn = (self.t_loop, self.dt_loop, self.ddt_loop)[order]
        tt = np.asarray(fn(t), dtype=float)
        z0 = tt[..., 0] * np.exp(1j * self.theta0) + tt[..., 1]
        r = (self.r1, self.r2) if order == 0 else (0.0, 0.0)
        return np.stack([z0, np.full_like(z0, r[0]), np.full_like(z0, r[1])], axis=-1)

    def family(self, name="z0_variation") -> HamiltonianFamily:
        def mk(order, e):
            return lambda t, a: build_H(self.z(t, a, order), e)

        zero = lambda t, a: np.zeros(np.shape(t) + (4, 4), dtype=complex)
        return HamiltonianFamily(4, mk(0, self.E), mk(1, 0.0), zero,
                                 mk(2, 0.0) if self.ddt_loop else None,
                                 periodic_t=True, name=name,
                                 params={"theta0": self.theta0, "r1": self.r1, "r2": self.r2})

    def frame(self, t, alpha=0.0):
        return frame_from_z(self.z(t, alpha))

    def phase_integral(self, n=4096):
        """``int Gamma_22`` over the loop (periodic trapezoid)."""
        t = np.arange(n) / n
        tt, dt = self.t_loop(t), self.dt_loop(t)
        vals = [gamma_z0_variation(a, self.theta0, (self.r1, self.r2), b)[1, 1]
                for a, b in zip(tt, dt)]
        return complex(np.sum(vals) / n)

    def holonomy_closed_form(self):
        return np.diag([1.0, np.exp(self.phase_integral())]).astype(complex)


def circle_2d(center=(0.8, 0.3), radius=0.4, turns=1):
    """Planar circle ``t -> center + radius (cos, sin)(2 pi turns t)`` with derivatives."""
    c = np.asarray(center, dtype=float)
    w = TWO_PI * turns

    def f(t):
        ph = w * np.asarray(t, dtype=float)
        return np.stack([c[0] + radius * np.cos(ph), c[1] + radius * np.sin(ph)], axis=-1)

    def df(t):
        ph = w * np.asarray(t, dtype=float)
        return np.stack([-radius * w * np.sin(ph), radius * w * np.cos(ph)], axis=-1)

    def ddf(t):
        ph = w * np.asarray(t, dtype=float)
        return np.stack([-radius * w**2 * np.cos(ph), -radius * w**2 * np.sin(ph)], axis=-1)

    return f, df, ddf


__all__ = [
    "build_H", "spectrum_closed_form", "kernel_projector", "top_eigenvalue", "ZLoop",
    "unit_direction", "phase_fixed_direction", "kato_closed_form", "special_eigenvectors",
    "frame_from_z", "gamma_general", "gamma_moduli", "gamma_real_phases",
    "gamma_z0_variation", "gamma_entries", "real_phase_factor", "LoopSpec", "latitude_loop",
    "fourier_loop", "great_circle_polygon", "octant_polygon", "octant_polygon_cut",
    "omega_one_form", "omega_line_integral", "omega_solid_angle", "spherical_polygon_area",
    "is_simple_spherical", "closed_form_B1", "closed_form_B1_dtheta", "constant_phase_B",
    "SpecialCaseParams", "Z0VariationParams", "circle_2d",
]

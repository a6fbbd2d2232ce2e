"""Time- and parameter-dependent Hermitian matrix families.

A family is a map ``(t, alpha) -> H`` on the unit square together with
optional analytic derivatives.  Every evaluator accepts either a scalar ``t``
or a one-dimensional array of times (one ``alpha`` per call); the array form
returns a stack ``(len(t), dim, dim)`` and is what the propagators use.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .errors import DomainError, GapCollapseError, ShapeError
from .numerics import dagger, hermitian_residual

H_FD = 1e-4
H_FD2 = 1e-3
DOMAIN_SLACK = 1e-12


@dataclass(frozen=True)
class HamiltonianFamily:
    """Smooth map ``(t, alpha) -> dim x dim`` Hermitian matrix.

    ``eval`` (and the optional derivative maps) must accept ``t`` as a float or
    as a 1-d array; set ``vectorized=False`` for callables that only take floats.
    """

    dim: int
    eval: Callable
    dt_eval: Optional[Callable] = None
    dalpha_eval: Optional[Callable] = None
    dtt_eval: Optional[Callable] = None
    periodic_t: bool = False
    periodic_alpha: bool = False
    vectorized: bool = True
    name: str = "custom"
    params: dict = field(default_factory=dict)
    smoothness_note: str = ""


@dataclass(frozen=True)
class SpectralSelection:
    """Rule picking the isolated part of the spectrum.

    ``kind="nearest"`` selects the single eigenvalue closest to ``e_ref``;
    ``kind="cluster"`` selects the ``k`` eigenvalues closest to ``e_ref``
    (a contiguous window of the sorted spectrum).  The reference follows the selected
    cluster from one grid point to the next.
    """

    e_ref: float = 0.0
    k: int = 1
    kind: str = "cluster"

    def __post_init__(self):
        if self.kind not in ("nearest", "cluster"):
            raise ValueError(f"unknown selection kind {self.kind!r}")
        if self.kind == "nearest" and self.k != 1:
            raise ValueError("'nearest' selection picks exactly one eigenvalue")
        if self.k < 1:
            raise ValueError("selection size must be positive")


@dataclass(frozen=True)
class GapWindow:
    """Gap certificate over a grid.

    The scalar fields describe the grid point of smallest gap; the arrays keep
    the per-point cluster center, radius and gap.
    """

    sigma_center: complex
    sigma_radius: float
    gap_lower_bound: float
    rank: int
    centers: np.ndarray
    radii: np.ndarray
    gaps: np.ndarray


def _check_domain(t, alpha):
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < -DOMAIN_SLACK) or np.any(t_arr > 1 + DOMAIN_SLACK):
        raise DomainError(f"t outside [0, 1]: {t}")
    if not (-DOMAIN_SLACK <= float(alpha) <= 1 + DOMAIN_SLACK):
        raise DomainError(f"alpha outside [0, 1]: {alpha}")


def _call(family, fn, t, alpha):
    if np.ndim(t) == 0 or family.vectorized:
        out = np.asarray(fn(t, alpha), dtype=complex)
    else:
        out = np.stack([np.asarray(fn(float(s), alpha), dtype=complex) for s in np.asarray(t)])
    expected = (family.dim, family.dim) if np.ndim(t) == 0 else (np.size(t), family.dim, family.dim)
    if out.shape != expected:
        if np.ndim(t) and out.shape == (family.dim, family.dim):
            out = np.broadcast_to(out, expected).copy()
        else:
            raise ShapeError(f"family returned shape {out.shape}, expected {expected}")
    return out


def evaluate(family: HamiltonianFamily, t, alpha):
    """Return ``H_alpha(t)`` (scalar ``t``) or a stack of them (array ``t``)."""
    _check_domain(t, alpha)
    return _call(family, family.eval, t, alpha)


def _fd_many(f, ts, h, order, lo=0.0, hi=1.0):
    """Vectorized version of the boundary-aware stencils in ``numerics``."""
    from .numerics import _CENTRAL1, _CENTRAL2, _FORWARD1, _FORWARD2

    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    central, forward = (_CENTRAL1, _FORWARD1) if order == 1 else (_CENTRAL2, _FORWARD2)
    lo_mask = ts - 2 * h < lo - 1e-15
    hi_mask = (ts + 2 * h > hi + 1e-15) & ~lo_mask
    mid_mask = ~(lo_mask | hi_mask)
    out = None
    for mask, (offsets, weights), sign in (
        (mid_mask, central, 1.0),
        (lo_mask, forward, 1.0),
        (hi_mask, forward, -1.0),
    ):
        if not np.any(mask):
            continue
        sub = ts[mask]
        acc = 0.0
        for o, w in zip(offsets, weights):
            if w != 0.0:
                acc = acc + w * f(sub + sign * o * h)
        acc = acc * sign**order / h**order
        if out is None:
            out = np.empty((ts.size,) + acc.shape[1:], dtype=complex)
        out[mask] = acc
    return out


def _derivative(family, fn, t, alpha, which, h, order=1):
    _check_domain(t, alpha)
    if fn is not None:
        return _call(family, fn, t, alpha)
    scalar = np.ndim(t) == 0
    if which == "t":
        val = _fd_many(lambda s: _call(family, family.eval, s, alpha), t, h, order)
    else:
        def along_alpha(a_arr):
            return np.stack([_call(family, family.eval, t, float(a)) for a in a_arr])
        val = _fd_many(along_alpha, np.array([alpha], dtype=float), h, order)[0]
        return val
    return val[0] if scalar else val


def derivative_t(family: HamiltonianFamily, t, alpha, h=H_FD):
    """``dH/dt``: analytic when provided, else 4th-order finite differences."""
    return _derivative(family, family.dt_eval, t, alpha, "t", h)


def derivative_alpha(family: HamiltonianFamily, t, alpha, h=H_FD):
    """``dH/dalpha``, the current operator."""
    return _derivative(family, family.dalpha_eval, t, alpha, "alpha", h)


def second_derivative_t(family: HamiltonianFamily, t, alpha, h=H_FD2):
    return _derivative(family, family.dtt_eval, t, alpha, "t", h, order=2)


# ---------------------------------------------------------------------------
# spectral selection and gap certification


def select_cluster(eigs, selection: SpectralSelection, ref=None):
    """Indices (into the sorted ``eigs``) of the selected cluster."""
    eigs = np.asarray(eigs, dtype=float)
    ref = selection.e_ref if ref is None else ref
    k = selection.k
    n = eigs.size
    if k > n:
        raise ValueError("selection larger than the dimension")
    if k == n:
        return np.arange(n)
    if selection.kind == "nearest":
        return np.array([int(np.argmin(np.abs(eigs - ref)))])
    best, best_key = 0, None
    for i in range(n - k + 1):
        lo, hi = eigs[i], eigs[i + k - 1]
        key = (max(abs(lo - ref), abs(hi - ref)), abs(0.5 * (lo + hi) - ref))
        if best_key is None or key < best_key:
            best, best_key = i, key
    return np.arange(best, best + k)


def cluster_geometry(eigs, idx):
    """(center, inner radius, gap) of a selected cluster."""
    eigs = np.asarray(eigs, dtype=float)
    inside = eigs[idx]
    mask = np.ones(eigs.size, dtype=bool)
    mask[idx] = False
    outside = eigs[mask]
    center = float(inside.mean())
    radius = float(np.max(np.abs(inside - center)))
    if outside.size == 0:
        gap = np.inf
    else:
        gap = float(np.min(np.abs(outside[:, None] - inside[None, :])))
    return center, radius, gap


def track_clusters(eig_stack, selection: SpectralSelection):
    """Follow the selected cluster along a sequence of sorted spectra."""
    ref = selection.e_ref
    out = []
    for eigs in eig_stack:
        idx = select_cluster(eigs, selection, ref)
        out.append(idx)
        ref = float(np.mean(np.asarray(eigs)[idx]))
    return out


def certify_gap(family: HamiltonianFamily, grid, selection: SpectralSelection,
                gap_floor: float = 1e-6) -> GapWindow:
    """Check the gap hypothesis on ``grid`` (a sequence of ``(t, alpha)`` pairs).

    Raises ``GapCollapseError`` when the smallest observed distance between the
    selected cluster and the rest of the spectrum falls below ``gap_floor``.
    """
    grid = np.asarray(grid, dtype=float).reshape(-1, 2)
    if grid.shape[0] == 0:
        raise ValueError("empty grid")
    eig_stack = [np.linalg.eigvalsh(evaluate(family, t, a)) for t, a in grid]
    picks = track_clusters(eig_stack, selection)
    geo = np.array([cluster_geometry(e, i) for e, i in zip(eig_stack, picks)])
    centers, radii, gaps = geo[:, 0], geo[:, 1], geo[:, 2]
    j = int(np.argmin(gaps))
    if not gaps[j] >= gap_floor:
        raise GapCollapseError(
            f"gap {gaps[j]:.3e} below floor {gap_floor:.1e} at (t, alpha) = {tuple(grid[j])}")
    return GapWindow(complex(centers[j]), float(radii[j]), float(gaps[j]), selection.k,
                     centers, radii, gaps)


def gap_grid(t_grid, alpha):
    t_grid = np.asarray(t_grid, dtype=float)
    return np.column_stack([t_grid, np.full_like(t_grid, float(alpha))])


# ---------------------------------------------------------------------------
# built-in families


def constant_family(matrix, name="constant") -> HamiltonianFamily:
    m = np.asarray(matrix, dtype=complex)
    if hermitian_residual(m) > 1e-12:
        raise ValueError("matrix is not Hermitian")
    d = m.shape[0]
    zero = np.zeros_like(m)

    def const(val):
        def f(t, alpha):
            if np.ndim(t) == 0:
                return val.copy()
            return np.broadcast_to(val, (np.size(t), d, d)).copy()
        return f

    return HamiltonianFamily(d, const(m), const(zero), const(zero), const(zero),
                             periodic_t=True, periodic_alpha=True, name=name,
                             smoothness_note="constant")


def linear_alpha_family(matrix, name="linear_alpha") -> HamiltonianFamily:
    """``H(t, alpha) = alpha * M``."""
    m = np.asarray(matrix, dtype=complex)
    d = m.shape[0]
    zero = np.zeros_like(m)

    def shaped(val, t):
        return val if np.ndim(t) == 0 else np.broadcast_to(val, (np.size(t), d, d)).copy()

    return HamiltonianFamily(
        d,
        lambda t, a: shaped(a * m, t),
        lambda t, a: shaped(zero, t),
        lambda t, a: shaped(m.copy(), t),
        lambda t, a: shaped(zero, t),
        periodic_t=True, name=name)


def scalar_family(h, dh_dt=None, dh_dalpha=None, d2h_dt2=None, name="scalar") -> HamiltonianFamily:
    """One-dimensional family from a real function ``h(t, alpha)``."""
    def wrap(fn):
        if fn is None:
            return None

        def g(t, a):
            v = np.asarray(fn(t, a), dtype=complex)
            return v.reshape(np.shape(t) + (1, 1))
        return g

    return HamiltonianFamily(1, wrap(h), wrap(dh_dt), wrap(dh_dalpha), wrap(d2h_dt2), name=name)


def commuting_family(f, df, h0, name="commuting") -> HamiltonianFamily:
    """``H(t) = f(t) H0``; all values commute, so ``U`` is an exact exponential."""
    h0 = np.asarray(h0, dtype=complex)
    d = h0.shape[0]
    zero = np.zeros_like(h0)

    def scale(fn):
        def g(t, a):
            v = np.asarray(fn(t), dtype=float)
            return v[..., None, None] * h0
        return g

    def zeros(t, a):
        return zero.copy() if np.ndim(t) == 0 else np.zeros((np.size(t), d, d), dtype=complex)

    return HamiltonianFamily(d, scale(f), scale(df), zeros, None, name=name)


def _random_hermitian(rng, d):
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    a = 0.5 * (a + a.conj().T)
    return a / np.linalg.norm(a, 2)


def random_family(dim=4, rank=1, seed=0, coupling=0.1, alpha_dependent=True,
                  cluster_width=0.2, outer_min=1.5, outer_max=2.5, n_terms=3,
                  name=None) -> HamiltonianFamily:
    """Random smooth gapped family, 1-periodic in ``t``.

    ``H = D + coupling * sum_j cos(2 pi k_j t + w_j alpha + phi_j) A_j`` with a
    fixed diagonal ``D`` whose first ``rank`` entries (the cluster meant to be
    selected with ``e_ref = 0``) lie in ``[-cluster_width, cluster_width]`` and
    the rest at distance ``outer_min..outer_max`` on either side.  Each term
    moves eigenvalues by at most ``coupling``, so the gap is at least
    ``outer_min - cluster_width - 2 * n_terms * coupling``.
    """
    rng = np.random.default_rng(seed)
    inner = rng.uniform(-cluster_width, cluster_width, size=rank)
    outer = rng.uniform(outer_min, outer_max, size=dim - rank) * rng.choice([-1.0, 1.0], size=dim - rank)
    diag = np.diag(np.concatenate([inner, outer])).astype(complex)
    mats = np.stack([_random_hermitian(rng, dim) for _ in range(n_terms)])
    k = rng.integers(1, 3, size=n_terms).astype(float)
    w = rng.uniform(0.5, 2.0, size=n_terms) if alpha_dependent else np.zeros(n_terms)
    phi = rng.uniform(0, 2 * np.pi, size=n_terms)
    two_pi_k = 2 * np.pi * k

    def args(t, a):
        return np.multiply.outer(np.asarray(t, dtype=float), two_pi_k) + w * a + phi

    def combine(coef):
        return coupling * np.einsum("...j,jab->...ab", coef, mats)

    def h(t, a):
        return diag + combine(np.cos(args(t, a)))

    def ht(t, a):
        return combine(-two_pi_k * np.sin(args(t, a)))

    def ha(t, a):
        return combine(-w * np.sin(args(t, a)))

    def htt(t, a):
        return combine(-(two_pi_k**2) * np.cos(args(t, a)))

    params = {"dim": dim, "rank": rank, "seed": seed, "coupling": coupling,
              "alpha_dependent": alpha_dependent}
    return HamiltonianFamily(dim, h, ht, ha, htt, periodic_t=True,
                             name=name or f"random(dim={dim},rank={rank},seed={seed})",
                             params=params, smoothness_note="trigonometric, analytic")


_SX = np.array([[0, 1], [1, 0]], dtype=complex)
_SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
_SZ = np.array([[1, 0], [0, -1]], dtype=complex)


def two_level_family(theta0=0.6, theta1=0.5, radius=1.0, shift0=0.0, shift1=0.3,
                     smooth_start=False, name="two_level") -> HamiltonianFamily:
    """Spin-1/2 in a field rotating on a cone: ``H = radius n.sigma + (shift0 + shift1 alpha) I``.

    ``n(t, alpha)`` sweeps the latitude at polar angle ``theta0 + theta1 alpha``
    once per period; the eigenvalues are ``shift0 + shift1 alpha +- radius``.
    With ``smooth_start`` the azimuth is ``2 pi t - sin(2 pi t)``, so the field
    is at rest at ``t = 0`` and ``t = 1``.
    """
    def theta(a):
        return theta0 + theta1 * a

    def field_parts(t, a, dphi=0, dth=0):
        tt = np.asarray(t, dtype=float)
        w = 2 * np.pi
        if smooth_start:
            phi = w * tt - np.sin(w * tt)
            d1, d2 = w * (1 - np.cos(w * tt)), w**2 * np.sin(w * tt)
        else:
            phi, d1, d2 = w * tt, w + 0 * tt, 0 * tt
        th = theta(a)
        # derivatives of (sin th cos phi, sin th sin phi, cos th)
        s, c = np.sin(th), np.cos(th)
        if dth == 1:
            s, c = np.cos(th), -np.sin(th)
        cp, sp = np.cos(phi), np.sin(phi)
        if dphi == 1:
            cp, sp = -sp * d1, cp * d1
        elif dphi == 2:
            cp, sp = -cp * d1**2 - sp * d2, -sp * d1**2 + cp * d2
        nz = c if dphi == 0 else 0.0 * phi
        return s * cp, s * sp, nz + 0.0 * phi

    def assemble(nx, ny, nz, scale):
        nx, ny, nz = (np.asarray(v, dtype=float)[..., None, None] for v in (nx, ny, nz))
        return scale * (nx * _SX + ny * _SY + nz * _SZ)

    eye = np.eye(2, dtype=complex)

    def h(t, a):
        return assemble(*field_parts(t, a), radius) + (shift0 + shift1 * a) * eye

    def ht(t, a):
        return assemble(*field_parts(t, a, dphi=1), radius)

    def htt(t, a):
        return assemble(*field_parts(t, a, dphi=2), radius)

    def ha(t, a):
        nx, ny, nz = field_parts(t, a, dth=1)
        out = assemble(nx, ny, nz, radius * theta1)
        return out + shift1 * eye

    params = {"theta0": theta0, "theta1": theta1, "radius": radius,
              "shift0": shift0, "shift1": shift1, "smooth_start": smooth_start}
    return HamiltonianFamily(2, h, ht, ha, htt, periodic_t=True, name=name, params=params)


def crossing_family(name="crossing") -> HamiltonianFamily:
    """``diag(1 - 2t, 2t - 1)``: the two levels cross at ``t = 1/2``."""
    def h(t, a):
        s = 1 - 2 * np.asarray(t, dtype=float)
        return np.einsum("...,ab->...ab", s, _SZ.astype(complex))

    def ht(t, a):
        return np.einsum("...,ab->...ab", -2.0 + 0 * np.asarray(t, dtype=float), _SZ.astype(complex))

    def zero(t, a):
        return np.einsum("...,ab->...ab", 0 * np.asarray(t, dtype=float), _SZ.astype(complex))

    return HamiltonianFamily(2, h, ht, zero, zero, name=name)


# ---------------------------------------------------------------------------
# tabulated families


def write_tabulated(path, family: HamiltonianFamily, n_t: int, n_alpha: int):
    """Sample ``family`` on a uniform ``n_t x n_alpha`` grid and write it as text.

    Layout: a header line ``dim n_t n_alpha`` followed by one line per node
    (t index major, alpha index minor), each holding the ``dim * dim`` complex
    entries row-major as ``re im`` pairs.
    """
    ts = np.linspace(0, 1, n_t)
    alphas = np.linspace(0, 1, n_alpha)
    lines = [f"{family.dim} {n_t} {n_alpha}"]
    for t in ts:
        for a in alphas:
            m = evaluate(family, float(t), float(a)).reshape(-1)
            pairs = np.column_stack([m.real, m.imag]).reshape(-1)
            lines.append(" ".join(repr(float(x)) for x in pairs))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_tabulated(path, name=None) -> HamiltonianFamily:
    """Family from a tabulated grid file, bicubically interpolated in ``(t, alpha)``."""
    with open(path) as fh:
        rows = [ln.split() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows or len(rows[0]) != 3:
        raise ShapeError("header must be 'dim n_t n_alpha'")
    dim, n_t, n_alpha = (int(x) for x in rows[0])
    data = np.array(rows[1:], dtype=float)
    if data.shape != (n_t * n_alpha, 2 * dim * dim):
        raise ShapeError(f"expected {n_t * n_alpha} rows of {2 * dim * dim} numbers, got {data.shape}")
    if min(n_t, n_alpha) < 4:
        raise ShapeError("bicubic interpolation needs at least 4 nodes per axis")
    vals = (data[:, 0::2] + 1j * data[:, 1::2]).reshape(n_t, n_alpha, dim, dim)
    if hermitian_residual(vals) > 1e-10:
        raise ValueError("tabulated matrices are not Hermitian")
    ts = np.linspace(0, 1, n_t)
    alphas = np.linspace(0, 1, n_alpha)
    iu = np.triu_indices(dim)
    splines = [(RectBivariateSpline(ts, alphas, vals[:, :, i, j].real, kx=3, ky=3),
                RectBivariateSpline(ts, alphas, vals[:, :, i, j].imag, kx=3, ky=3))
               for i, j in zip(*iu)]

    def make(dx, dy):
        def f(t, a):
            tt = np.atleast_1d(np.asarray(t, dtype=float))
            aa = np.full_like(tt, float(a))
            out = np.zeros((tt.size, dim, dim), dtype=complex)
            for (sr, si), i, j in zip(splines, *iu):
                v = sr.ev(tt, aa, dx=dx, dy=dy) + 1j * si.ev(tt, aa, dx=dx, dy=dy)
                out[:, i, j] = v
                if i != j:
                    out[:, j, i] = np.conj(v)
                else:
                    out[:, i, i] = v.real
            return out[0] if np.ndim(t) == 0 else out
        return f

    return HamiltonianFamily(dim, make(0, 0), make(1, 0), make(0, 1), make(2, 0),
                             name=name or f"tabulated({path})",
                             smoothness_note="bicubic spline (C2 in t)")


def is_hermitian_family(family, samples=100, seed=0, tol=1e-12):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 1, size=(samples, 2))
    return max(hermitian_residual(evaluate(family, t, a)) for t, a in pts) < tol


__all__ = [
    "HamiltonianFamily", "SpectralSelection", "GapWindow", "evaluate", "derivative_t",
    "derivative_alpha", "second_derivative_t", "certify_gap", "select_cluster",
    "cluster_geometry", "track_clusters", "gap_grid", "constant_family",
    "linear_alpha_family", "scalar_family", "commuting_family", "random_family",
    "two_level_family", "crossing_family", "write_tabulated", "load_tabulated",
    "is_hermitian_family", "dagger",
]

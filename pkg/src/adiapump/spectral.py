"""Spectral projectors by contour quadrature, and the objects built from them.

All quadratures use the equispaced trapezoid rule on a circle, which converges
geometrically for the resolvent.  Node counts start at 64 and double until two
successive results agree to ``QUAD_TOL`` (relative to the size of the result,
floored at one).

Batched helpers (``*_batch``) take stacks of times and per-time contours; the
scalar operations are thin wrappers around them.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import model
from .errors import ContourViolationError, ConvergenceError, ShapeError
from .model import HamiltonianFamily, SpectralSelection
from .numerics import dagger, maxabs

QUAD_TOL = 1e-11
NODES_START = 64
NODES_MAX = 4096
HYSTERESIS = 0.25
CHUNK_ELEMENTS = 2_000_000


@dataclass(frozen=True)
class Contour:
    """Circle ``center + radius * exp(i theta)`` traversed counterclockwise."""

    center: complex
    radius: float
    nodes: int = NODES_START

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("contour radius must be positive")
        if self.nodes < 16:
            raise ValueError("contour needs at least 16 nodes")

    def check(self, eigs, expected_inside=None, margin=10 * QUAD_TOL):
        """Raise unless every eigenvalue sits clearly inside or outside the circle.

        Returns the number of enclosed eigenvalues.
        """
        dist = np.abs(np.asarray(eigs) - self.center)
        if np.any(np.abs(dist - self.radius) < margin):
            raise ContourViolationError(
                f"eigenvalue within {margin:.0e} of contour (center={self.center}, r={self.radius})")
        inside = int(np.sum(dist < self.radius))
        if expected_inside is not None and inside != expected_inside:
            raise ContourViolationError(
                f"contour encloses {inside} eigenvalues, expected {expected_inside}")
        return inside


@dataclass(frozen=True)
class Projector:
    matrix: np.ndarray
    rank: int
    contour: Contour
    nodes_used: int = NODES_START

    @property
    def complement(self):
        return np.eye(self.matrix.shape[0]) - self.matrix


@dataclass(frozen=True)
class KatoGenerator:
    matrix: np.ndarray


def contour_around(eigs, idx) -> Contour:
    """Circle centered on the selected cluster, radius halfway to the rest."""
    eigs = np.asarray(eigs, dtype=float)
    inside = eigs[idx]
    mask = np.ones(eigs.size, dtype=bool)
    mask[idx] = False
    center = float(inside.mean())
    r_in = float(np.max(np.abs(inside - center)))
    if mask.any():
        r_out = float(np.min(np.abs(eigs[mask] - center)))
        if r_out <= r_in:
            raise ContourViolationError("selected cluster is not separable by a circle")
        radius = 0.5 * (r_in + r_out)
    else:
        radius = r_in + 1.0
    return Contour(center, radius)


def contour_for(family, t, alpha, selection: SpectralSelection) -> Contour:
    eigs = np.linalg.eigvalsh(model.evaluate(family, t, alpha))
    return contour_around(eigs, model.select_cluster(eigs, selection))


class ContourTracker:
    """Per-trajectory contour state with hysteresis.

    The circle is kept as long as every eigenvalue stays at least
    ``hysteresis * radius`` away from it; otherwise it is re-centered on the
    tracked cluster.  Not thread-safe by design: one tracker per trajectory.
    """

    def __init__(self, selection: SpectralSelection, hysteresis=HYSTERESIS):
        self.selection = selection
        self.hysteresis = hysteresis
        self.contour = None
        self.ref = selection.e_ref
        self.recenters = 0

    def _ok(self, eigs):
        c = self.contour
        dist = np.abs(eigs - c.center)
        if np.min(np.abs(dist - c.radius)) < self.hysteresis * c.radius:
            return False
        return int(np.sum(dist < c.radius)) == self.selection.k

    def update(self, eigs) -> Contour:
        eigs = np.asarray(eigs, dtype=float)
        if self.contour is None or not self._ok(eigs):
            idx = model.select_cluster(eigs, self.selection, self.ref)
            new = contour_around(eigs, idx)
            if self.contour is not None:
                # winding check: the cluster must not jump across the old center
                old_inside = np.abs(eigs - self.contour.center) < self.contour.radius
                if old_inside.sum() and not np.any(old_inside[idx]):
                    raise ContourViolationError("selected cluster left the tracked contour")
            self.contour = new
            self.recenters += 1
        inside = np.abs(eigs - self.contour.center) < self.contour.radius
        self.ref = float(np.mean(eigs[inside])) if inside.any() else self.ref
        return self.contour

    def run(self, eig_stack):
        cs = [self.update(e) for e in eig_stack]
        return (np.array([c.center for c in cs], dtype=float),
                np.array([c.radius for c in cs], dtype=float))


# ---------------------------------------------------------------------------
# quadrature core


class _Nodes:
    """Resolvents ``(H - z_k)^{-1}`` on a batch of circles."""

    def __init__(self, hs, centers, radii, n):
        theta = 2 * np.pi * (np.arange(n) + 0.5) / n
        e = np.exp(1j * theta)
        z = centers[:, None] + radii[:, None] * e[None, :]
        d = hs.shape[-1]
        shifted = hs[:, None, :, :] - z[:, :, None, None] * np.eye(d)
        self.r = np.linalg.inv(shifted)
        # P ~ sum_k c_k R_k with c_k = -(r e^{i theta_k}) / n
        self.c = -(radii[:, None] * e[None, :]) / n
        self.n = n

    def projector(self):
        return np.einsum("tk,tkab->tab", self.c, self.r)

    def sandwich(self, b):
        """``(1/2 pi i) ∮ R B R dz`` for a stack of ``B``."""
        x = (self.r @ b[:, None]) @ self.r
        return -np.einsum("tk,tkab->tab", self.c, x)

    def double_sandwich(self, b1, b2):
        """``(1/2 pi i) ∮ R B1 R B2 R dz``."""
        x = ((self.r @ b1[:, None]) @ self.r @ b2[:, None]) @ self.r
        return -np.einsum("tk,tkab->tab", self.c, x)


def _converged(compute, hs, centers, radii, tol=QUAD_TOL, n0=NODES_START, n_max=NODES_MAX):
    n = n0
    prev = compute(_Nodes(hs, centers, radii, n))
    while True:
        n *= 2
        if n > n_max:
            raise ConvergenceError(f"contour quadrature not converged at {n_max} nodes")
        cur = compute(_Nodes(hs, centers, radii, n))
        ok = True
        for a, b in zip(prev, cur):
            scale = max(1.0, maxabs(b))
            if maxabs(a - b) > tol * scale:
                ok = False
                break
        if ok:
            return cur, n
        prev = cur


def _check_contours(hs, centers, radii, expected):
    eigs = np.linalg.eigvalsh(hs)
    for e, c, r in zip(eigs, centers, radii):
        Contour(complex(c), float(r)).check(e, expected)


def _chunks(n_t, dim):
    size = max(1, CHUNK_ELEMENTS // (2 * NODES_START * dim * dim))
    for i in range(0, n_t, size):
        yield slice(i, min(n_t, i + size))


def projector_batch(family, ts, alpha, centers, radii, rank=None, tol=QUAD_TOL):
    """Stacked projectors at times ``ts``; returns ``(P, nodes_used)``."""
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    hs = model.evaluate(family, ts, alpha)
    _check_contours(hs, centers, radii, rank)
    out = np.empty_like(hs)
    used = NODES_START
    for sl in _chunks(ts.size, family.dim):
        (p,), n = _converged(lambda nd: (nd.projector(),), hs[sl], centers[sl], radii[sl], tol)
        out[sl] = p
        used = max(used, n)
    return out, used


def kato_batch(family, ts, alpha, centers, radii, rank, epsilon=None, tol=QUAD_TOL,
               with_alpha=False):
    """Projector, its t-derivative and Kato's generator on a batch of times.

    With ``epsilon`` the second-order objects are added: ``P1`` (projector of
    ``H - eps K``), ``K1 = i[dP1/dt, P1]`` and ``C = D1(K) - K`` where ``D1``
    keeps the block-diagonal part relative to ``P1``.  ``with_alpha`` adds
    ``dP/dalpha``.
    """
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    hs = model.evaluate(family, ts, alpha)
    hts = model.derivative_t(family, ts, alpha)
    _check_contours(hs, centers, radii, rank)
    need_second = epsilon is not None
    if need_second:
        htts = model.second_derivative_t(family, ts, alpha)
    if with_alpha:
        has = model.derivative_alpha(family, ts, alpha)
    names = ["P", "Pdot", "K"] + (["Pa"] if with_alpha else [])
    if need_second:
        names += ["P1", "Pdot1", "K1", "C", "Pddot"]
    out = {k: np.empty_like(hs) for k in names}
    used = NODES_START
    eye = np.eye(family.dim)
    for sl in _chunks(ts.size, family.dim):
        h, ht = hs[sl], hts[sl]

        def first(nd):
            res = [nd.projector(), nd.sandwich(ht)]
            if with_alpha:
                res.append(nd.sandwich(has[sl]))
            if need_second:
                res.append(nd.sandwich(htts[sl]) - 2 * nd.double_sandwich(ht, ht))
            return tuple(res)

        res, n = _converged(first, h, centers[sl], radii[sl], tol)
        used = max(used, n)
        p, pd = res[0], res[1]
        k = 1j * (pd @ p - p @ pd)
        out["P"][sl], out["Pdot"][sl], out["K"][sl] = p, pd, k
        if with_alpha:
            out["Pa"][sl] = res[2]
        if need_second:
            pdd = res[-1]
            kd = 1j * (pdd @ p - p @ pdd)
            h1 = h - epsilon * k
            h1t = ht - epsilon * kd
            try:
                _check_contours(h1, centers[sl], radii[sl], rank)
            except ContourViolationError as exc:
                raise ContourViolationError(
                    f"epsilon={epsilon} closes the gap of H - eps K: {exc}") from exc
            (p1, pd1), n1 = _converged(lambda nd: (nd.projector(), nd.sandwich(h1t)),
                                       h1, centers[sl], radii[sl], tol)
            used = max(used, n1)
            q1 = eye - p1
            out["P1"][sl], out["Pdot1"][sl] = p1, pd1
            out["K1"][sl] = 1j * (pd1 @ p1 - p1 @ pd1)
            out["C"][sl] = p1 @ k @ p1 + q1 @ k @ q1 - k
            out["Pddot"][sl] = pdd
    out["nodes_used"] = used
    return out


def algebra_residuals(family, ts, alpha, selection, tol=QUAD_TOL):
    """Max over ``ts`` of the projector identities that hold exactly.

    Keys: ``idempotency`` (``P^2 - P``), ``pdotp`` (``P dP/dt P``), ``pkp``
    (``P K P``) and ``prkp`` (``P X P`` with ``X`` the resolvent sandwich of ``K``).
    """
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    centers, radii = contours_along(family, ts, alpha, selection)
    data = kato_batch(family, ts, alpha, centers, radii, selection.k, tol=tol)
    p, pd, k = data["P"], data["Pdot"], data["K"]
    hs = model.evaluate(family, ts, alpha)
    x = np.empty_like(k)
    for sl in _chunks(ts.size, family.dim):
        (val,), _ = _converged(lambda nd: (nd.sandwich(k[sl]),), hs[sl], centers[sl],
                               radii[sl], tol)
        x[sl] = val
    return {"idempotency": maxabs(p @ p - p), "pdotp": maxabs(p @ pd @ p),
            "pkp": maxabs(p @ k @ p), "prkp": maxabs(p @ x @ p)}


def contours_along(family, ts, alpha, selection, tracker=None):
    """Tracked contours (centers, radii) along ``ts`` for a fixed ``alpha``."""
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    eigs = np.linalg.eigvalsh(model.evaluate(family, ts, alpha))
    tracker = tracker or ContourTracker(selection)
    return tracker.run(eigs)


# ---------------------------------------------------------------------------
# scalar operations


def _resolve_contour(family, t, alpha, contour, selection):
    if contour is None:
        if selection is None:
            raise ValueError("pass a contour or a spectral selection")
        contour = contour_for(family, t, alpha, selection)
    return contour


def _expected_rank(family, t, alpha, contour):
    eigs = np.linalg.eigvalsh(model.evaluate(family, t, alpha))
    return contour.check(eigs)


def _scalar(fn, family, t, alpha, contour):
    c = np.array([contour.center.real], dtype=float)
    r = np.array([contour.radius], dtype=float)
    return fn(np.array([t], dtype=float), c, r)


def riesz_projector(family: HamiltonianFamily, t, alpha, contour: Contour = None,
                    selection: SpectralSelection = None) -> Projector:
    """Spectral projector ``-(1/2 pi i) ∮ (H - z)^{-1} dz`` around ``contour``."""
    contour = _resolve_contour(family, t, alpha, contour, selection)
    inside = _expected_rank(family, t, alpha, contour)
    p, used = _scalar(lambda ts, c, r: projector_batch(family, ts, alpha, c, r, inside),
                      family, t, alpha, contour)
    p = p[0]
    rank = int(round(np.trace(p).real))
    if rank != inside:
        raise ContourViolationError(f"trace(P) = {np.trace(p).real:.6f} but {inside} eigenvalues enclosed")
    return Projector(p, rank, contour, used)


def reduced_resolvent_map(family: HamiltonianFamily, t, alpha, contour: Contour, b,
                          tol=QUAD_TOL):
    """``(1/2 i pi) ∮ (H - z)^{-1} B (H - z)^{-1} dz``."""
    contour = _resolve_contour(family, t, alpha, contour, None)
    _expected_rank(family, t, alpha, contour)
    b = np.asarray(b, dtype=complex)
    if b.shape != (family.dim, family.dim):
        raise ShapeError("B has the wrong shape")
    h = model.evaluate(family, t, alpha)[None]
    (val,), _ = _converged(lambda nd: (nd.sandwich(b[None]),), h,
                           np.array([contour.center.real]), np.array([contour.radius]), tol)
    return val[0]


def projector_derivative(family: HamiltonianFamily, t, alpha, contour: Contour = None,
                         which="t", selection: SpectralSelection = None):
    """``dP/dt`` or ``dP/dalpha`` from the contour formula with the analytic ``dH``."""
    contour = _resolve_contour(family, t, alpha, contour, selection)
    if which == "t":
        dh = model.derivative_t(family, t, alpha)
    elif which == "alpha":
        dh = model.derivative_alpha(family, t, alpha)
    else:
        raise ValueError("which must be 't' or 'alpha'")
    return reduced_resolvent_map(family, t, alpha, contour, dh)


def kato_generator(family: HamiltonianFamily, t, alpha, contour: Contour = None,
                   selection: SpectralSelection = None) -> KatoGenerator:
    contour = _resolve_contour(family, t, alpha, contour, selection)
    p = riesz_projector(family, t, alpha, contour).matrix
    pd = projector_derivative(family, t, alpha, contour, "t")
    return KatoGenerator(1j * (pd @ p - p @ pd))


def superadiabatic_projector(family: HamiltonianFamily, t, alpha, epsilon,
                             contour: Contour = None,
                             selection: SpectralSelection = None) -> Projector:
    """Projector of ``H - eps K`` computed on the same contour as ``P``."""
    contour = _resolve_contour(family, t, alpha, contour, selection)
    rank = _expected_rank(family, t, alpha, contour)
    k = kato_generator(family, t, alpha, contour).matrix
    h1 = model.evaluate(family, t, alpha) - epsilon * k
    try:
        contour.check(np.linalg.eigvalsh(h1), rank)
    except ContourViolationError as exc:
        raise ContourViolationError(f"epsilon={epsilon} closes the gap: {exc}") from exc
    (p1,), used = _converged(lambda nd: (nd.projector(),), h1[None],
                             np.array([contour.center.real]), np.array([contour.radius]))
    return Projector(p1[0], rank, contour, used)


def superadiabatic_generator(family, t, alpha, epsilon, contour: Contour = None,
                             selection: SpectralSelection = None):
    """``K1 = i[dP1/dt, P1]`` at a single time."""
    contour = _resolve_contour(family, t, alpha, contour, selection)
    rank = _expected_rank(family, t, alpha, contour)
    out = kato_batch(family, np.array([t]), alpha, np.array([contour.center.real]),
                     np.array([contour.radius]), rank, epsilon=epsilon)
    return out["K1"][0]


def block_diagonal_part(p1, b):
    """``P1 B P1 + (1 - P1) B (1 - P1)``."""
    p = p1.matrix if isinstance(p1, Projector) else np.asarray(p1)
    b = np.asarray(b)
    if p.shape != b.shape:
        raise ShapeError("projector and operator shapes differ")
    q = np.eye(p.shape[0]) - p
    return p @ b @ p + q @ b @ q


def eigen_projector(h, idx):
    """Sum of eigenvector outer products for the selected (sorted) eigen-indices."""
    w, v = np.linalg.eigh(h)
    vs = v[:, idx]
    return vs @ vs.conj().T


def dump_projector_csv(path, family, ts, alpha, selection):
    """Write ``t, rank, idempotency_residual, gap`` for a projector trajectory."""
    ts = np.asarray(ts, dtype=float)
    centers, radii = contours_along(family, ts, alpha, selection)
    ps, _ = projector_batch(family, ts, alpha, centers, radii, selection.k)
    hs = model.evaluate(family, ts, alpha)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "rank", "idempotency_residual", "gap"])
        for t, p, h in zip(ts, ps, hs):
            eigs = np.linalg.eigvalsh(h)
            gap = model.cluster_geometry(eigs, model.select_cluster(eigs, selection))[2]
            w.writerow([repr(float(t)), int(round(np.trace(p).real)),
                        repr(maxabs(p @ p - p)), repr(float(gap))])


__all__ = [
    "algebra_residuals",
    "Contour", "Projector", "KatoGenerator", "ContourTracker", "contour_around",
    "contour_for", "contours_along", "projector_batch", "kato_batch", "riesz_projector",
    "projector_derivative", "kato_generator", "reduced_resolvent_map",
    "superadiabatic_projector", "superadiabatic_generator", "block_diagonal_part",
    "eigen_projector", "dump_projector_csv", "dagger",
]

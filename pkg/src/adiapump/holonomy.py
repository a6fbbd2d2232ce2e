"""Geometric phases, non-abelian holonomy and leading-order pumped charge.

Conventions: a frame is a stack ``F(t)`` of shape ``(n_t, dim, N)`` whose
columns span the selected eigenspace.  Its connection is
``Gamma_sr(t) = -<psi_s(t)|d psi_r(t)/dt>`` and the holonomy solves
``dB/dt = Gamma B``, ``B(0) = I``; then ``F(t) B(t) = W(t) F(0)``.
All alpha-derivatives of derived objects are central differences with
step ``delta`` and a Richardson check at ``delta/2``, ``delta/4``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import simpson
from scipy.interpolate import CubicSpline

from . import evolve, model, spectral
from .errors import (DegeneracyError, FrameError, PeriodicityError, PreconditionError,
                     StructureError)
from .model import HamiltonianFamily, SpectralSelection
from .numerics import (_CENTRAL1, dagger, grid_derivative, lowdin, maxabs,
                       uniform_grid)

DELTA_ALPHA = evolve.DELTA_ALPHA
TOL_PERIODIC = 1e-8
TOL_FRAME = 1e-8
TOL_SPAN = 1e-7
TOL_PARALLEL = 1e-6
RICHARDSON_MIN_RATIO = evolve.RICHARDSON_MIN_RATIO


@dataclass(frozen=True)
class BerryPhase:
    """``beta`` in (-pi, pi] with ``phi(1) = exp(-i beta) phi(0)``."""

    beta: float
    eigen_index: float
    overlap: complex
    beta_quadrature: float = float("nan")
    parallel_residual: float = float("nan")

    @property
    def agreement(self) -> float:
        """Modulus-one distance between the overlap and quadrature phases."""
        return float(abs(np.exp(-1j * self.beta) - np.exp(-1j * self.beta_quadrature)))


@dataclass(frozen=True)
class HolonomyMatrix:
    B: np.ndarray
    basis: np.ndarray
    generator_trace: np.ndarray
    t_grid: np.ndarray
    trajectory: np.ndarray = field(repr=False, default=None)
    w_consistency: float = float("nan")
    substeps: int = 1

    def unitarity_residual(self) -> float:
        return maxabs(dagger(self.B) @ self.B - np.eye(self.B.shape[0]))


def _cplx(a):
    a = np.asarray(a, dtype=complex)
    return {"re": a.real.tolist(), "im": a.imag.tolist()}


@dataclass(frozen=True)
class ChargeReport:
    """Exact charge block versus its leading-order prediction.

    ``residual = max |exact - dynamical I - geometric|`` over the block.
    """

    exact_elements: np.ndarray
    dynamical_term: float
    geometric_term: np.ndarray
    residual: float
    epsilon: float
    alpha: float = float("nan")
    case: str = "leading_order"
    diagnostics: dict = field(default_factory=dict, compare=False)

    def to_dict(self):
        out = {
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "case": self.case,
            "dynamical_term": self.dynamical_term,
            "geometric_term": _cplx(self.geometric_term),
            "exact": _cplx(self.exact_elements),
            "residual": self.residual,
        }
        out["diagnostics"] = {k: v for k, v in self.diagnostics.items()
                              if isinstance(v, (int, float, str, bool))}
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


# ---------------------------------------------------------------------------
# eigenvalue structure


def isolated_eigenvalue(family: HamiltonianFamily, alpha, t, P, tol_warn=1e-8, tol_err=1e-6):
    """``E = tr(H P) / rank P`` and the residual ``max |H P - E P|``."""
    p = P.matrix if isinstance(P, spectral.Projector) else np.asarray(P)
    h = model.evaluate(family, t, alpha)
    rank = int(round(np.trace(p).real))
    if rank < 1:
        raise StructureError("projector has rank zero")
    e = float(np.trace(h @ p).real / rank)
    resid = maxabs(h @ p - e * p)
    if resid > tol_err:
        raise StructureError(f"selected part is not a single eigenvalue (residual {resid:.2e})")
    return e, resid


def cluster_mean_eigenvalues(family, ts, alpha, selection: SpectralSelection):
    """Mean of the tracked cluster eigenvalues at each time."""
    eigs = np.linalg.eigvalsh(model.evaluate(family, np.asarray(ts, dtype=float), alpha))
    picks = model.track_clusters(eigs, selection)
    return np.array([e[i].mean() for e, i in zip(eigs, picks)])


def _richardson(fn, alpha, delta):
    """Central (or one-sided at the ends) derivative with a Richardson check."""
    def d(step):
        if alpha - step >= 0 and alpha + step <= 1:
            return (fn(alpha + step) - fn(alpha - step)) / (2 * step)
        if alpha + 2 * step <= 1:
            return (-3 * fn(alpha) + 4 * fn(alpha + step) - fn(alpha + 2 * step)) / (2 * step)
        return (3 * fn(alpha) - 4 * fn(alpha - step) + fn(alpha - 2 * step)) / (2 * step)

    d1, d2, d4 = d(delta), d(delta / 2), d(delta / 4)
    c1, c2 = maxabs(d1 - d2), maxabs(d2 - d4)
    floor = 1e-12 * max(1.0, maxabs(d1)) / (delta / 4)
    ratio = c1 / c2 if c2 > 0 else float("inf")
    ok = bool(ratio >= RICHARDSON_MIN_RATIO or c1 < floor)
    return d1, {"richardson_ratio": ratio, "richardson_ok": ok, "fd_change": c1}


def dynamical_term(family, alpha, epsilon, selection: SpectralSelection, t_grid=None,
                   delta=DELTA_ALPHA):
    """``(1/eps) int_0^1 dE/dalpha ds`` with ``dE/dalpha`` from re-solved eigenvalues."""
    t = evolve._grid(t_grid)
    de, info = _richardson(lambda a: cluster_mean_eigenvalues(family, t, a, selection),
                           alpha, delta)
    return float(simpson(de, x=t) / epsilon), info


# ---------------------------------------------------------------------------
# Berry phase


def _check_periodic(p):
    gap = maxabs(p[-1] - p[0])
    if gap > TOL_PERIODIC:
        raise PeriodicityError(f"P(1) differs from P(0) by {gap:.2e}")


def berry_phase(family: HamiltonianFamily, alpha, W: evolve.UnitaryTrajectory, phi0=None,
                selection: SpectralSelection = None) -> BerryPhase:
    """Phase acquired by the transported eigenvector over one period.

    ``beta = -arg <phi0|W(1) phi0>``; cross-checked by ``-i int <psi|dpsi>`` in
    the smooth periodic gauge ``psi = P phi0 / |P phi0|``.
    """
    slow = W.extras["slow"]
    p = slow.on_output("P")
    if slow.selection.k != 1:
        raise DegeneracyError("Berry phase needs a simple eigenvalue")
    _check_periodic(p)
    if phi0 is None:
        w, v = np.linalg.eigh(p[0])
        phi0 = v[:, -1]
    phi0 = np.asarray(phi0, dtype=complex)
    phi0 = phi0 / np.linalg.norm(phi0)
    if maxabs(p[0] @ phi0 - phi0) > 1e-8:
        raise PreconditionError("phi0 is not in the range of P(0)")
    t = W.t_grid
    h = t[1] - t[0]
    phi = W.matrices @ phi0
    dphi = grid_derivative(phi, h)
    parallel = float(np.max(np.abs(np.einsum("ti,ti->t", phi.conj(), dphi))))
    overlap = complex(np.vdot(phi0, phi[-1]))
    beta = float(-np.angle(overlap))
    psi = p @ phi0
    psi = psi / np.linalg.norm(psi, axis=-1, keepdims=True)
    conn = np.einsum("ti,ti->t", psi.conj(), grid_derivative(psi, h))
    beta_q = float(np.real(-1j * simpson(conn, x=t)))
    beta_q = float(np.angle(np.exp(1j * beta_q)))
    e, _ = isolated_eigenvalue(family, alpha, 0.0, p[0])
    return BerryPhase(beta, e, overlap, beta_q, parallel)


# ---------------------------------------------------------------------------
# holonomy


def _frame_array(frame, t_grid):
    if callable(frame):
        return np.asarray(frame(t_grid), dtype=complex)
    f = np.asarray(frame, dtype=complex)
    if f.shape[0] != t_grid.size:
        raise FrameError("frame and grid lengths differ")
    return f


def connection(frame, t_grid):
    """``Gamma_sr(t) = -<psi_s|dpsi_r/dt>`` on the grid (4th-order differences)."""
    t, h = uniform_grid(t_grid)
    f = _frame_array(frame, t)
    df = grid_derivative(f, h)
    return -dagger(f) @ df


def check_frame(f, projectors=None, tol=TOL_FRAME, tol_span=TOL_SPAN):
    n = f.shape[-1]
    ortho = maxabs(dagger(f) @ f - np.eye(n))
    if ortho > tol:
        raise FrameError(f"frame is not orthonormal (residual {ortho:.2e})")
    if projectors is not None:
        span = maxabs(projectors - f @ dagger(f))
        if span > tol_span:
            raise FrameError(f"frame does not span the projector range (residual {span:.2e})")


def holonomy_B(frame, t_grid, W: evolve.UnitaryTrajectory = None, projectors=None,
               tol_prop=1e-10, max_steps=2**22) -> HolonomyMatrix:
    """Solve ``dB/dt = Gamma B`` for a frame sampled on ``t_grid`` (or a callable frame).

    ``Gamma`` is interpolated by cubic splines between grid nodes and the ODE is
    stepped with the exponential midpoint rule, doubling substeps until the
    trajectory moves by less than ``tol_prop``.  With ``W`` the residual
    ``max |F(t) B(t) - W(t) F(0)|`` is stored as ``w_consistency``.
    """
    t, _ = uniform_grid(t_grid)
    f = _frame_array(frame, t)
    check_frame(f, projectors)
    gam = connection(f, t)
    spline = CubicSpline(t, 1j * gam, axis=0)
    run, change, _ = evolve._converge(spline, t, 1.0, tol_prop, max_steps)
    consistency = float("nan")
    if W is not None:
        if W.t_grid.size != t.size or maxabs(W.t_grid - t) > 0:
            raise FrameError("transport and frame grids differ")
        consistency = maxabs(f @ run.matrices - W.matrices @ f[0])
    return HolonomyMatrix(run.matrices[-1], f[0], gam, t, run.matrices, consistency,
                          run.substeps)


def gauge_gamma(gamma_psi, c, c_dot):
    """Connection in the frame ``chi = psi c^{-1}``: ``c Gamma c^{-1} + c' c^{-1}``
    with ``c = F_chi^dag F_psi``."""
    cinv = np.linalg.inv(c)
    return c @ gamma_psi @ cinv + c_dot @ cinv


def gauge_holonomy(B_psi, c0, c1):
    """Holonomy in the frame ``chi``: ``c(1) B_psi c(0)^{-1}``."""
    return c1 @ B_psi @ np.linalg.inv(c0)


# ---------------------------------------------------------------------------
# frames


def reference_vectors(family, alpha, selection: SpectralSelection, t=0.0):
    """Eigenvectors of the selected cluster at ``(t, alpha)``; a fixed reference
    for projected frames."""
    h = model.evaluate(family, t, alpha)
    w, v = np.linalg.eigh(h)
    idx = model.select_cluster(w, selection)
    return v[:, idx]


def projected_frame(projectors, reference):
    """``lowdin(P(t) R)``: smooth in ``t`` and ``alpha``, periodic when ``P`` is."""
    return lowdin(np.asarray(projectors) @ np.asarray(reference))


def aligned_eigenframe(family, alpha, t_grid, selection: SpectralSelection):
    """Eigenvectors aligned step by step to the previous node (polar factor).

    This discrete transport is smooth but generally not periodic.
    """
    t = np.asarray(t_grid, dtype=float)
    hs = model.evaluate(family, t, alpha)
    w, v = np.linalg.eigh(hs)
    picks = model.track_clusters(w, selection)
    out = np.empty((t.size, family.dim, selection.k), dtype=complex)
    out[0] = v[0][:, picks[0]]
    for j in range(1, t.size):
        cur = v[j][:, picks[j]]
        u, _, vh = np.linalg.svd(dagger(cur) @ out[j - 1])
        out[j] = cur @ (u @ vh)
    return out


# ---------------------------------------------------------------------------
# charge formulas


@dataclass
class _Alpha:
    """Per-alpha transport data shared by the charge formulas."""

    W: evolve.UnitaryTrajectory
    P: np.ndarray


def _transport_at(family, alpha, t, selection, substeps=None, slow_kw=None):
    slow = evolve.slow_objects(family, alpha, t, selection)
    if substeps is None:
        W = evolve.propagate_transport(family, alpha, t, slow=slow)
    else:
        spline = slow.spline("K")
        run, _, _ = evolve._converge(spline, t, 1.0, 0, 0, substeps=substeps)
        W = evolve.UnitaryTrajectory(t, run.matrices, "transport", None,
                                     substeps * (t.size - 1), float(alpha), float("nan"),
                                     {"slow": slow, "substeps": substeps})
    return _Alpha(W, slow.on_output("P"))


def _exact_block(family, alpha, epsilon, t, basis, exact=None):
    if exact is None:
        exact = evolve.charge_time_quadrature(family, alpha, epsilon, t_grid=t)
    q = exact.matrix
    return dagger(basis) @ q @ basis, exact


def _basis_of(p0):
    w, v = np.linalg.eigh(p0)
    return v[:, w > 0.5]


def charge_leading_order(family: HamiltonianFamily, alpha, epsilon,
                         selection: SpectralSelection, t_grid=None, delta=DELTA_ALPHA,
                         basis=None, exact: evolve.ChargeOperatorResult = None) -> ChargeReport:
    """Exact ``P(0) Q(1) P(0)`` against ``(1/eps) int dE/dalpha + i W^{-1} dW/dalpha``.

    Matrix elements are taken in ``basis`` (default: eigenbasis of ``P(0)``).
    ``dW/dalpha`` uses transport runs at ``alpha +- delta`` with the substep
    count of the run at ``alpha``.
    """
    t = evolve._grid(t_grid)
    center = _transport_at(family, alpha, t, selection)
    s = center.W.extras["substeps"]
    basis = _basis_of(center.P[0]) if basis is None else np.asarray(basis, dtype=complex)
    w1 = center.W.matrices[-1]

    def w_at(a):
        if a == alpha:
            return w1
        return _transport_at(family, a, t, selection, substeps=s).W.matrices[-1]

    dW, info = _richardson(w_at, alpha, delta)
    geom_full = 1j * dagger(w1) @ dW
    geom = dagger(basis) @ geom_full @ basis
    dyn, dinfo = dynamical_term(family, alpha, epsilon, selection, t, delta)
    ex, exact = _exact_block(family, alpha, epsilon, t, basis, exact)
    n = basis.shape[1]
    resid = maxabs(ex - dyn * np.eye(n) - geom)
    diag = {"richardson_ok_W": info["richardson_ok"], "richardson_ok_E": dinfo["richardson_ok"],
            "fd_change_W": info["fd_change"], "quadrature_error": exact.quadrature_error_estimate}
    return ChargeReport(ex, dyn, geom, resid, float(epsilon), float(alpha), "leading_order", diag)


def _parallel_frame_final(W, f0):
    return W.matrices[-1] @ f0


def charge_matrix_elements_periodic(family: HamiltonianFamily, alpha, epsilon, case,
                                    selection: SpectralSelection, t_grid=None,
                                    delta=DELTA_ALPHA, frame: Callable = None,
                                    reference=None,
                                    exact: evolve.ChargeOperatorResult = None) -> ChargeReport:
    """Periodic-loop charge formulas, cross-checked against the exact charge.

    ``case``:
    ``"simple"``: ``(1/eps) int dE/dalpha + d beta/dalpha`` (rank one);
    ``"degenerate_parallel"``: ``i <phi_r|d phi_s/dalpha>`` between ``t = 0`` and
    ``t = 1`` with ``phi(t) = W(t) F(0)``;
    ``"degenerate_framed"``: ``i(B^dag A B + B^dag dB/dalpha - A)`` with
    ``A = F(0)^dag dF(0)/dalpha`` and ``B`` the holonomy of the periodic frame.

    ``frame(t_array, alpha)`` returns ``(n_t, dim, N)`` periodic frames; without
    it the projected frame ``lowdin(P R)`` with a fixed ``reference`` is used.
    Matrix elements are taken in the basis ``F(0)``.
    """
    if case not in ("simple", "degenerate_parallel", "degenerate_framed"):
        raise ValueError(f"unknown case {case!r}")
    if not family.periodic_t:
        raise PeriodicityError("charge formulas for closed loops need a t-periodic family")
    t = evolve._grid(t_grid)
    if case == "simple" and selection.k != 1:
        raise DegeneracyError("the simple case needs a rank-one projector")
    if reference is None and frame is None:
        reference = reference_vectors(family, alpha, selection)
    cache = {}

    def data(a):
        if a not in cache:
            s = None if not cache else cache[alpha][0].W.extras["substeps"]
            tr = _transport_at(family, a, t, selection, substeps=s)
            _check_periodic(tr.P)
            f = (np.asarray(frame(t, a), dtype=complex) if frame is not None
                 else projected_frame(tr.P, reference))
            cache[a] = (tr, f)
        return cache[a]

    tr0, f = data(alpha)
    basis = f[0]
    dyn, dinfo = dynamical_term(family, alpha, epsilon, selection, t, delta)
    diag = {"richardson_ok_E": dinfo["richardson_ok"]}
    if case == "simple":
        def beta(a):
            tr, fa = data(a)
            return berry_phase(family, a, tr.W, fa[0, :, 0]).beta

        b0 = beta(alpha)

        def beta_unwrapped(a):
            b = beta(a)
            return b0 + np.angle(np.exp(1j * (b - b0)))

        dbeta, info = _richardson(beta_unwrapped, alpha, delta)
        geom = np.array([[dbeta]], dtype=complex)
        diag["berry_phase"] = b0
    elif case == "degenerate_parallel":
        def boundary(a):
            tr, fa = data(a)
            return np.stack([fa[0], tr.W.matrices[-1] @ fa[0]])

        phi = boundary(alpha)
        dphi, info = _richardson(boundary, alpha, delta)
        geom = 1j * (dagger(phi[1]) @ dphi[1] - dagger(phi[0]) @ dphi[0])
    else:
        def bmat(a):
            return holonomy_B(data(a)[1], t).B

        def f0(a):
            return data(a)[1][0]

        hol = holonomy_B(f, t, W=tr0.W)
        B = hol.B
        dB, info = _richardson(bmat, alpha, delta)
        dF0, info_f = _richardson(f0, alpha, delta)
        A = dagger(basis) @ dF0
        geom = 1j * (dagger(B) @ A @ B + dagger(B) @ dB - A)
        diag["w_consistency"] = hol.w_consistency
        diag["richardson_ok_F"] = info_f["richardson_ok"]
    diag["richardson_ok"] = info["richardson_ok"]
    diag["fd_change"] = info["fd_change"]
    ex, exact = _exact_block(family, alpha, epsilon, t, basis, exact)
    diag["quadrature_error"] = exact.quadrature_error_estimate
    n = basis.shape[1]
    resid = maxabs(ex - dyn * np.eye(n) - geom)
    return ChargeReport(ex, dyn, geom, resid, float(epsilon), float(alpha), case, diag)


# ---------------------------------------------------------------------------
# zero-order identity


def zero_order_identity_residual(family: HamiltonianFamily, alpha, t_grid=None,
                                 selection: SpectralSelection = None, delta=DELTA_ALPHA):
    """``max_t |P (dK/dalpha) P - i P [dP/dt, dP/dalpha] P|``.

    ``dK/dalpha`` uses 4th-order differences in alpha (one-sided near the ends
    of [0, 1]) with the contours tracked at ``alpha``.
    """
    selection = selection or SpectralSelection()
    t = evolve._grid(t_grid)
    centers, radii = spectral.contours_along(family, t, alpha, selection)
    base = spectral.kato_batch(family, t, alpha, centers, radii, selection.k, with_alpha=True)
    offsets, weights = _CENTRAL1
    if alpha - 2 * delta < 0 or alpha + 2 * delta > 1:
        sign = 1.0 if alpha - 2 * delta < 0 else -1.0
        offsets = sign * np.arange(5.0)
        weights = sign * np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0
    dK = 0.0
    for o, w in zip(offsets, weights):
        k = spectral.kato_batch(family, t, alpha + o * delta, centers, radii, selection.k)["K"]
        dK = dK + w * k
    dK = dK / delta
    p, pd, pa = base["P"], base["Pdot"], base["Pa"]
    lhs = p @ dK @ p
    rhs = 1j * p @ (pd @ pa - pa @ pd) @ p
    return float(np.max(np.abs(lhs - rhs)))


__all__ = [
    "BerryPhase", "HolonomyMatrix", "ChargeReport", "isolated_eigenvalue", "berry_phase",
    "connection", "holonomy_B", "gauge_gamma", "gauge_holonomy", "projected_frame",
    "aligned_eigenframe", "reference_vectors", "dynamical_term", "charge_leading_order",
    "charge_matrix_elements_periodic", "zero_order_identity_residual",
    "cluster_mean_eigenvalues",
]

"""Unitary propagators and exact charge operators.

Every propagator uses the exponential midpoint rule
``M_{k+1} = exp(-i h G(t_k + h/2) * scale) M_k`` with Hermitian generators
exponentiated through ``eigh``, so each step is unitary to roundoff.

Stepping is organised around the output grid: each of its intervals is split
into ``s`` equal substeps and all intervals advance together, one substep at a
time, as a batch.  ``s`` doubles until the trajectory on the output grid moves
by less than ``tol_prop``.

Generators built from contour integrals (``K``, ``K1``, ``C``) are slow in
``t``; they are computed on a grid twice as fine as the output grid and
interpolated with cubic splines onto the substep midpoints.  The spline error
is estimated from the half grid and stored with the trajectory.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from . import model, spectral
from .errors import ConvergenceError, DomainError, IntertwiningError, ShapeError
from .model import HamiltonianFamily, SpectralSelection
from .numerics import (dagger, default_grid, expm_hermitian, maxabs, opnorm,
                       simpson_weights, uniform_grid)

TOL_PROP = 1e-7
MAX_STEPS = 2**22
TOL_INTERTWINE = 1e-6
DELTA_ALPHA = 1e-4
RICHARDSON_MIN_RATIO = 3.5
BLOCK_MATRICES = 16384

KINDS = ("exact", "transport", "phase", "superadiabatic_transport", "superadiabatic_phase")


@dataclass(frozen=True)
class UnitaryTrajectory:
    """Unitaries on an output grid with integrator provenance.

    ``integrator_steps`` is the total number of exponential-midpoint steps of
    the accepted run; ``convergence`` is the max-abs change on the output grid
    relative to the run with half as many steps.
    """

    t_grid: np.ndarray
    matrices: np.ndarray
    kind: str
    epsilon: Optional[float]
    integrator_steps: int
    alpha: float = float("nan")
    convergence: float = float("nan")
    extras: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        m = self.matrices
        if m.ndim != 3 or m.shape[0] != len(self.t_grid) or m.shape[1] != m.shape[2]:
            raise ShapeError("matrices must be a (len(t_grid), d, d) stack")

    @property
    def dim(self):
        return self.matrices.shape[-1]

    @property
    def final(self):
        return self.matrices[-1]

    @cached_property
    def _spline(self):
        return CubicSpline(self.t_grid, self.matrices, axis=0)

    def at(self, t):
        """Cubic-spline value between grid nodes (exact at the nodes)."""
        return self._spline(t)

    def unitarity_residuals(self):
        eye = np.eye(self.dim)
        return np.max(np.abs(dagger(self.matrices) @ self.matrices - eye), axis=(-2, -1))

    def unitarity_residual(self) -> float:
        return float(np.max(self.unitarity_residuals()))


@dataclass(frozen=True)
class ChargeOperatorResult:
    matrix: np.ndarray
    method: str
    epsilon: float
    quadrature_error_estimate: float
    alpha: float = float("nan")
    t: float = 1.0
    flags: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.method not in ("time_quadrature", "alpha_derivative"):
            raise ValueError(f"unknown method {self.method!r}")


def tol_cross(epsilon, delta=DELTA_ALPHA, boundary=False):
    """Allowed gap between the two exact charge computations."""
    tol = max(1e-5, 1e-3 / epsilon * delta**2)
    return 10 * tol if boundary else tol


# ---------------------------------------------------------------------------
# stepping core


@dataclass
class _March:
    matrices: np.ndarray
    charge: Optional[np.ndarray]
    substeps: int


def _march(gen, t_grid, substeps, scale, charge_fn=None):
    """One fixed-step pass over the output grid.

    ``gen`` maps a flat array of times to a stack of Hermitian generators.
    ``charge_fn`` (optional) maps times to the operators ``A`` whose conjugates
    ``M^dagger A M`` are integrated with Simpson's rule on the substep nodes;
    the cumulative integral is returned on the output grid.
    """
    starts = t_grid[:-1]
    n_int = starts.size
    h = (t_grid[-1] - t_grid[0]) / n_int / substeps
    d = None
    local = None
    acc = None
    if charge_fn is not None:
        weights = simpson_weights(substeps + 1, h)
        a0 = charge_fn(starts)
        acc = weights[0] * a0
    block = max(1, BLOCK_MATRICES // n_int)
    for m0 in range(0, substeps, block):
        ms = np.arange(m0, min(substeps, m0 + block))
        mids = (starts[None, :] + (ms[:, None] + 0.5) * h).ravel()
        g = gen(mids)
        if d is None:
            d = g.shape[-1]
            local = np.broadcast_to(np.eye(d, dtype=complex), (n_int, d, d)).copy()
        steps = expm_hermitian(g, h * scale).reshape(ms.size, n_int, d, d)
        if charge_fn is not None:
            nodes = (starts[None, :] + (ms[:, None] + 1.0) * h).ravel()
            a = charge_fn(np.minimum(nodes, t_grid[-1])).reshape(ms.size, n_int, d, d)
        for i, m in enumerate(ms):
            local = steps[i] @ local
            if charge_fn is not None:
                acc = acc + weights[m + 1] * (dagger(local) @ a[i] @ local)
    out = np.empty((n_int + 1, d, d), dtype=complex)
    out[0] = np.eye(d)
    for j in range(n_int):
        out[j + 1] = local[j] @ out[j]
    charge = None
    if charge_fn is not None:
        charge = np.empty_like(out)
        charge[0] = 0.0
        for j in range(n_int):
            charge[j + 1] = charge[j] + dagger(out[j]) @ acc[j] @ out[j]
    return _March(out, charge, substeps)


def _converge(gen, t_grid, scale, tol, max_steps, charge_fn=None, substeps=None, s0=None):
    """Double the substep count until the output trajectory is stable.

    Returns ``(march, change, charge_change)``; with ``substeps`` given the
    single run is returned and both changes are ``nan``.
    """
    n_int = t_grid.size - 1
    even = charge_fn is not None
    if substeps is not None:
        if even and substeps % 2:
            raise ValueError("Simpson's rule needs an even number of substeps")
        return _march(gen, t_grid, substeps, scale, charge_fn), float("nan"), float("nan")
    s = s0 or (2 if even else 1)
    prev = _march(gen, t_grid, s, scale, charge_fn)
    change = float("inf")
    while True:
        s *= 2
        if n_int * s > max_steps:
            raise ConvergenceError(
                f"propagation not converged within {max_steps} steps "
                f"(last change {change:.2e}, tolerance {tol:.1e})", residual=change)
        cur = _march(gen, t_grid, s, scale, charge_fn)
        change = maxabs(cur.matrices - prev.matrices)
        if change < tol:
            qchange = float("nan")
            if charge_fn is not None:
                qchange = maxabs(cur.charge - prev.charge)
            return cur, change, qchange
        prev = cur


def _grid(t_grid):
    t = default_grid() if t_grid is None else t_grid
    t, _ = uniform_grid(t)
    if t.size < 5:
        raise ValueError("output grid needs at least 5 points")
    return t


def _check_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha outside [0, 1]: {alpha}")


# ---------------------------------------------------------------------------
# slow objects


class SlowObjects:
    """Contour-integral objects on a refined grid, with spline access.

    The refined grid has twice the resolution of the output grid, so the
    output nodes are its even entries.  ``spline_error`` compares splines
    built from the even nodes against the odd-node values.
    """

    def __init__(self, family, alpha, t_grid, selection, epsilon=None):
        self.alpha = float(alpha)
        self.epsilon = epsilon
        self.selection = selection
        self.t_out = t_grid
        self.t = np.linspace(t_grid[0], t_grid[-1], 2 * t_grid.size - 1)
        self.centers, self.radii = spectral.contours_along(family, self.t, alpha, selection)
        data = spectral.kato_batch(family, self.t, alpha, self.centers, self.radii,
                                   selection.k, epsilon=epsilon)
        self.nodes_used = data.pop("nodes_used")
        self.values = data
        self._splines = {}
        self.spline_error = {}
        for name in ("K", "K1", "C"):
            if name in data:
                coarse = CubicSpline(self.t[::2], data[name][::2], axis=0)
                self.spline_error[name] = maxabs(coarse(self.t[1::2]) - data[name][1::2])

    def on_output(self, name):
        return self.values[name][::2]

    def spline(self, name):
        if name not in self._splines:
            self._splines[name] = CubicSpline(self.t, self.values[name], axis=0)
        return self._splines[name]


def slow_objects(family, alpha, t_grid=None, selection=None, epsilon=None) -> SlowObjects:
    t = _grid(t_grid)
    _check_alpha(alpha)
    return SlowObjects(family, alpha, t, selection or SpectralSelection(), epsilon)


# ---------------------------------------------------------------------------
# propagators


def propagate_exact(family: HamiltonianFamily, alpha, epsilon, t_grid=None,
                    tol_prop=TOL_PROP, max_steps=MAX_STEPS, charge=False,
                    substeps=None) -> UnitaryTrajectory:
    """Solve ``i eps dU/dt = H(t, alpha) U`` with ``U(0) = I``.

    With ``charge=True`` the cumulative integral of ``U^dagger dH/dalpha U``
    (not yet divided by ``eps``) is stored in ``extras["charge_integral"]``
    together with its change under step halving.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    _check_alpha(alpha)
    t = _grid(t_grid)

    def gen(ts):
        return model.evaluate(family, ts, alpha)

    charge_fn = (lambda ts: model.derivative_alpha(family, ts, alpha)) if charge else None
    run, change, qchange = _converge(gen, t, 1.0 / epsilon, tol_prop, max_steps,
                                     charge_fn, substeps)
    extras = {"substeps": run.substeps}
    if charge:
        extras["charge_integral"] = run.charge
        extras["charge_change"] = qchange
    return UnitaryTrajectory(t, run.matrices, "exact", float(epsilon),
                             run.substeps * (t.size - 1), float(alpha), change, extras)


def _intertwining(mats, p, p0):
    return np.max(np.abs(mats @ p0 - p @ mats), axis=(-2, -1))


def propagate_transport(family: HamiltonianFamily, alpha, t_grid=None, superadiabatic=False,
                        epsilon=None, selection: SpectralSelection = None,
                        slow: SlowObjects = None, tol_prop=TOL_PROP,
                        tol_intertwine=TOL_INTERTWINE, max_steps=MAX_STEPS) -> UnitaryTrajectory:
    """Parallel transport ``i dW/dt = K W`` (or ``K1`` for the second-order pair).

    The intertwining residual ``max |W(t) P(0) - P(t) W(t)|`` is stored per node;
    values above ``10 * tol_intertwine`` raise ``IntertwiningError``.
    """
    if superadiabatic and epsilon is None:
        raise ValueError("superadiabatic transport needs epsilon")
    t = _grid(t_grid)
    if slow is None:
        slow = slow_objects(family, alpha, t, selection,
                            epsilon if superadiabatic else None)
    elif superadiabatic and slow.epsilon != epsilon:
        raise ValueError("slow objects were computed for a different epsilon")
    if slow.t_out.size != t.size or maxabs(slow.t_out - t) > 0:
        raise ShapeError("slow objects live on a different grid")
    gen_name, proj_name = ("K1", "P1") if superadiabatic else ("K", "P")
    spline = slow.spline(gen_name)
    run, change, _ = _converge(spline, t, 1.0, tol_prop, max_steps)
    p = slow.on_output(proj_name)
    resid = _intertwining(run.matrices, p, p[0])
    worst = float(np.max(resid))
    if worst > 10 * tol_intertwine:
        raise IntertwiningError(
            f"intertwining residual {worst:.2e} exceeds 10 x {tol_intertwine:.0e}")
    kind = "superadiabatic_transport" if superadiabatic else "transport"
    extras = {"slow": slow, "intertwining_residual": resid,
              "intertwining_ok": worst <= tol_intertwine,
              "spline_error": slow.spline_error[gen_name], "substeps": run.substeps}
    return UnitaryTrajectory(t, run.matrices, kind, epsilon if superadiabatic else None,
                             run.substeps * (t.size - 1), float(alpha), change, extras)


def propagate_phase(family: HamiltonianFamily, alpha, epsilon, W: UnitaryTrajectory,
                    t_grid=None, superadiabatic=False, tol_prop=TOL_PROP,
                    max_steps=MAX_STEPS) -> UnitaryTrajectory:
    """Solve ``i eps dPhi/dt = W^dagger G W Phi`` with ``G = H`` or ``G = H + eps C``.

    ``C = D1(K) - K``, so ``H + eps C = H1 + eps D1(K)`` with ``H1 = H - eps K``.
    The commutator ``max |[Phi(t), P(0)]|`` is stored per node.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    t = W.t_grid if t_grid is None else _grid(t_grid)
    if t.size != W.t_grid.size or maxabs(t - W.t_grid) > 0:
        raise ShapeError("phase and transport grids differ")
    expected = "superadiabatic_transport" if superadiabatic else "transport"
    if W.kind != expected:
        raise ValueError(f"expected a {expected} trajectory, got {W.kind}")
    slow = W.extras["slow"]
    if superadiabatic and slow.epsilon != epsilon:
        raise ValueError("superadiabatic transport was built for a different epsilon")
    c_spline = slow.spline("C") if superadiabatic else None

    def gen(ts):
        g = model.evaluate(family, ts, alpha)
        if c_spline is not None:
            g = g + epsilon * c_spline(ts)
        w = W.at(ts)
        return dagger(w) @ g @ w

    run, change, _ = _converge(gen, t, 1.0 / epsilon, tol_prop, max_steps)
    p0 = slow.on_output("P1" if superadiabatic else "P")[0]
    comm = np.max(np.abs(run.matrices @ p0 - p0 @ run.matrices), axis=(-2, -1))
    kind = "superadiabatic_phase" if superadiabatic else "phase"
    return UnitaryTrajectory(t, run.matrices, kind, float(epsilon),
                             run.substeps * (t.size - 1), float(alpha), change,
                             {"commutator_residual": comm, "substeps": run.substeps})


def _same_grid(*trajs):
    t0 = trajs[0].t_grid
    for tr in trajs[1:]:
        if tr.t_grid.size != t0.size or maxabs(tr.t_grid - t0) > 0:
            raise ShapeError("trajectories live on different grids")


def residual_profile(U: UnitaryTrajectory, W: UnitaryTrajectory, Phi: UnitaryTrajectory):
    """Operator 2-norm of ``U - W Phi`` at every grid node."""
    _same_grid(U, W, Phi)
    return opnorm(U.matrices - W.matrices @ Phi.matrices)


def adiabatic_residual(U: UnitaryTrajectory, W: UnitaryTrajectory,
                       Phi: UnitaryTrajectory) -> float:
    """``max_t ||U(t) - W(t) Phi(t)||_2``."""
    return float(np.max(residual_profile(U, W, Phi)))


def residual_point(family: HamiltonianFamily, alpha, epsilon, selection: SpectralSelection,
                   t_grid=None, W: UnitaryTrajectory = None, tol_prop=TOL_PROP) -> dict:
    """First- and second-order residuals at one ``(alpha, eps)``.

    Keys: ``first_order`` (``max ||U - W Phi||``), ``second_order``
    (``max ||U - W1 Phi1||``), ``closeness`` (``max ||W1 Phi1 - W Phi||``) plus
    unitarity, intertwining and commutator diagnostics.  ``W`` may be passed
    in since it does not depend on ``eps``.
    """
    t = _grid(t_grid)
    if W is None:
        W = propagate_transport(family, alpha, t, selection=selection, tol_prop=tol_prop)
    U = propagate_exact(family, alpha, epsilon, t, tol_prop)
    phi = propagate_phase(family, alpha, epsilon, W, tol_prop=tol_prop)
    W1 = propagate_transport(family, alpha, t, True, epsilon, selection, tol_prop=tol_prop)
    phi1 = propagate_phase(family, alpha, epsilon, W1, superadiabatic=True, tol_prop=tol_prop)
    first = W.matrices @ phi.matrices
    second = W1.matrices @ phi1.matrices
    return {
        "first_order": float(np.max(opnorm(U.matrices - first))),
        "second_order": float(np.max(opnorm(U.matrices - second))),
        "closeness": float(np.max(opnorm(second - first))),
        "unitarity": max(U.unitarity_residual(), W.unitarity_residual(),
                         phi.unitarity_residual()),
        "intertwining": float(np.max(W.extras["intertwining_residual"])),
        "intertwining_1": float(np.max(W1.extras["intertwining_residual"])),
        "commutator": float(np.max(phi.extras["commutator_residual"])),
        "propagation_change": max(U.convergence, phi.convergence, phi1.convergence),
        "substeps_exact": int(U.extras["substeps"]),
    }


# ---------------------------------------------------------------------------
# exact charge


def _node_index(t_grid, t):
    j = int(np.argmin(np.abs(t_grid - t)))
    if abs(t_grid[j] - t) > 1e-12:
        raise ValueError(f"t = {t} is not a node of the output grid")
    return j


def charge_time_quadrature(family: HamiltonianFamily, alpha, epsilon, t=1.0, t_grid=None,
                           tol_prop=TOL_PROP, max_steps=MAX_STEPS,
                           trajectory: UnitaryTrajectory = None) -> ChargeOperatorResult:
    """``Q(t) = (1/eps) int_0^t U^dagger (dH/dalpha) U ds`` by Simpson's rule on the substeps."""
    if trajectory is None or "charge_integral" not in trajectory.extras:
        trajectory = propagate_exact(family, alpha, epsilon, t_grid, tol_prop, max_steps,
                                     charge=True)
    j = _node_index(trajectory.t_grid, t)
    q = trajectory.extras["charge_integral"][j] / epsilon
    err = trajectory.extras["charge_change"] / epsilon
    return ChargeOperatorResult(q, "time_quadrature", float(epsilon), float(err),
                                float(alpha), float(t),
                                {"substeps": trajectory.extras["substeps"],
                                 "hermitian_residual": maxabs(q - dagger(q))})


def _stencil(alpha, delta):
    """Offsets and weights for ``d/dalpha``; one-sided near the ends of [0, 1]."""
    if alpha - delta >= 0.0 and alpha + delta <= 1.0:
        return np.array([-1.0, 1.0]), np.array([-0.5, 0.5]), False
    if alpha + 2 * delta <= 1.0:
        return np.array([0.0, 1.0, 2.0]), np.array([-1.5, 2.0, -0.5]), True
    return np.array([0.0, -1.0, -2.0]), np.array([1.5, -2.0, 0.5]), True


def charge_alpha_derivative(family: HamiltonianFamily, alpha, epsilon, t=1.0, t_grid=None,
                            delta=DELTA_ALPHA, substeps=None, tol_prop=TOL_PROP,
                            max_steps=MAX_STEPS, richardson=True,
                            center: UnitaryTrajectory = None) -> ChargeOperatorResult:
    """``Q(t) = i U^{-1} dU/dalpha`` with ``dU/dalpha`` from finite differences in alpha.

    All stencil propagations share the substep count of the converged run at
    ``alpha`` so their discretization errors largely cancel in the difference.
    With ``richardson`` the derivative is repeated at ``delta/2`` and
    ``delta/4``; the flag ``richardson_ok`` is false when halving ``delta``
    fails to shrink the change by ``RICHARDSON_MIN_RATIO`` while the changes
    are above the roundoff floor.
    """
    _check_alpha(alpha)
    if center is None:
        center = propagate_exact(family, alpha, epsilon, t_grid, tol_prop, max_steps,
                                 substeps=substeps)
    s = center.extras["substeps"]
    t_out = center.t_grid
    j = _node_index(t_out, t)
    u = center.matrices[j]

    def derivative(step):
        offsets, weights, one_sided = _stencil(alpha, step)
        acc = 0.0
        for o, w in zip(offsets, weights):
            if o == 0.0:
                m = u
            else:
                m = propagate_exact(family, alpha + o * step, epsilon, t_out,
                                    substeps=s).matrices[j]
            acc = acc + w * m
        return 1j * dagger(u) @ (acc / step), one_sided

    q, one_sided = derivative(delta)
    flags = {"one_sided": one_sided, "substeps": s, "delta": delta,
             "tol_cross": tol_cross(epsilon, delta, one_sided)}
    err = float("nan")
    if richardson:
        q2, _ = derivative(delta / 2)
        q4, _ = derivative(delta / 4)
        c1, c2 = maxabs(q - q2), maxabs(q2 - q4)
        floor = 1e-12 * max(1.0, maxabs(q)) / (delta / 4) * s**0.5
        ratio = c1 / c2 if c2 > 0 else float("inf")
        flags.update(richardson_ratio=ratio, richardson_floor=floor,
                     richardson_ok=bool(ratio >= RICHARDSON_MIN_RATIO or c1 < floor))
        err = c1
    return ChargeOperatorResult(q, "alpha_derivative", float(epsilon), err,
                                float(alpha), float(t), flags)


# ---------------------------------------------------------------------------
# diagnostics


def dump_trajectory_csv(path, U: UnitaryTrajectory, W: UnitaryTrajectory = None,
                        Phi: UnitaryTrajectory = None, W1: UnitaryTrajectory = None,
                        Phi1: UnitaryTrajectory = None):
    """CSV with unitarity, intertwining and both adiabatic residuals per node."""
    n = U.t_grid.size
    nan = np.full(n, np.nan)
    inter = W.extras["intertwining_residual"] if W is not None else nan
    r1 = residual_profile(U, W, Phi) if W is not None and Phi is not None else nan
    r2 = residual_profile(U, W1, Phi1) if W1 is not None and Phi1 is not None else nan
    unit = U.unitarity_residuals()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "unitarity_residual", "intertwining_residual",
                    "adiabatic_residual_1", "adiabatic_residual_2"])
        for row in zip(U.t_grid, unit, inter, r1, r2):
            w.writerow([repr(float(x)) for x in row])


__all__ = [
    "UnitaryTrajectory", "ChargeOperatorResult", "SlowObjects", "slow_objects",
    "propagate_exact", "propagate_transport", "propagate_phase", "adiabatic_residual",
    "residual_profile", "residual_point", "charge_time_quadrature", "charge_alpha_derivative", "tol_cross",
    "dump_trajectory_csv", "TOL_PROP", "MAX_STEPS",
]

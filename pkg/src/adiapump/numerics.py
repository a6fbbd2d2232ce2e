"""Small dense-matrix helpers: unitary exponentials, prefix products, stencils, fits."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def dagger(a):
    return np.conj(np.swapaxes(a, -1, -2))


def maxabs(a) -> float:
    a = np.asarray(a)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a)))


def opnorm(a):
    """Operator 2-norm (largest singular value); works on stacks."""
    a = np.asarray(a)
    if a.ndim == 2:
        return float(np.linalg.norm(a, 2))
    return np.linalg.svd(a, compute_uv=False)[..., 0]


def hermitian_residual(a) -> float:
    return maxabs(a - dagger(a))


def unitarity_residual(u) -> float:
    u = np.asarray(u)
    eye = np.eye(u.shape[-1])
    return maxabs(dagger(u) @ u - eye)


def expm_hermitian(gen, scale):
    """Return exp(-1j * scale * gen) for Hermitian ``gen`` (stacked allowed).

    The eigendecomposition route keeps every factor unitary to roundoff.
    """
    gen = 0.5 * (gen + dagger(gen))
    w, v = np.linalg.eigh(gen)
    phase = np.exp(-1j * np.asarray(scale)[..., None] * w)
    return (v * phase[..., None, :]) @ dagger(v)


def expm_antihermitian(gen, scale):
    """Return exp(scale * gen) for anti-Hermitian ``gen``."""
    return expm_hermitian(1j * gen, scale)


def prefix_products(mats):
    """Left-ordered running products ``out[k] = mats[k] @ ... @ mats[0]`` along axis -3.

    Hillis-Steele scan: log2(n) rounds of batched matmul instead of an n-step loop.
    """
    out = np.array(mats, copy=True)
    n = out.shape[-3]
    shift = 1
    while shift < n:
        prev = out.copy()
        out[..., shift:, :, :] = prev[..., shift:, :, :] @ prev[..., :-shift, :, :]
        shift *= 2
    return out


# first-derivative stencils, 4th order
_CENTRAL1 = (np.array([-2, -1, 1, 2]), np.array([1.0, -8.0, 8.0, -1.0]) / 12.0)
# one-sided 4-point forward stencil (3rd order), used at the [0, 1] boundary
_FORWARD1 = (np.array([0, 1, 2, 3]), np.array([-11.0, 18.0, -9.0, 2.0]) / 6.0)
_CENTRAL2 = (np.array([-2, -1, 0, 1, 2]), np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0)
_FORWARD2 = (np.array([0, 1, 2, 3, 4, 5]), np.array([45.0, -154.0, 214.0, -156.0, 61.0, -10.0]) / 12.0)


def stencil_derivative(f, x, h, order=1, lo=0.0, hi=1.0):
    """Finite-difference derivative of ``f`` at scalar ``x`` staying inside [lo, hi].

    Central 4th-order stencil in the interior; one-sided stencils when the
    central stencil would leave the interval.
    """
    offsets, weights = (_CENTRAL1 if order == 1 else _CENTRAL2)
    reach = 2 * h
    sign = 1.0
    if x - reach < lo - 1e-15 or x + reach > hi + 1e-15:
        offsets, weights = (_FORWARD1 if order == 1 else _FORWARD2)
        if x + offsets[-1] * h > hi + 1e-15:
            sign = -1.0
    acc = None
    for o, w in zip(offsets, weights):
        if w == 0.0:
            continue
        val = w * np.asarray(f(x + sign * o * h))
        acc = val if acc is None else acc + val
    return acc * (sign ** order) / h**order


def grid_derivative(y, h, axis=0):
    """4th-order first derivative of samples on a uniform grid (one-sided at the ends)."""
    y = np.moveaxis(np.asarray(y), axis, 0)
    n = y.shape[0]
    if n < 5:
        raise ValueError("grid_derivative needs at least 5 samples")
    d = np.empty_like(y)
    d[2:-2] = (y[:-4] - 8 * y[1:-3] + 8 * y[3:-1] - y[4:]) / (12 * h)
    d[0] = (-25 * y[0] + 48 * y[1] - 36 * y[2] + 16 * y[3] - 3 * y[4]) / (12 * h)
    d[1] = (-3 * y[0] - 10 * y[1] + 18 * y[2] - 6 * y[3] + y[4]) / (12 * h)
    d[-1] = (25 * y[-1] - 48 * y[-2] + 36 * y[-3] - 16 * y[-4] + 3 * y[-5]) / (12 * h)
    d[-2] = (3 * y[-1] + 10 * y[-2] - 18 * y[-3] + 6 * y[-4] - y[-5]) / (12 * h)
    return np.moveaxis(d, 0, axis)


def grid_midpoints(y, axis=0):
    """4th-order interpolation of uniform samples onto the interval midpoints."""
    y = np.moveaxis(np.asarray(y), axis, 0)
    n = y.shape[0]
    if n < 4:
        mid = 0.5 * (y[:-1] + y[1:])
        return np.moveaxis(mid, 0, axis)
    mid = np.empty((n - 1,) + y.shape[1:], dtype=y.dtype)
    mid[1:-1] = (-y[:-3] + 9 * y[1:-2] + 9 * y[2:-1] - y[3:]) / 16
    mid[0] = (5 * y[0] + 15 * y[1] - 5 * y[2] + y[3]) / 16
    mid[-1] = (5 * y[-1] + 15 * y[-2] - 5 * y[-3] + y[-4]) / 16
    return np.moveaxis(mid, 0, axis)


def simpson_weights(n, h):
    """Composite Simpson weights for ``n`` samples (``n`` odd)."""
    if n % 2 == 0 or n < 3:
        raise ValueError("Simpson weights need an odd number of samples >= 3")
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * h / 3.0


def uniform_grid(t_grid):
    """Validate a uniform grid starting at 0; return (grid, spacing)."""
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size < 2:
        raise ValueError("time grid must be one-dimensional with at least two points")
    if abs(t[0]) > 1e-14 or t[-1] > 1.0 + 1e-12:
        raise ValueError("time grid must start at 0 and end inside [0, 1]")
    h = (t[-1] - t[0]) / (t.size - 1)
    if np.max(np.abs(np.diff(t) - h)) > 1e-12:
        raise ValueError("time grid must be uniform")
    return t, h


def default_grid(n_points=513, t_end=1.0):
    return np.linspace(0.0, t_end, n_points)


def lowdin(vectors):
    """Symmetric orthonormalization of the columns of ``vectors`` (stacks allowed).

    Smooth in the input, which keeps frames differentiable in parameters.
    """
    s = dagger(vectors) @ vectors
    w, v = np.linalg.eigh(s)
    if np.min(w) < 1e-14:
        raise np.linalg.LinAlgError("columns are linearly dependent")
    inv_sqrt = (v / np.sqrt(w)[..., None, :]) @ dagger(v)
    return vectors @ inv_sqrt


@dataclass(frozen=True)
class SlopeFit:
    """Least-squares line through (log eps, log residual)."""

    slope: float
    intercept: float
    r_squared: float
    points: list = field(default_factory=list)
    min_r_squared: float = 0.98
    at_noise_floor: bool = False

    @property
    def inconclusive(self) -> bool:
        return (self.at_noise_floor or not np.isfinite(self.r_squared)
                or self.r_squared < self.min_r_squared)

    def within(self, target, tol) -> bool:
        return (not self.inconclusive) and abs(self.slope - target) <= tol

    def to_dict(self):
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "inconclusive": self.inconclusive,
            "min_r_squared": self.min_r_squared,
            "at_noise_floor": self.at_noise_floor,
            "points": [list(p) for p in self.points],
        }


def fit_slope(eps, residuals, min_r_squared=0.98, noise_floor=0.0) -> SlopeFit:
    """Fit ``log residual = slope log eps + intercept``.

    Fits with a non-finite log or with every residual at or below
    ``noise_floor`` come back inconclusive.
    """
    r = np.asarray(residuals, dtype=float)
    x = np.log(np.asarray(eps, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(r)
    floor = bool(r.size and np.all(r <= noise_floor))
    if x.size < 2 or not np.all(np.isfinite(y)):
        return SlopeFit(float("nan"), float("nan"), float("nan"),
                        list(zip(x.tolist(), y.tolist())), min_r_squared, floor)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    return SlopeFit(float(slope), float(intercept), r2, list(zip(x.tolist(), y.tolist())),
                    min_r_squared, floor)

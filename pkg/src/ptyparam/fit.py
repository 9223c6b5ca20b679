"""Constrained least-squares retrieval of physical parameters from
reconstructed complex fields.

The reconstruction stage returns a complex object (spectrum); this module
fits low-dimensional analytic models to it:

* a sum of point scatterers to a recovered object spectrum, compared on the
  observable reciprocal-space support;
* an analytic rectangle spectrum to the transform of a recovered real-space
  object.

Both are box-constrained quadratic-cost problems solved with a projected
quasi-Newton method.  Parameters are rescaled to the unit box before the
search so that the stopping criteria treat strengths (1e-3 and below) and
positions (tens of wavelengths) evenhandedly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.optimize import minimize

from .fields import ComplexField, GridSpec, OmegaMask
from .forward_rect import RectParams, rect_spectrum_jacobian, rect_spectrum_model

_ACTIVE_TOL = 1e-9


class NonFiniteCostError(RuntimeError):
    """The cost function returned NaN/Inf during the search; carries ``theta``."""

    def __init__(self, message: str, theta: np.ndarray):
        super().__init__(message)
        self.theta = np.asarray(theta)


class DetectionError(RuntimeError):
    """Initial-guess blob detection found fewer candidates than requested."""


@dataclass(frozen=True)
class BoxBounds:
    """Elementwise box ``lower <= theta <= upper`` (strict: lower < upper)."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float))
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValueError("bounds must be 1-D arrays of equal length")
        if not (np.isfinite(self.lower).all() and np.isfinite(self.upper).all()):
            raise ValueError("bounds must be finite")
        if np.any(self.lower >= self.upper):
            bad = np.nonzero(self.lower >= self.upper)[0]
            raise ValueError(f"lower bound >= upper bound at indices {bad.tolist()}")

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, theta: np.ndarray) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))


@dataclass
class FitResult:
    """Outcome of a box-constrained fit."""

    theta: np.ndarray
    cost: float
    iterations: int
    converged: bool
    active_lower: np.ndarray
    active_upper: np.ndarray
    message: str

    @property
    def active(self) -> np.ndarray:
        """True where the solution sits on either bound (scaled tolerance 1e-9)."""
        return self.active_lower | self.active_upper


_DEFAULT_OPTS = {"maxiter": 2000, "ftol": 1e-12, "gtol": 1e-10, "fd_step": 1e-6}


def box_minimize(fun, theta0: np.ndarray, bounds: BoxBounds, grad=None, opts: dict | None = None) -> FitResult:
    """Minimize ``fun`` over a box with L-BFGS-B on unit-scaled parameters.

    ``fun(theta) -> float``; ``grad(theta) -> ndarray`` is optional (central
    finite differences with step ``fd_step * width`` per parameter are used
    when absent).  ``theta0`` must lie inside the bounds.  Non-finite cost
    values abort the search with :class:`NonFiniteCostError`.
    """
    theta0 = np.asarray(theta0, dtype=float)
    if theta0.shape != bounds.lower.shape:
        raise ValueError(f"theta0 shape {theta0.shape} does not match bounds {bounds.lower.shape}")
    if not bounds.contains(theta0):
        raise ValueError("starting point lies outside the bounds")
    o = dict(_DEFAULT_OPTS)
    o.update(opts or {})
    lower, width = bounds.lower, bounds.width

    def to_theta(u: np.ndarray) -> np.ndarray:
        return lower + u * width

    def f_checked(theta: np.ndarray) -> float:
        value = float(fun(theta))
        if not np.isfinite(value):
            raise NonFiniteCostError(f"cost is {value} at theta={theta}", theta)
        return value

    if grad is not None:

        def fun_and_jac(u: np.ndarray):
            theta = to_theta(u)
            return f_checked(theta), np.asarray(grad(theta), dtype=float) * width

    else:
        h = o["fd_step"]

        def fun_and_jac(u: np.ndarray):
            value = f_checked(to_theta(u))
            g = np.empty_like(u)
            for i in range(u.size):
                up, dn = u.copy(), u.copy()
                up[i] = min(u[i] + h, 1.0)
                dn[i] = max(u[i] - h, 0.0)
                g[i] = (f_checked(to_theta(up)) - f_checked(to_theta(dn))) / (up[i] - dn[i])
            return value, g

    u0 = (theta0 - lower) / width
    res = minimize(
        fun_and_jac,
        u0,
        jac=True,
        method="L-BFGS-B",
        bounds=[(0.0, 1.0)] * u0.size,
        options={"maxiter": o["maxiter"], "ftol": o["ftol"], "gtol": o["gtol"]},
    )
    u = np.clip(res.x, 0.0, 1.0)
    message = res.message if isinstance(res.message, str) else res.message.decode()
    # lower + 1.0 * width can overshoot the upper bound by an ulp; clip so
    # the feasibility contract holds exactly
    theta = np.clip(to_theta(u), bounds.lower, bounds.upper)
    return FitResult(
        theta=theta,
        cost=float(res.fun),
        iterations=int(res.nit),
        converged=bool(res.success),
        active_lower=u < _ACTIVE_TOL,
        active_upper=u > 1.0 - _ACTIVE_TOL,
        message=message,
    )


# --- point-scatterer model ---------------------------------------------------


def make_dipole_objective(spectrum: ComplexField, omega: OmegaMask):
    """Cost/gradient closures comparing a scatterer model with a recovered
    spectrum on the observable support.

    Cost: ``sum_{k in omega} |sum_i alpha_i exp(-i k.r_i) - S(k)|^2`` with
    ``theta = [alpha_1, x_1, y_1, ...]``.  Returns ``(fun, grad)``.
    """
    if spectrum.grid.shape != omega.grid.shape:
        raise ValueError("spectrum and support mask must share a grid")
    kx, ky = omega.grid.mesh()
    kxm = np.broadcast_to(kx, omega.grid.shape)[omega.mask]
    kym = np.broadcast_to(ky, omega.grid.shape)[omega.mask]
    data = spectrum.data[omega.mask]

    def model_terms(theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        n = theta.size // 3
        terms = np.empty((n, data.size), dtype=np.complex128)
        for i in range(n):
            alpha, x, y = theta[3 * i : 3 * i + 3]
            terms[i] = alpha * np.exp(-1j * (kxm * x + kym * y))
        return terms

    def fun(theta: np.ndarray) -> float:
        residual = model_terms(theta).sum(axis=0) - data
        return float(np.sum(np.abs(residual) ** 2))

    def grad(theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        terms = model_terms(theta)
        residual = terms.sum(axis=0) - data
        rbar = np.conj(residual)
        g = np.empty_like(theta)
        for i in range(theta.size // 3):
            alpha = theta[3 * i]
            g[3 * i] = 2.0 * np.sum(np.real(rbar * terms[i])) / alpha
            g[3 * i + 1] = 2.0 * np.sum(np.real(rbar * (-1j * kxm) * terms[i]))
            g[3 * i + 2] = 2.0 * np.sum(np.real(rbar * (-1j * kym) * terms[i]))
        return g

    return fun, grad


def dipole_cost(theta: np.ndarray, spectrum: ComplexField, omega: OmegaMask) -> float:
    """Convenience wrapper evaluating the scatterer-model cost at one point."""
    fun, _ = make_dipole_objective(spectrum, omega)
    return fun(np.asarray(theta, dtype=float))


def _sort_by_x(theta: np.ndarray, *flags: np.ndarray) -> tuple[np.ndarray, ...]:
    # canonical ordering: scatterers sorted by their x coordinate, so that
    # results are comparable across runs regardless of detection order
    n = theta.size // 3
    order = np.argsort([theta[3 * i + 1] for i in range(n)], kind="stable")
    perm = np.concatenate([[3 * i, 3 * i + 1, 3 * i + 2] for i in order]) if n else np.array([], dtype=int)
    return tuple(a[perm] for a in (theta, *flags))


def fit_dipoles(
    spectrum: ComplexField,
    omega: OmegaMask,
    theta0: np.ndarray,
    bounds: BoxBounds,
    opts: dict | None = None,
) -> FitResult:
    """Fit scatterer strengths and positions to a recovered spectrum.

    The returned parameter vector is sorted by scatterer x position.
    """
    theta0 = np.asarray(theta0, dtype=float)
    if theta0.size % 3 != 0 or theta0.size == 0:
        raise ValueError(f"theta0 length must be a positive multiple of 3, got {theta0.size}")
    fun, grad = make_dipole_objective(spectrum, omega)
    result = box_minimize(fun, theta0, bounds, grad=grad, opts=opts)
    result.theta, result.active_lower, result.active_upper = _sort_by_x(
        result.theta, result.active_lower, result.active_upper
    )
    return result


def dipole_initial_guess(
    sum_image: np.ndarray,
    image_grid: GridSpec,
    n: int,
    q_power: float,
    n_views: int,
    threshold: float = 0.1,
    pos_halfwidth_px: float = 2.5,
    strength_factor: float = 4.0,
) -> tuple[np.ndarray, BoxBounds]:
    """Starting point and bounds from the tilt-summed camera image.

    Pixels above ``threshold * max`` are grouped into connected blobs; the
    ``n`` most energetic blobs become scatterer candidates.  Positions start
    at the blob's intensity-weighted centroid, boxed to ``pos_halfwidth_px``
    pixels around its brightest pixel.  Strengths start at
    ``sqrt(E_blob / (n_views * q_power))`` -- ``q_power`` being the per-view
    photon count of a unit-strength scatterer -- boxed by
    ``strength_factor`` either way.

    Raises :class:`DetectionError` when fewer than ``n`` blobs are found.
    """
    sum_image = np.asarray(sum_image, dtype=float)
    if sum_image.shape != image_grid.shape:
        raise ValueError(f"image shape {sum_image.shape} does not match grid {image_grid.shape}")
    if n < 1:
        raise ValueError(f"need at least one scatterer, got n={n}")
    if q_power <= 0.0 or n_views < 1:
        raise ValueError("q_power must be positive and n_views >= 1")
    peak = sum_image.max()
    if peak <= 0.0:
        raise DetectionError("image is empty; nothing to detect")
    labels, n_blobs = ndimage.label(sum_image >= threshold * peak, structure=np.ones((3, 3)))
    if n_blobs < n:
        raise DetectionError(f"found {n_blobs} blobs above threshold, expected at least {n}")
    index = np.arange(1, n_blobs + 1)
    energies = ndimage.sum_labels(sum_image, labels, index)
    keep = index[np.argsort(energies)[::-1][:n]]
    centroids = ndimage.center_of_mass(sum_image, labels, keep)
    brightest = ndimage.maximum_position(sum_image, labels, keep)
    x = image_grid.x_coords()
    y = image_grid.y_coords()

    entries = []
    for (cy, cx), (by, bx), label in zip(centroids, brightest, keep):
        energy = energies[label - 1]
        alpha = np.sqrt(energy / (n_views * q_power))
        # fractional centroid -> physical coordinates by linear interpolation
        cx_phys = np.interp(cx, np.arange(image_grid.nx), x)
        cy_phys = np.interp(cy, np.arange(image_grid.ny), y)
        entries.append((cx_phys, cy_phys, alpha, x[bx], y[by]))
    entries.sort(key=lambda e: e[0])  # canonical order: by x

    theta0 = np.empty(3 * n)
    lower = np.empty(3 * n)
    upper = np.empty(3 * n)
    for i, (cx_phys, cy_phys, alpha, bx_phys, by_phys) in enumerate(entries):
        theta0[3 * i : 3 * i + 3] = (alpha, cx_phys, cy_phys)
        lower[3 * i : 3 * i + 3] = (
            alpha / strength_factor,
            bx_phys - pos_halfwidth_px * image_grid.dx,
            by_phys - pos_halfwidth_px * image_grid.dy,
        )
        upper[3 * i : 3 * i + 3] = (
            alpha * strength_factor,
            bx_phys + pos_halfwidth_px * image_grid.dx,
            by_phys + pos_halfwidth_px * image_grid.dy,
        )
    return theta0, BoxBounds(lower=lower, upper=upper)


# --- rectangle model ---------------------------------------------------------


def make_rect_objective(spectrum: ComplexField, real_grid: GridSpec):
    """Cost/gradient closures comparing the analytic rectangle spectrum with
    the transform of a recovered object (background removed).

    Cost: ``sum_k |S_model(theta, k) - S(k)|^2`` over the full reciprocal
    grid, ``theta`` ordered as :data:`~ptyparam.forward_rect.RECT_THETA_NAMES`.
    """
    expected = (real_grid.ny, real_grid.nx)
    if spectrum.grid.shape != expected:
        raise ValueError(f"spectrum shape {spectrum.grid.shape} does not match real grid {expected}")
    data = spectrum.data

    def fun(theta: np.ndarray) -> float:
        model = rect_spectrum_model(RectParams.from_theta(theta), real_grid).data
        return float(np.sum(np.abs(model - data) ** 2))

    def grad(theta: np.ndarray) -> np.ndarray:
        p = RectParams.from_theta(theta)
        residual = rect_spectrum_model(p, real_grid).data - data
        jac = rect_spectrum_jacobian(p, real_grid)
        return 2.0 * np.real(np.conj(residual)[None, :, :] * jac).sum(axis=(1, 2))

    return fun, grad


def rect_spectrum_cost(theta: np.ndarray, spectrum: ComplexField, real_grid: GridSpec) -> float:
    """Convenience wrapper evaluating the rectangle-model cost at one point."""
    fun, _ = make_rect_objective(spectrum, real_grid)
    return fun(np.asarray(theta, dtype=float))


def fit_rect(
    spectrum: ComplexField,
    real_grid: GridSpec,
    theta0: np.ndarray,
    bounds: BoxBounds,
    opts: dict | None = None,
) -> FitResult:
    """Fit rectangle parameters to a recovered object spectrum.

    The retrieved phase is reported wrapped to ``[0, 2*pi)``; pass bounds
    for ``phi1`` as a window around the starting guess (the cost is
    2*pi-periodic in it).
    """
    fun, grad = make_rect_objective(spectrum, real_grid)
    result = box_minimize(fun, theta0, bounds, grad=grad, opts=opts)
    result.theta[1] = result.theta[1] % (2.0 * np.pi)
    return result

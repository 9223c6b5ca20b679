"""Iterative phase retrieval: sequential amplitude-projection (PIE) sweeps
and maximum-likelihood refinement under Poisson noise.

Both measurement geometries in this package reduce to the same algebra: a
known multiplicative factor selects a window of an unknown array, a unitary
transform maps the product to the detector, and the camera records the
squared modulus.

* Real-space ptychography: the unknown is the object in real space, the
  factor is the probe, the windows follow the scan, and the transform is a
  forward :func:`~ptyparam.fields.fft2`.
* Tilt-series dark-field imaging: the unknown is the object *spectrum* on an
  extended reciprocal grid, the factor is the pupil ``Q``, each tilt selects
  a window displaced by the (integer-cell) tilt, and the transform is an
  inverse :func:`~ptyparam.fields.ifft2` onto the camera.

:class:`ViewSet` captures that structure once so the update loop, cost and
likelihood refinement are shared.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .fields import ComplexField, GridSpec, OmegaMask, _centered_fft2, _centered_ifft2


class DivergenceError(RuntimeError):
    """Reconstruction cost grew persistently; carries the cost trace for diagnosis."""

    def __init__(self, message: str, trace: np.ndarray):
        super().__init__(message)
        self.trace = np.asarray(trace)


@dataclass(frozen=True)
class ReconConfig:
    """Iteration policy for the projection sweeps.

    ``tol`` stops the loop when the relative change of the sweep cost drops
    below it; ``order`` is ``"raster"`` (views in given order) or
    ``"shuffle"`` (fresh seeded permutation each sweep).

    ``amplitude_offset`` is added to the measured counts before taking the
    square root that forms the modulus targets.  For Poisson counts the
    choice 0.25 makes the target unbiased to first order
    (``E[sqrt(n + 1/4)] = sqrt(I) + O(I**-1.5)``), which removes most of the
    systematic parameter shift that plain ``sqrt(n)`` targets rectify out of
    the noise at finite photon budgets.  Leave at 0 for noise-free data.
    """

    max_iters: int = 500
    beta: float = 1.0
    tol: float = 1e-10
    order: str = "raster"
    seed: int = 0
    amplitude_offset: float = 0.0

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not 0.0 < self.beta <= 2.0:
            raise ValueError(f"update step beta must lie in (0, 2], got {self.beta}")
        if self.order not in ("raster", "shuffle"):
            raise ValueError(f"order must be 'raster' or 'shuffle', got {self.order!r}")
        if self.amplitude_offset < 0.0:
            raise ValueError(f"amplitude_offset must be >= 0, got {self.amplitude_offset}")


@dataclass
class ViewSet:
    """Windowed multiplicative views of an unknown array.

    ``probes[j]`` multiplies the window of the unknown whose top-left corner
    sits at ``origins[j] = (oy, ox)``; ``to_detector`` selects the unitary
    transform mapping the product to the camera (``"fft"`` or ``"ifft"``).
    """

    probes: np.ndarray
    origins: np.ndarray
    obj_shape: tuple[int, int]
    to_detector: str = "fft"
    _pmax_sq: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.probes = np.asarray(self.probes, dtype=np.complex128)
        self.origins = np.asarray(self.origins, dtype=int)
        if self.probes.ndim != 3 or self.origins.shape != (self.probes.shape[0], 2):
            raise ValueError("probes must be (J, my, mx) with matching (J, 2) origins")
        if self.to_detector not in ("fft", "ifft"):
            raise ValueError(f"to_detector must be 'fft' or 'ifft', got {self.to_detector!r}")
        my, mx = self.probes.shape[1:]
        for j, (oy, ox) in enumerate(self.origins):
            if oy < 0 or ox < 0 or oy + my > self.obj_shape[0] or ox + mx > self.obj_shape[1]:
                raise ValueError(f"view {j} window leaves the object array")
        pmax = np.max(np.abs(self.probes) ** 2, axis=(1, 2))
        if np.any(pmax == 0.0):
            raise ValueError("every view needs a probe with nonzero maximum modulus")
        self._pmax_sq = pmax

    @property
    def count(self) -> int:
        return self.probes.shape[0]

    @property
    def view_shape(self) -> tuple[int, int]:
        return self.probes.shape[1:]

    def window(self, obj: np.ndarray, j: int) -> np.ndarray:
        oy, ox = self.origins[j]
        my, mx = self.view_shape
        return obj[oy : oy + my, ox : ox + mx]

    def forward(self, psi: np.ndarray) -> np.ndarray:
        return _centered_fft2(psi) if self.to_detector == "fft" else _centered_ifft2(psi)

    def backward(self, u: np.ndarray) -> np.ndarray:
        return _centered_ifft2(u) if self.to_detector == "fft" else _centered_fft2(u)


@dataclass
class ReconResult:
    """Estimate plus the per-sweep cost trace."""

    estimate: ComplexField
    final_cost: float
    trace: np.ndarray
    sweeps: int
    converged: bool


def modulus_projection(u: np.ndarray, amplitude: np.ndarray, tiny: float = 1e-300) -> np.ndarray:
    """Replace the modulus of ``u`` with ``amplitude``, keeping the phase.

    Idempotent: applying it twice with the same amplitudes equals once.
    Zero samples (no phase available) are mapped to the real amplitude.
    """
    mod = np.abs(u)
    return np.where(mod > tiny, amplitude * u / np.where(mod > tiny, mod, 1.0), amplitude)


def _check_measurements(measurements: np.ndarray, views: ViewSet) -> np.ndarray:
    measurements = np.asarray(measurements, dtype=float)
    if measurements.shape != (views.count,) + views.view_shape:
        raise ValueError(
            f"measurements shape {measurements.shape} does not match views "
            f"({views.count} views of shape {views.view_shape})"
        )
    if np.any(measurements < 0.0) or not np.isfinite(measurements).all():
        raise ValueError("measurements must be finite and nonnegative")
    return measurements


def amplitude_cost(obj: np.ndarray, measurements: np.ndarray, views: ViewSet) -> float:
    """Sum over views and pixels of ``(sqrt(I_meas) - |model|)^2``."""
    measurements = _check_measurements(measurements, views)
    amps = np.sqrt(measurements)
    total = 0.0
    for j in range(views.count):
        u = views.forward(views.probes[j] * views.window(obj, j))
        total += float(np.sum((amps[j] - np.abs(u)) ** 2))
    return total


def pie_sweeps(
    measurements: np.ndarray,
    views: ViewSet,
    cfg: ReconConfig,
    init: np.ndarray,
    support: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Run sequential amplitude-projection sweeps from ``init``.

    Per view: form the exit wave, enforce the measured modulus on the
    detector, and write the scaled difference back through the conjugate
    probe::

        window += beta * conj(P) * (psi' - psi) / max|P|^2

    The trace entry for a sweep is the cost accumulated as the sweep visits
    each view (pre-update residuals).  Raises :class:`DivergenceError` when
    the running cost has grown by more than 10x over the last 20 sweeps.

    Returns ``(estimate, trace, converged)``.
    """
    measurements = _check_measurements(measurements, views)
    amps = np.sqrt(measurements + cfg.amplitude_offset)
    obj = np.array(init, dtype=np.complex128, copy=True)
    if obj.shape != views.obj_shape:
        raise ValueError(f"init shape {obj.shape} does not match object shape {views.obj_shape}")
    if support is not None and support.shape != views.obj_shape:
        raise ValueError("support mask shape does not match object shape")
    rng = np.random.default_rng(cfg.seed)
    trace = []
    converged = False
    for sweep in range(cfg.max_iters):
        order = rng.permutation(views.count) if cfg.order == "shuffle" else range(views.count)
        cost = 0.0
        for j in order:
            win = views.window(obj, j)
            psi = views.probes[j] * win
            u = views.forward(psi)
            cost += float(np.sum((amps[j] - np.abs(u)) ** 2))
            psi_new = views.backward(modulus_projection(u, amps[j]))
            win += cfg.beta * np.conj(views.probes[j]) * (psi_new - psi) / views._pmax_sq[j]
        if support is not None:
            obj *= support
        trace.append(cost)
        if sweep >= 20 and trace[-1] > 10.0 * trace[-21]:
            raise DivergenceError(
                f"cost grew from {trace[-21]:.3e} to {trace[-1]:.3e} over 20 sweeps",
                np.array(trace),
            )
        if sweep >= 1:
            prev, cur = trace[-2], trace[-1]
            if abs(prev - cur) <= cfg.tol * max(prev, 1e-300):
                converged = True
                break
    return obj, np.array(trace), converged


def pie_reconstruct(
    measurements: np.ndarray,
    views: ViewSet,
    grid: GridSpec,
    cfg: ReconConfig | None = None,
    init: np.ndarray | None = None,
) -> ReconResult:
    """Reconstruct a real-space object from scanned far-field intensities.

    Starts from a transparent object (all ones) unless ``init`` is given.
    """
    cfg = cfg or ReconConfig()
    if init is None:
        init = np.ones(views.obj_shape, dtype=np.complex128)
    obj, trace, converged = pie_sweeps(measurements, views, cfg, init)
    return ReconResult(
        estimate=ComplexField(grid, obj),
        final_cost=amplitude_cost(obj, measurements, views),
        trace=trace,
        sweeps=len(trace),
        converged=converged,
    )


def tilt_views(q: ComplexField, cells: np.ndarray, ext_shape: tuple[int, int]) -> ViewSet:
    """Views of an extended object spectrum for a series of integer-cell tilts.

    A tilt of ``(cx, cy)`` cells selects the detector-sized window whose
    center sits at ``-(cx, cy)`` relative to the extended-grid center: the
    detector sees ``Q(k) * O(k - k_j)``, so detector cell ``d`` reads object
    cell ``d - c_j`` (both center-referenced).
    """
    cells = np.atleast_2d(np.asarray(cells, dtype=int))
    det_ny, det_nx = q.grid.shape
    det_cy, det_cx = q.grid.center
    ext_cy, ext_cx = ext_shape[0] // 2, ext_shape[1] // 2
    origins = np.empty((cells.shape[0], 2), dtype=int)
    for j, (cx, cy) in enumerate(cells):
        origins[j] = (ext_cy - det_cy - cy, ext_cx - det_cx - cx)
    probes = np.broadcast_to(q.data, (cells.shape[0],) + q.grid.shape).copy()
    return ViewSet(probes=probes, origins=origins, obj_shape=ext_shape, to_detector="ifft")


def fourier_pty_reconstruct(
    measurements: np.ndarray,
    q: ComplexField,
    cells: np.ndarray,
    omega: OmegaMask,
    cfg: ReconConfig | None = None,
) -> ReconResult:
    """Recover an extended object spectrum from a dark-field tilt series.

    Starts from zero and keeps the estimate supported on the observable
    union ``omega`` (cells no tilt ever illuminates stay exactly zero).
    """
    cfg = cfg or ReconConfig()
    views = tilt_views(q, cells, omega.grid.shape)
    support = omega.mask.astype(float)
    init = np.zeros(omega.grid.shape, dtype=np.complex128)
    obj, trace, converged = pie_sweeps(measurements, views, cfg, init, support=support)
    return ReconResult(
        estimate=ComplexField(omega.grid, obj),
        final_cost=amplitude_cost(obj, measurements, views),
        trace=trace,
        sweeps=len(trace),
        converged=converged,
    )


def anchor_phase(estimate: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Rotate ``estimate`` by the global phase that best aligns it with
    ``reference`` in the least-squares sense.

    The measured intensities are blind to a global phase of the object, so
    reconstructions come back in an arbitrary gauge; this pins it.  The
    optimal rotation is the phase of the field inner product
    ``sum(conj(reference) * estimate)``, which averages the per-sample phase
    noise over the whole field instead of trusting any single sample.
    """
    estimate = np.asarray(estimate)
    reference = np.asarray(reference)
    if estimate.shape != reference.shape:
        raise ValueError("estimate and reference must have the same shape")
    overlap = np.vdot(reference, estimate)
    if overlap == 0.0:
        return estimate.copy()
    return estimate * (np.conj(overlap) / abs(overlap))


def poisson_nll(counts: np.ndarray, intensity: np.ndarray, floor: float = 1e-12) -> float:
    """Negative log-likelihood of Poisson counts given expected intensities.

    ``sum(I - n*log(I) + log(n!))`` with intensities clamped at ``floor`` to
    keep the logarithm finite.  Counts must be nonnegative; non-integer
    values are accepted (useful for expectation-valued checks).
    """
    counts = np.asarray(counts, dtype=float)
    intensity = np.asarray(intensity, dtype=float)
    if counts.shape != intensity.shape:
        raise ValueError(f"count shape {counts.shape} != intensity shape {intensity.shape}")
    if np.any(counts < 0.0) or not np.isfinite(counts).all():
        raise ValueError("counts must be finite and nonnegative")
    if np.any(intensity < 0.0) or not np.isfinite(intensity).all():
        raise ValueError("intensities must be finite and nonnegative")
    clamped = np.maximum(intensity, floor)
    return float(np.sum(clamped - counts * np.log(clamped) + gammaln(counts + 1.0)))


def poisson_nll_total(obj: np.ndarray, counts: np.ndarray, views: ViewSet, floor: float = 1e-12) -> float:
    """Poisson negative log-likelihood of a full view stack for object ``obj``."""
    total = 0.0
    for j in range(views.count):
        u = views.forward(views.probes[j] * views.window(obj, j))
        total += poisson_nll(counts[j], np.abs(u) ** 2, floor=floor)
    return total


def poisson_nll_gradient(
    obj: np.ndarray, counts: np.ndarray, views: ViewSet, floor: float = 1e-12
) -> np.ndarray:
    """Wirtinger gradient d(NLL)/d(conj(obj)) of :func:`poisson_nll_total`.

    For a real function f, the derivative with respect to the real (imag)
    part of a sample is ``2*Re`` (``2*Im``) of the returned gradient.
    """
    grad = np.zeros(views.obj_shape, dtype=np.complex128)
    my, mx = views.view_shape
    for j in range(views.count):
        oy, ox = views.origins[j]
        psi = views.probes[j] * obj[oy : oy + my, ox : ox + mx]
        u = views.forward(psi)
        intensity = np.maximum(np.abs(u) ** 2, floor)
        w = (1.0 - counts[j] / intensity) * u
        grad[oy : oy + my, ox : ox + mx] += np.conj(views.probes[j]) * views.backward(w)
    return grad


def mle_poisson_refine(
    init: np.ndarray,
    counts: np.ndarray,
    views: ViewSet,
    grid: GridSpec,
    cfg: ReconConfig | None = None,
    support: np.ndarray | None = None,
    floor: float = 1e-12,
) -> ReconResult:
    """Descend the Poisson negative log-likelihood from ``init``.

    Backtracking gradient descent; each accepted step does not increase the
    NLL.  The trace holds the NLL after every accepted step (element 0 is
    the starting value).  Intended as a refinement stage after amplitude
    projection, so the default iteration budget is modest.
    """
    cfg = cfg or ReconConfig(max_iters=100)
    counts = _check_measurements(counts, views)
    obj = np.array(init, dtype=np.complex128, copy=True)
    if support is not None:
        obj = obj * support

    nll = poisson_nll_total(obj, counts, views, floor=floor)
    trace = [nll]
    step = 1.0
    converged = False
    for _ in range(cfg.max_iters):
        grad = poisson_nll_gradient(obj, counts, views, floor=floor)
        if support is not None:
            grad *= support
        gnorm_sq = float(np.sum(np.abs(grad) ** 2))
        if gnorm_sq == 0.0:
            converged = True
            break
        accepted = False
        for _ in range(40):
            candidate = obj - step * grad
            cand_nll = poisson_nll_total(candidate, counts, views, floor=floor)
            if cand_nll < nll:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True  # no descent possible at any tried step: stationary
            break
        rel_drop = (nll - cand_nll) / max(abs(nll), 1e-300)
        obj, nll = candidate, cand_nll
        trace.append(nll)
        step *= 1.5
        if rel_drop <= cfg.tol:
            converged = True
            break
    return ReconResult(
        estimate=ComplexField(grid, obj),
        final_cost=nll,
        trace=np.array(trace),
        sweeps=len(trace) - 1,
        converged=converged,
    )

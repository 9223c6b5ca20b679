"""Real-space ptychography of a rectangular phase-and-amplitude object.

The object is a uniform background of transmission 1 containing a single
axis-aligned rectangle of width ``a1`` (x), height ``b1`` (y), center
``(x1, y1)``, amplitude transmission ``A1`` and phase delay ``phi1``:

    O(r) = 1 + C1 * Rect(r),     C1 = A1 * exp(i*phi1) - 1,

where ``Rect`` is the rectangle indicator.  A localized probe ``P`` is
stepped over the object; each view records the far-field intensity
``|fft2(P(r - R_j) * O(r))|^2``.

Because the rectangle edges generally fall between grid lines, synthetic
data is generated from the band-limited object
:func:`band_limited_object` -- the inverse transform of the analytic
spectrum sampled on the grid -- rather than from a rasterized indicator.
The rasterized object (:func:`rasterize_rect`) quantizes the edges to the
cell size, which is orders of magnitude coarser than the precision at
which the edge positions are recoverable from the data.

Lengths are in wavelength units; grid spacings enter the spectrum
normalization so that the model matches ``fft2`` of the corresponding
real-space object.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import ComplexField, GridSpec, fft2, ifft2, reciprocal_grid

RECT_THETA_NAMES: tuple[str, ...] = ("A1", "phi1", "a1", "b1", "x1", "y1")


@dataclass(frozen=True)
class RectParams:
    """Rectangle parameters in the canonical order ``(A1, phi1, a1, b1, x1, y1)``."""

    A1: float
    phi1: float
    a1: float
    b1: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        if not (self.A1 > 0.0 and np.isfinite(self.A1)):
            raise ValueError(f"amplitude transmission must be positive, got {self.A1}")
        if not (self.a1 > 0.0 and self.b1 > 0.0):
            raise ValueError(f"rectangle sides must be positive, got a1={self.a1}, b1={self.b1}")
        if not np.isfinite(self.theta).all():
            raise ValueError("rectangle parameters must be finite")

    @property
    def c1(self) -> complex:
        """Interior contrast ``A1*exp(i*phi1) - 1``."""
        return self.A1 * np.exp(1j * self.phi1) - 1.0

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.A1, self.phi1, self.a1, self.b1, self.x1, self.y1])

    @classmethod
    def from_theta(cls, theta: np.ndarray) -> "RectParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (6,):
            raise ValueError(f"theta must have 6 entries, got shape {theta.shape}")
        return cls(*theta)


def indicator_rect(p: RectParams, g: GridSpec) -> np.ndarray:
    """0/1 rectangle indicator on the grid; cells whose center lies on an edge count as inside."""
    x, y = g.mesh()
    return ((np.abs(x - p.x1) <= p.a1 / 2.0) & (np.abs(y - p.y1) <= p.b1 / 2.0)).astype(float)


def rasterize_rect(p: RectParams, g: GridSpec) -> ComplexField:
    """Nearest-cell rasterization ``1 + C1 * Rect`` of the object.

    The rectangle must lie inside the sampled window.  Edge quantization is
    half a cell, so this is a visualization/initialization aid; synthetic
    data generation uses :func:`band_limited_object`.
    """
    x = g.x_coords()
    y = g.y_coords()
    if p.x1 - p.a1 / 2.0 < x[0] or p.x1 + p.a1 / 2.0 > x[-1] or p.y1 - p.b1 / 2.0 < y[0] or p.y1 + p.b1 / 2.0 > y[-1]:
        raise ValueError("rectangle extends outside the sampled window")
    return ComplexField(g, 1.0 + p.c1 * indicator_rect(p, g))


def _sinc(u: np.ndarray) -> np.ndarray:
    # sin(u)/u with the removable singularity filled in; np.sinc uses the
    # normalized convention sin(pi x)/(pi x).
    return np.sinc(u / np.pi)


def rect_spectrum_model(p: RectParams, g: GridSpec) -> ComplexField:
    """Analytic spectrum of ``O - 1`` on the reciprocal grid of ``g``.

    Normalized to match ``fft2(O - 1)`` for an object sampled on ``g``:

        S(k) = C1*a1*b1 * sinc(a1*kx/2) * sinc(b1*ky/2)
               * exp(-i(kx*x1 + ky*y1)) / (dx*dy*sqrt(nx*ny)).

    In particular ``S(0) = C1*a1*b1/(dx*dy*sqrt(nx*ny))``.
    """
    kg = reciprocal_grid(g)
    kx, ky = kg.mesh()
    norm = g.dx * g.dy * np.sqrt(g.nx * g.ny)
    data = (
        p.c1
        * p.a1
        * p.b1
        * _sinc(p.a1 * kx / 2.0)
        * _sinc(p.b1 * ky / 2.0)
        * np.exp(-1j * (kx * p.x1 + ky * p.y1))
        / norm
    )
    return ComplexField(kg, data)


def rect_spectrum_jacobian(p: RectParams, g: GridSpec) -> np.ndarray:
    """Derivatives of :func:`rect_spectrum_model` with respect to each parameter.

    Returns a complex array of shape ``(6, ny, nx)`` ordered as
    :data:`RECT_THETA_NAMES`.
    """
    kg = reciprocal_grid(g)
    kx, ky = kg.mesh()
    norm = g.dx * g.dy * np.sqrt(g.nx * g.ny)
    sinc_a = _sinc(p.a1 * kx / 2.0)
    sinc_b = _sinc(p.b1 * ky / 2.0)
    phase = np.exp(-1j * (kx * p.x1 + ky * p.y1))
    # the model is c1 * (a1 sinc_a) * (b1 sinc_b) * phase / norm
    model = p.c1 * p.a1 * sinc_a * p.b1 * sinc_b * phase / norm
    jac = np.empty((6,) + kg.shape, dtype=np.complex128)
    base = p.a1 * sinc_a * p.b1 * sinc_b * phase / norm  # model / c1
    jac[0] = np.exp(1j * p.phi1) * base  # d/dA1
    jac[1] = 1j * p.A1 * np.exp(1j * p.phi1) * base  # d/dphi1
    # d/da1 of a1*sinc(a1 kx/2) = cos(a1 kx/2), exact at kx = 0 too
    jac[2] = p.c1 * np.cos(p.a1 * kx / 2.0) * p.b1 * sinc_b * phase / norm
    jac[3] = p.c1 * p.a1 * sinc_a * np.cos(p.b1 * ky / 2.0) * phase / norm
    jac[4] = -1j * kx * model
    jac[5] = -1j * ky * model
    return jac


def band_limited_object(p: RectParams, g: GridSpec) -> ComplexField:
    """Band-limited object ``1 + ifft2(S)``: the grid-sampled object whose
    spectrum agrees exactly with the analytic rectangle spectrum."""
    return ComplexField(g, 1.0 + ifft2(rect_spectrum_model(p, g)).data)


def gaussian_probe(g: GridSpec, r0: float, fwhm: float, center: tuple[float, float] = (0.0, 0.0), scale: float = 1.0) -> ComplexField:
    """Flat-phase Gaussian probe with a hard circular support.

    Amplitude ``scale * exp(-4 ln2 |r - c|^2 / fwhm^2)`` inside
    ``|r - c| <= r0`` and zero outside.  ``fwhm`` is the full width at half
    maximum of the amplitude profile.
    """
    if r0 <= 0.0 or fwhm <= 0.0:
        raise ValueError(f"probe radius and FWHM must be positive, got r0={r0}, fwhm={fwhm}")
    x, y = g.mesh()
    rsq = (x - center[0]) ** 2 + (y - center[1]) ** 2
    amp = scale * np.exp(-4.0 * np.log(2.0) * rsq / fwhm**2)
    amp[rsq > r0**2] = 0.0
    return ComplexField(g, amp.astype(np.complex128))


def probe_photon_count(probe: ComplexField) -> float:
    """Expected photons per view delivered by the probe onto a transparent object."""
    return probe.power()


def exit_wave(probe: ComplexField, obj: ComplexField, shift_cells: tuple[int, int] = (0, 0)) -> ComplexField:
    """Exit wave ``P(r - R) * O(r)`` for an integer-cell probe displacement.

    ``probe`` may live on a smaller grid than ``obj`` (same spacings); the
    result lives on the probe grid, i.e. it is the object window centered at
    the displaced probe position multiplied by the probe.  ``shift_cells``
    is ``(sx, sy)`` in cells.  Raises if the window leaves the object grid.
    """
    if not (np.isclose(probe.grid.dx, obj.grid.dx) and np.isclose(probe.grid.dy, obj.grid.dy)):
        raise ValueError("probe and object grids must share spacings")
    sx, sy = int(shift_cells[0]), int(shift_cells[1])
    oy = obj.grid.center[0] - probe.grid.center[0] + sy
    ox = obj.grid.center[1] - probe.grid.center[1] + sx
    my, mx = probe.grid.shape
    if oy < 0 or ox < 0 or oy + my > obj.grid.ny or ox + mx > obj.grid.nx:
        raise ValueError(f"probe window at shift ({sx}, {sy}) leaves the object grid")
    window = obj.data[oy : oy + my, ox : ox + mx]
    return ComplexField(probe.grid, probe.data * window)


def far_field_intensity(psi: ComplexField) -> np.ndarray:
    """Far-field intensity ``|fft2(psi)|^2`` in photons per detector pixel."""
    return fft2(psi).intensity()


def fresnel_number(diameter: float, wavelength: float, distance: float) -> float:
    """``diameter^2 / (wavelength * distance)``; << 1 justifies the far-field model.

    All three arguments must share the same length unit.
    """
    if diameter <= 0.0 or wavelength <= 0.0 or distance <= 0.0:
        raise ValueError("diameter, wavelength and distance must all be positive")
    return diameter**2 / (wavelength * distance)


@dataclass(frozen=True)
class ScanPlan:
    """Probe positions for a ptychographic scan.

    ``shifts`` is a (J, 2) array of probe-center displacements ``(sx, sy)``
    in length units; ``probe_radius`` is the support radius used to reason
    about overlap between neighbouring views.
    """

    shifts: np.ndarray
    probe_radius: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "shifts", np.atleast_2d(np.asarray(self.shifts, dtype=float)))
        if self.shifts.ndim != 2 or self.shifts.shape[1] != 2 or self.shifts.shape[0] == 0:
            raise ValueError(f"shifts must be a nonempty (J, 2) array, got shape {self.shifts.shape}")
        if self.probe_radius <= 0.0:
            raise ValueError(f"probe radius must be positive, got {self.probe_radius}")

    @property
    def count(self) -> int:
        return self.shifts.shape[0]

    def overlap_ratio(self) -> float:
        """Linear overlap ``1 - d_min / (2*r0)`` between nearest-neighbour views."""
        if self.count < 2:
            return 1.0
        diff = self.shifts[:, None, :] - self.shifts[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=2))
        dmin = dist[~np.eye(self.count, dtype=bool)].min()
        return 1.0 - dmin / (2.0 * self.probe_radius)


def raster_scan_plan(n_per_axis: int, pitch: float, probe_radius: float) -> ScanPlan:
    """Centered square raster scan: ``n x n`` positions spaced by ``pitch``."""
    if n_per_axis < 1 or pitch <= 0.0:
        raise ValueError(f"need n_per_axis >= 1 and positive pitch, got {n_per_axis}, {pitch}")
    offsets = (np.arange(n_per_axis) - (n_per_axis - 1) / 2.0) * pitch
    shifts = [(sx, sy) for sy in offsets for sx in offsets]
    return ScanPlan(shifts=np.array(shifts), probe_radius=probe_radius)


def window_origins(plan: ScanPlan, obj_grid: GridSpec, win_shape: tuple[int, int]) -> np.ndarray:
    """Integer array origins ``(oy, ox)`` of the per-view object windows.

    Each window is the ``win_shape`` block of the object grid nearest to the
    probe position (shift rounded to whole cells).  Raises if any window
    leaves the object grid.
    """
    my, mx = win_shape
    cy, cx = obj_grid.center
    origins = np.empty((plan.count, 2), dtype=int)
    for j, (sx, sy) in enumerate(plan.shifts):
        oy = cy - my // 2 + int(np.rint(sy / obj_grid.dy))
        ox = cx - mx // 2 + int(np.rint(sx / obj_grid.dx))
        if oy < 0 or ox < 0 or oy + my > obj_grid.ny or ox + mx > obj_grid.nx:
            raise ValueError(f"scan view {j} window leaves the object grid")
        origins[j] = (oy, ox)
    return origins


def window_grid(obj_grid: GridSpec, win_n: int) -> GridSpec:
    """Grid of a square ``win_n``-sample view window (same spacings as the object)."""
    return GridSpec(nx=win_n, ny=win_n, dx=obj_grid.dx, dy=obj_grid.dy)


def scan_probes(
    plan: ScanPlan,
    obj_grid: GridSpec,
    win_n: int,
    fwhm: float,
    scale: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-view probe arrays on their windows, honouring fractional shifts.

    The window origin is the rounded probe position; the Gaussian is then
    evaluated at the exact (possibly fractional) probe center in object
    coordinates, so no sub-cell interpolation error enters the simulation.
    Raises if any probe support would be clipped by its window.

    Returns ``(probes, origins)`` with shapes ``(J, win_n, win_n)`` and
    ``(J, 2)``.
    """
    origins = window_origins(plan, obj_grid, (win_n, win_n))
    x_obj = obj_grid.x_coords()
    y_obj = obj_grid.y_coords()
    probes = np.empty((plan.count, win_n, win_n), dtype=np.complex128)
    r0 = plan.probe_radius
    for j, ((sx, sy), (oy, ox)) in enumerate(zip(plan.shifts, origins)):
        xw = x_obj[ox : ox + win_n]
        yw = y_obj[oy : oy + win_n]
        if sx - r0 < xw[0] or sx + r0 > xw[-1] or sy - r0 < yw[0] or sy + r0 > yw[-1]:
            raise ValueError(f"probe support clipped by window for scan view {j}")
        rsq = (xw[None, :] - sx) ** 2 + (yw[:, None] - sy) ** 2
        amp = scale * np.exp(-4.0 * np.log(2.0) * rsq / fwhm**2)
        amp[rsq > r0**2] = 0.0
        probes[j] = amp
    return probes, origins

"""The two reference experiment configurations used by the CLI, the Monte
Carlo campaigns and the validation suite.

Values are expressed in wavelength units internally; the dataclasses also
carry the nominal laboratory quantities (wavelength, camera pixel pitch,
propagation distance) so reports can print physical units.

* :class:`DipoleDarkField`: tilt-series dark-field imaging of two point
  scatterers.  A 200x200 camera with 0.5-wavelength pixels (object
  referred) observes through an NA-0.4 pupil; 36 plane waves at 60 degrees
  incidence provide the dark-field series.  The recoverable spectrum lives
  on a 375x375 extended reciprocal grid sharing the camera's cell size.
* :class:`RectPtycho`: real-space ptychography of one rectangle on a 90x90
  object grid (1-wavelength cells), scanned 5x5 with 7.5-wavelength pitch
  by a Gaussian probe of 15-wavelength support radius and FWHM, recorded
  through 60x60-sample view windows.

Both classes are frozen; ``with_*`` helpers derive variants (photon budget,
second-scatterer strength, rectangle height) without mutating the default.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .fields import ComplexField, GridSpec, OmegaMask, make_omega, reciprocal_grid
from .fit import BoxBounds
from .forward_dipole import (
    Dipole,
    DipoleScene,
    TiltSet,
    dark_field_intensity,
    photon_count_dipole,
    q_factor,
    snap_tilts,
    tilt_cells,
)
from .forward_rect import (
    RectParams,
    ScanPlan,
    band_limited_object,
    far_field_intensity,
    probe_photon_count,
    raster_scan_plan,
    scan_probes,
    window_grid,
)
from .recon import ViewSet, tilt_views


@dataclass(frozen=True)
class DipoleDarkField:
    """Two-scatterer dark-field tilt-series configuration."""

    wavelength_nm: float = 500.0
    na: float = 0.4
    polar_deg: float = 60.0
    n_tilts: int = 36
    det_n: int = 200
    det_dx: float = 0.5  # camera pixel, object referred, in wavelengths
    ext_n: int = 375
    a_in: float = 1.0
    z: float = 0.0
    magnification: float = 20.0  # metadata: physical camera pixel = det_dx * magnification
    # (alpha / wavelength^3, x / wavelength, y / wavelength) per scatterer
    dipoles: tuple[tuple[float, float, float], ...] = (
        (1.000e-3, -16.666, 0.000),
        (0.512e-3, 16.712, 0.176),
    )

    @property
    def k(self) -> float:
        return 2.0 * np.pi

    def camera_grid(self) -> GridSpec:
        """Real-space camera grid (object-referred coordinates)."""
        return GridSpec(nx=self.det_n, ny=self.det_n, dx=self.det_dx, dy=self.det_dx)

    def kgrid(self) -> GridSpec:
        """Detector reciprocal grid; cell size 2*pi/(det_n*det_dx)."""
        return reciprocal_grid(self.camera_grid())

    def ext_kgrid(self) -> GridSpec:
        """Extended reciprocal grid holding the union of all tilted pupils."""
        kg = self.kgrid()
        return GridSpec(nx=self.ext_n, ny=self.ext_n, dx=kg.dx, dy=kg.dy)

    def object_grid(self) -> GridSpec:
        """Real-space grid conjugate to the extended spectrum."""
        return reciprocal_grid(self.ext_kgrid())

    def scene(self) -> DipoleScene:
        return DipoleScene(
            dipoles=tuple(Dipole(*d) for d in self.dipoles),
            a_in=self.a_in,
            z=self.z,
        )

    def tilt_set(self) -> TiltSet:
        return TiltSet(count=self.n_tilts, polar_deg=self.polar_deg, k=self.k)

    def tilts(self) -> np.ndarray:
        """Tilt wavevectors snapped to the reciprocal grid."""
        return snap_tilts(self.tilt_set().nominal(), self.kgrid())

    def cells(self) -> np.ndarray:
        return tilt_cells(self.tilts(), self.kgrid())

    def q(self) -> ComplexField:
        return q_factor(self.kgrid(), self.z, self.a_in, self.na, self.k)

    def omega(self) -> OmegaMask:
        return make_omega(self.tilts(), self.na, self.k, self.ext_kgrid())

    def views(self) -> ViewSet:
        return tilt_views(self.q(), self.cells(), (self.ext_n, self.ext_n))

    def intensities(self, scene: DipoleScene | None = None) -> np.ndarray:
        """Noise-free expected camera images, shape (n_tilts, det_n, det_n)."""
        scene = scene or self.scene()
        q = self.q()
        return np.stack([dark_field_intensity(scene, tilt, q) for tilt in self.tilts()])

    def photon_number(self) -> float:
        """Photons per view scattered by the first scatterer (flux normalization)."""
        return photon_count_dipole(self.scene(), self.q(), i=0)

    def with_photon_number(self, pn: float) -> "DipoleDarkField":
        """Rescale the illumination amplitude so :meth:`photon_number` equals ``pn``."""
        if pn <= 0.0:
            raise ValueError(f"photon number must be positive, got {pn}")
        return replace(self, a_in=self.a_in * np.sqrt(pn / self.photon_number()))

    def with_alpha2_factor(self, factor: float) -> "DipoleDarkField":
        """Scale the strength of the second scatterer (correlation studies)."""
        if len(self.dipoles) < 2:
            raise ValueError("configuration has no second scatterer to scale")
        if factor <= 0.0:
            raise ValueError(f"strength factor must be positive, got {factor}")
        d = [list(t) for t in self.dipoles]
        d[1][0] *= factor
        return replace(self, dipoles=tuple(tuple(t) for t in d))

    def um_per_wavelength(self) -> float:
        return self.wavelength_nm * 1e-3


@dataclass(frozen=True)
class RectPtycho:
    """Single-rectangle real-space ptychography configuration."""

    obj_n: int = 90
    dx: float = 1.0  # wavelengths
    win_n: int = 60
    probe_radius: float = 15.0
    probe_fwhm: float = 15.0
    probe_scale: float = 1.0
    scan_n: int = 5
    scan_pitch: float = 7.5
    params: tuple[float, float, float, float, float, float] = (0.70, 3.14, 11.46, 25.99, 5.71, 1.42)
    # laboratory metadata (reporting only; dynamics are set by the ratios above)
    wavelength_nm: float = 30.0
    det_pixel_um: float = 50.0
    distance_cm: float = 1.88

    # reference initial guess for the fit, matched to the default truth:
    # offsets for transmission/phase/position, ratios for the side lengths
    _GUESS_REF: tuple[float, float, float, float, float, float] = (0.73, 3.17, 11.00, 28.00, 4.00, 3.00)
    _TRUTH_REF: tuple[float, float, float, float, float, float] = (0.70, 3.14, 11.46, 25.99, 5.71, 1.42)

    def obj_grid(self) -> GridSpec:
        return GridSpec(nx=self.obj_n, ny=self.obj_n, dx=self.dx, dy=self.dx)

    def win_grid(self) -> GridSpec:
        return window_grid(self.obj_grid(), self.win_n)

    def rect(self) -> RectParams:
        return RectParams(*self.params)

    def plan(self) -> ScanPlan:
        return raster_scan_plan(self.scan_n, self.scan_pitch, self.probe_radius)

    def probes_and_origins(self) -> tuple[np.ndarray, np.ndarray]:
        return scan_probes(self.plan(), self.obj_grid(), self.win_n, self.probe_fwhm, self.probe_scale)

    def views(self) -> ViewSet:
        probes, origins = self.probes_and_origins()
        return ViewSet(probes=probes, origins=origins, obj_shape=(self.obj_n, self.obj_n), to_detector="fft")

    def object_field(self) -> ComplexField:
        return band_limited_object(self.rect(), self.obj_grid())

    def intensities(self) -> np.ndarray:
        """Noise-free far-field intensities, shape (scan_n^2, win_n, win_n)."""
        views = self.views()
        obj = self.object_field().data
        wg = self.win_grid()
        out = np.empty((views.count, self.win_n, self.win_n))
        for j in range(views.count):
            psi = ComplexField(wg, views.probes[j] * views.window(obj, j))
            out[j] = far_field_intensity(psi)
        return out

    def photon_number(self) -> float:
        """Photons per view carried by the probe (flux normalization)."""
        probes, _ = self.probes_and_origins()
        return probe_photon_count(ComplexField(self.win_grid(), probes[0]))

    def with_photon_number(self, pn: float) -> "RectPtycho":
        if pn <= 0.0:
            raise ValueError(f"photon number must be positive, got {pn}")
        return replace(self, probe_scale=self.probe_scale * np.sqrt(pn / self.photon_number()))

    def with_b1(self, b1: float) -> "RectPtycho":
        """Vary the rectangle height, keeping every other parameter."""
        p = list(self.params)
        p[3] = float(b1)
        return replace(self, params=tuple(p))

    def guess_theta(self) -> np.ndarray:
        """Initial guess mirroring the reference run: fixed offsets for
        transmission, phase and position; fixed ratios for the side lengths
        (so the guess stays meaningful when a side is swept)."""
        truth = np.array(self.params)
        g_ref = np.array(self._GUESS_REF)
        t_ref = np.array(self._TRUTH_REF)
        guess = truth.copy()
        for i in (0, 1, 4, 5):
            guess[i] = truth[i] + (g_ref[i] - t_ref[i])
        for i in (2, 3):
            guess[i] = truth[i] * (g_ref[i] / t_ref[i])
        return guess

    def fit_bounds(self, guess: np.ndarray) -> BoxBounds:
        """Box bounds around an initial guess.

        Transmission is confined to its physical range; the phase window is
        one full period centered on the guess; side lengths may halve or
        double (floored well below a grid cell, where the band-limited
        rendering is still smooth); positions may move by half a probe
        radius.
        """
        guess = np.asarray(guess, dtype=float)
        side_floor = self.dx / 100.0
        lower = np.array(
            [
                0.05,
                guess[1] - np.pi,
                max(guess[2] / 2.0, side_floor),
                max(guess[3] / 2.0, side_floor),
                guess[4] - self.probe_radius / 2.0,
                guess[5] - self.probe_radius / 2.0,
            ]
        )
        upper = np.array(
            [
                1.0,
                guess[1] + np.pi,
                guess[2] * 2.0,
                guess[3] * 2.0,
                guess[4] + self.probe_radius / 2.0,
                guess[5] + self.probe_radius / 2.0,
            ]
        )
        return BoxBounds(lower=lower, upper=upper)


@lru_cache(maxsize=8)
def dipole_reference(pn: float | None = None, alpha2_factor: float = 1.0) -> DipoleDarkField:
    """Cached dark-field configuration, optionally flux-calibrated."""
    cfg = DipoleDarkField()
    if alpha2_factor != 1.0:
        cfg = cfg.with_alpha2_factor(alpha2_factor)
    if pn is not None:
        cfg = cfg.with_photon_number(pn)
    return cfg


@lru_cache(maxsize=8)
def rect_reference(pn: float | None = None, b1: float | None = None) -> RectPtycho:
    """Cached ptychography configuration, optionally flux-calibrated."""
    cfg = RectPtycho()
    if b1 is not None:
        cfg = cfg.with_b1(b1)
    if pn is not None:
        cfg = cfg.with_photon_number(pn)
    return cfg

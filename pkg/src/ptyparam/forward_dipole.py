"""Dark-field imaging of point scatterers under tilted plane-wave illumination.

A small particle at transverse position ``r_i`` with scattering strength
``alpha_i`` radiates a field whose transverse spectrum, within the collection
aperture, factorizes into a fixed pupil factor ``Q`` and a scene-dependent
spectrum ``O``:

* ``Q(k) = A_in * k^2 * exp(i*k_z*|z|) / (8i*pi*k_z)`` inside ``|k| <= k*na``
  and zero outside, with ``k_z = sqrt(k^2 - |k_perp|^2)``.  Dimensionless
  prefactors (permittivity, photon energy) are absorbed into the unit system,
  i.e. set to one.
* ``O(k) = sum_i alpha_i * exp(-i k . r_i)``.

Illuminating with a tilted plane wave of transverse wavevector ``k_j`` shifts
the scene spectrum, giving the detected pupil field
``Psi_j(k) = Q(k) * O(k - k_j)``; the camera records ``|ifft2(Psi_j)|^2`` in
photons per pixel.  Tilts steeper than the aperture (``|k_j| > k*na``) keep
the unscattered beam off the detector, which is what makes the measurement
dark-field.

Lengths are in wavelength units (``k = 2*pi``); strengths ``alpha`` carry
wavelength^3.  All functions evaluate the analytic expressions directly on
the detector reciprocal grid, so tilts are not restricted to integer grid
cells here -- only the reconstruction stage needs that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import ComplexField, GridSpec, disk_mask, ifft2


@dataclass(frozen=True)
class Dipole:
    """Point scatterer: strength ``alpha`` (wavelength^3) at transverse ``(x, y)``."""

    alpha: float
    x: float
    y: float

    def __post_init__(self) -> None:
        if not (self.alpha > 0.0 and np.isfinite(self.alpha)):
            raise ValueError(f"dipole strength must be positive and finite, got {self.alpha}")
        if not np.isfinite([self.x, self.y]).all():
            raise ValueError(f"dipole position must be finite, got ({self.x}, {self.y})")


@dataclass(frozen=True)
class DipoleScene:
    """A collection of dipoles plus illumination amplitude and defocus.

    ``a_in`` is the incident plane-wave amplitude (photons^0.5 per field
    unit), ``z`` the propagation distance between the object plane and the
    plane imaged by the system, in wavelengths (0 = in focus).
    """

    dipoles: tuple[Dipole, ...]
    a_in: float = 1.0
    z: float = 0.0

    def __post_init__(self) -> None:
        # an empty scene is legal: it scatters nothing (all-dark views)
        if not (self.a_in > 0.0 and np.isfinite(self.a_in)):
            raise ValueError(f"illumination amplitude must be positive, got {self.a_in}")

    @property
    def n(self) -> int:
        return len(self.dipoles)

    @property
    def alphas(self) -> np.ndarray:
        return np.array([d.alpha for d in self.dipoles])

    @property
    def positions(self) -> np.ndarray:
        return np.array([[d.x, d.y] for d in self.dipoles])

    @property
    def theta(self) -> np.ndarray:
        """Parameter vector ``[alpha_1, x_1, y_1, alpha_2, x_2, y_2, ...]``."""
        return np.array([v for d in self.dipoles for v in (d.alpha, d.x, d.y)])

    @classmethod
    def from_theta(cls, theta: np.ndarray, a_in: float = 1.0, z: float = 0.0) -> "DipoleScene":
        theta = np.asarray(theta, dtype=float)
        if theta.size % 3 != 0:
            raise ValueError(f"theta length must be a multiple of 3, got {theta.size}")
        dipoles = tuple(Dipole(*theta[3 * i : 3 * i + 3]) for i in range(theta.size // 3))
        return cls(dipoles=dipoles, a_in=a_in, z=z)

    def theta_names(self) -> tuple[str, ...]:
        names = []
        for i in range(1, self.n + 1):
            names += [f"alpha{i}", f"x{i}", f"y{i}"]
        return tuple(names)


@dataclass(frozen=True)
class TiltSet:
    """Equi-azimuthal set of illumination tilts on a cone of fixed polar angle.

    All tilts share the transverse magnitude ``k*sin(polar)``; azimuths are
    ``2*pi*j/count``.  ``polar_deg`` must exceed the aperture half-angle
    ``asin(na)`` for the series to be dark-field.
    """

    count: int
    polar_deg: float
    k: float = 2.0 * np.pi

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError(f"tilt count must be >= 1, got {self.count}")
        if not 0.0 < self.polar_deg < 90.0:
            raise ValueError(f"polar angle must lie in (0, 90) degrees, got {self.polar_deg}")

    @property
    def magnitude(self) -> float:
        """Transverse tilt magnitude ``k*sin(polar)``."""
        return self.k * np.sin(np.radians(self.polar_deg))

    def nominal(self) -> np.ndarray:
        """(count, 2) array of exact tilt wavevectors ``(kx, ky)``."""
        az = 2.0 * np.pi * np.arange(self.count) / self.count
        return self.magnitude * np.column_stack([np.cos(az), np.sin(az)])


def snap_tilts(tilts: np.ndarray, kgrid: GridSpec) -> np.ndarray:
    """Round tilt wavevectors to the nearest reciprocal grid cell of ``kgrid``.

    Reconstruction treats each tilt as an integer translation of the detector
    window over an extended spectrum, which is exact only when the tilt is an
    integer number of cells.  Forward simulation, fitting and Fisher analysis
    all use the same snapped values so that the model generating the data is
    the model being analyzed.
    """
    tilts = np.atleast_2d(np.asarray(tilts, dtype=float))
    step = np.array([kgrid.dx, kgrid.dy])
    return np.rint(tilts / step) * step


def tilt_cells(tilts: np.ndarray, kgrid: GridSpec) -> np.ndarray:
    """Integer cell offsets ``(cx, cy)`` of already-snapped tilts; errors if off-grid."""
    tilts = np.atleast_2d(np.asarray(tilts, dtype=float))
    cells = tilts / np.array([kgrid.dx, kgrid.dy])
    rounded = np.rint(cells)
    if not np.allclose(cells, rounded, atol=1e-9):
        raise ValueError("tilts do not lie on integer grid cells; snap them first")
    return rounded.astype(int)


def q_factor(kgrid: GridSpec, z: float, a_in: float, na: float, k: float) -> ComplexField:
    """Pupil factor ``Q`` on a reciprocal grid; zero outside ``|k| <= k*na``.

    ``Q(k) = a_in * k^2 * exp(i*k_z*|z|) / (8i*pi*k_z)`` with
    ``k_z = sqrt(k^2 - kx^2 - ky^2)``, real-valued everywhere inside the
    aperture because ``na <= 1``.
    """
    if not 0.0 < na <= 1.0:
        raise ValueError(f"numerical aperture must lie in (0, 1], got {na}")
    kx, ky = kgrid.mesh()
    kperp_sq = kx**2 + ky**2
    inside = disk_mask(kx, ky, k * na)
    kz = np.sqrt(np.maximum(k**2 - kperp_sq, 0.0))
    q = np.zeros(kgrid.shape, dtype=np.complex128)
    # 1/(8i*pi) = -i/(8*pi)
    q[inside] = a_in * k**2 * np.exp(1j * kz[inside] * abs(z)) / (8j * np.pi * kz[inside])
    return ComplexField(kgrid, q)


def spectrum_at(scene: DipoleScene, kx: np.ndarray, ky: np.ndarray) -> np.ndarray:
    """Scene spectrum ``O(k) = sum_i alpha_i exp(-i k . r_i)`` at arbitrary points."""
    out = np.zeros(np.broadcast(kx, ky).shape, dtype=np.complex128)
    for d in scene.dipoles:
        out += d.alpha * np.exp(-1j * (kx * d.x + ky * d.y))
    return out


def object_spectrum(scene: DipoleScene, kgrid: GridSpec) -> ComplexField:
    """Scene spectrum sampled on a reciprocal grid."""
    kx, ky = kgrid.mesh()
    return ComplexField(kgrid, spectrum_at(scene, kx, ky))


def pupil_field(scene: DipoleScene, tilt: np.ndarray, q: ComplexField) -> ComplexField:
    """Detected pupil field ``Psi_j(k) = Q(k) * O(k - k_j)`` for one tilt.

    ``q`` is the precomputed pupil factor on the detector reciprocal grid.
    The pupil is kept at the grid origin and the scene spectrum is shifted,
    which leaves every measurable quantity (intensities, Fisher products)
    unchanged relative to shifting the pupil instead.
    """
    tx, ty = float(tilt[0]), float(tilt[1])
    kx, ky = q.grid.mesh()
    return ComplexField(q.grid, q.data * spectrum_at(scene, kx - tx, ky - ty))


def partial_pupil_field(scene: DipoleScene, i: int, tilt: np.ndarray, q: ComplexField) -> ComplexField:
    """Contribution of dipole ``i`` alone to the pupil field of one tilt.

    Summing over all ``i`` reproduces :func:`pupil_field` exactly.
    """
    if not 0 <= i < scene.n:
        raise IndexError(f"dipole index {i} out of range for scene with {scene.n} dipoles")
    sub = DipoleScene(dipoles=(scene.dipoles[i],), a_in=scene.a_in, z=scene.z)
    return pupil_field(sub, tilt, q)


def dark_field_intensity(scene: DipoleScene, tilt: np.ndarray, q: ComplexField) -> np.ndarray:
    """Expected camera image for one tilt, photons per pixel: ``|ifft2(Psi_j)|^2``."""
    return ifft2(pupil_field(scene, tilt, q)).intensity()


def photon_count_dipole(scene: DipoleScene, q: ComplexField, i: int = 0, k: float = 2.0 * np.pi) -> float:
    """Total photons per exposure scattered by dipole ``i`` alone.

    Counts every forward-scattered mode, not only the ones collected by the
    numerical aperture, so the budget is a property of the illumination and
    the scatterer alone.  In the paraxial approximation (``k_z ~ k``) the
    scattered spectral density is flat, ``|a_in alpha_i k / (8 pi)|^2`` per
    mode, and summing it over the forward cone ``|k_perp| < k`` gives the
    closed form

        ``PN = alpha_i^2 a_in^2 k^4 / (64 pi dkx dky)``.

    The exact angular sum diverges logarithmically at grazing incidence
    (``k_z -> 0``), so the paraxial count is the standard regularization.
    It is independent of the tilt and scales as ``a_in^2 alpha_i^2``; fixing
    this number fixes the illumination amplitude.  ``q`` supplies the
    reciprocal cell size over which modes are counted.
    """
    if not 0 <= i < scene.n:
        raise IndexError(f"dipole index {i} out of range for a {scene.n}-dipole scene")
    kgrid = q.grid
    alpha = scene.dipoles[i].alpha
    return alpha**2 * scene.a_in**2 * k**4 / (64.0 * np.pi * kgrid.dx * kgrid.dy)


def sphere_polarisability(eps_r: float, diameter: float) -> float:
    """Quasi-static scattering strength of a small homogeneous sphere.

    ``alpha = (eps_r - 2) / (eps_r + 1) * diameter^3`` -- valid when the
    diameter is much smaller than the wavelength.
    """
    if eps_r == -1.0:
        raise ValueError("relative permittivity -1 is singular in the quasi-static limit")
    return (eps_r - 2.0) / (eps_r + 1.0) * diameter**3

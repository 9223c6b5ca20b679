"""Grid bookkeeping, centered unitary Fourier transforms, and aperture masks.

Conventions used throughout the package:

* Grids are centered.  The origin of a grid with ``n`` samples along an axis
  sits at sample index ``n // 2``, for even and odd ``n`` alike.
* The forward transform uses the kernel ``exp(-i k.r)`` and carries a factor
  ``1/sqrt(n)`` per axis, so it is unitary: Parseval's identity holds exactly
  and :func:`ifft2` is the exact inverse of :func:`fft2`.
* Arrays are indexed ``[iy, ix]`` (row = y, column = x).
* Lengths are expressed in units of the illumination wavelength unless a
  function documents otherwise; reciprocal grids then carry spacings in
  radians per wavelength.

The binary field format ("PTYF", version 1) stores a complex field together
with its grid so that simulation outputs can be piped between CLI stages
without loss: little-endian magic ``PTYF``, u8 version, u32 nx, u32 ny,
f64 dx, f64 dy, then ``nx*ny`` complex128 samples in row-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class InvalidFieldError(ValueError):
    """A field or grid failed validation (shape mismatch, NaN/Inf samples, ...)."""


@dataclass(frozen=True)
class GridSpec:
    """A centered, uniformly sampled 2-D grid.

    Parameters
    ----------
    nx, ny : int
        Number of samples along x (columns) and y (rows).
    dx, dy : float
        Sample spacing along x and y.  Positive.
    """

    nx: int
    ny: int
    dx: float
    dy: float

    def __post_init__(self) -> None:
        if self.nx < 1 or self.ny < 1:
            raise InvalidFieldError(f"grid must have at least one sample per axis, got {self.nx}x{self.ny}")
        if not (self.dx > 0.0 and self.dy > 0.0) or not np.isfinite([self.dx, self.dy]).all():
            raise InvalidFieldError(f"grid spacings must be positive and finite, got dx={self.dx}, dy={self.dy}")

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape ``(ny, nx)`` of fields living on this grid."""
        return (self.ny, self.nx)

    @property
    def center(self) -> tuple[int, int]:
        """Sample index ``(cy, cx)`` of the grid origin."""
        return (self.ny // 2, self.nx // 2)

    @property
    def extent(self) -> tuple[float, float]:
        """Full side lengths ``(nx*dx, ny*dy)`` of the sampled window."""
        return (self.nx * self.dx, self.ny * self.dy)

    def x_coords(self) -> np.ndarray:
        """Sample coordinates along x; ``x[nx//2] == 0``."""
        return (np.arange(self.nx) - self.nx // 2) * self.dx

    def y_coords(self) -> np.ndarray:
        return (np.arange(self.ny) - self.ny // 2) * self.dy

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Broadcastable coordinate arrays ``(x, y)`` with shapes (1, nx) and (ny, 1)."""
        return self.x_coords()[None, :], self.y_coords()[:, None]


def reciprocal_grid(g: GridSpec) -> GridSpec:
    """Reciprocal-space grid matching :func:`fft2` output for fields on ``g``.

    Same sample counts; spacing ``dk = 2*pi / (n * dx)`` per axis.  Applying
    this twice returns the original grid (involution), which is what makes
    ``ifft2(fft2(f))`` land back on the grid of ``f``.
    """
    return GridSpec(
        nx=g.nx,
        ny=g.ny,
        dx=2.0 * np.pi / (g.nx * g.dx),
        dy=2.0 * np.pi / (g.ny * g.dy),
    )


@dataclass
class ComplexField:
    """A complex-valued field sampled on a :class:`GridSpec`.

    ``data`` must have shape ``grid.shape`` and contain only finite samples.
    """

    grid: GridSpec
    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.shape != self.grid.shape:
            raise InvalidFieldError(
                f"field data shape {self.data.shape} does not match grid shape {self.grid.shape}"
            )
        if not np.isfinite(self.data.view(np.float64)).all():
            raise InvalidFieldError("field contains non-finite samples")

    def power(self) -> float:
        """Total power ``sum |f|^2`` over the grid (photon count when |f|^2 is photons/cell)."""
        return float(np.sum(np.abs(self.data) ** 2))

    def intensity(self) -> np.ndarray:
        return np.abs(self.data) ** 2

    def copy(self) -> "ComplexField":
        return ComplexField(self.grid, self.data.copy())


def _centered_fft2(data: np.ndarray) -> np.ndarray:
    # ifftshift moves the centered origin to sample 0, fft2 transforms, and
    # fftshift re-centers the zero-frequency bin at n//2.
    n = data.shape[0] * data.shape[1]
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(data))) / np.sqrt(n)


def _centered_ifft2(data: np.ndarray) -> np.ndarray:
    n = data.shape[0] * data.shape[1]
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(data))) * np.sqrt(n)


def fft2(f: ComplexField) -> ComplexField:
    """Centered unitary forward transform, kernel ``exp(-i k.r)``.

    Sample ``m`` of the output equals
    ``(1/sqrt(nx*ny)) * sum_n f[n] exp(-i k_m . r_n)`` with ``r_n`` and
    ``k_m`` the centered grid coordinates.  The output lives on
    ``reciprocal_grid(f.grid)``.
    """
    return ComplexField(reciprocal_grid(f.grid), _centered_fft2(f.data))


def ifft2(f: ComplexField) -> ComplexField:
    """Centered unitary inverse transform, kernel ``exp(+i k.r)``; exact inverse of :func:`fft2`."""
    return ComplexField(reciprocal_grid(f.grid), _centered_ifft2(f.data))


def disk_mask(kx: np.ndarray, ky: np.ndarray, radius: float) -> np.ndarray:
    """Boolean disk ``kx^2 + ky^2 <= radius^2`` with the boundary included.

    The comparison carries a tiny relative slack so that cells landing
    exactly on the boundary are classified identically no matter how their
    coordinates were computed (for example ``m*dk + c*dk`` versus
    ``(m+c)*dk``, which differ in the last bit).
    """
    return kx**2 + ky**2 <= radius**2 * (1.0 + 1e-12)


@dataclass
class PupilMask:
    """Circular low-pass aperture ``|k| <= k*na`` on a reciprocal grid.

    ``mask`` is boolean with shape ``grid.shape``; the boundary is included.
    """

    grid: GridSpec
    na: float
    k: float
    mask: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if not 0.0 < self.na <= 1.0:
            raise InvalidFieldError(f"numerical aperture must lie in (0, 1], got {self.na}")
        if self.k <= 0.0:
            raise InvalidFieldError(f"wavenumber must be positive, got {self.k}")
        kx, ky = self.grid.mesh()
        self.mask = disk_mask(kx, ky, self.k * self.na)

    @property
    def radius(self) -> float:
        """Aperture radius ``k*na`` in reciprocal units."""
        return self.k * self.na


@dataclass
class OmegaMask:
    """Union of tilt-shifted pupil disks: the reciprocal-space support that a
    tilt series can actually probe.

    A tilt with transverse wavevector ``k_j`` makes object frequencies
    ``|k + k_j| <= k*na`` observable, so the union over all tilts is
    ``mask = any_j (|k + k_j| <= k*na)``.  ``dark_field_violations`` lists
    tilt indices whose pupil disk contains the specular beam (``|k_j| <=
    k*na``); those tilts are not dark-field and the caller may want to
    reject them.
    """

    grid: GridSpec
    tilts: np.ndarray
    na: float
    k: float
    mask: np.ndarray = field(init=False)
    dark_field_violations: list[int] = field(init=False)

    def __post_init__(self) -> None:
        self.tilts = np.atleast_2d(np.asarray(self.tilts, dtype=float))
        if self.tilts.ndim != 2 or self.tilts.shape[1] != 2 or self.tilts.shape[0] == 0:
            raise InvalidFieldError(f"tilts must be a nonempty (J, 2) array, got shape {self.tilts.shape}")
        if not 0.0 < self.na <= 1.0:
            raise InvalidFieldError(f"numerical aperture must lie in (0, 1], got {self.na}")
        if self.k <= 0.0:
            raise InvalidFieldError(f"wavenumber must be positive, got {self.k}")
        kx, ky = self.grid.mesh()
        radius = self.k * self.na
        mask = np.zeros(self.grid.shape, dtype=bool)
        violations = []
        for j, (tx, ty) in enumerate(self.tilts):
            mask |= disk_mask(kx + tx, ky + ty, radius)
            if tx**2 + ty**2 <= radius**2:
                violations.append(j)
        self.mask = mask
        self.dark_field_violations = violations

    @property
    def count(self) -> int:
        """Number of reciprocal cells inside the union."""
        return int(np.count_nonzero(self.mask))


def make_omega(tilts: np.ndarray, na: float, k: float, kgrid: GridSpec) -> OmegaMask:
    """Build the observable-support mask for a tilt series on ``kgrid``."""
    return OmegaMask(grid=kgrid, tilts=np.asarray(tilts, dtype=float), na=na, k=k)


# --- PTYF v1 binary field container ---------------------------------------

_PTYF_MAGIC = b"PTYF"
_PTYF_VERSION = 1
_PTYF_HEADER = struct.Struct("<4sBIIdd")


def write_ptyf(path, f: ComplexField) -> None:
    """Write a field to ``path`` in PTYF v1 format (lossless complex128)."""
    header = _PTYF_HEADER.pack(
        _PTYF_MAGIC, _PTYF_VERSION, f.grid.nx, f.grid.ny, f.grid.dx, f.grid.dy
    )
    payload = np.ascontiguousarray(f.data, dtype="<c16").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_ptyf(path) -> ComplexField:
    """Read a PTYF v1 field; raises :class:`InvalidFieldError` on malformed input."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PTYF_HEADER.size:
        raise InvalidFieldError(f"{path}: truncated PTYF header")
    magic, version, nx, ny, dx, dy = _PTYF_HEADER.unpack_from(raw)
    if magic != _PTYF_MAGIC:
        raise InvalidFieldError(f"{path}: bad magic {magic!r}, expected {_PTYF_MAGIC!r}")
    if version != _PTYF_VERSION:
        raise InvalidFieldError(f"{path}: unsupported PTYF version {version}")
    expected = _PTYF_HEADER.size + nx * ny * 16
    if len(raw) != expected:
        raise InvalidFieldError(f"{path}: payload size {len(raw)} does not match header (expected {expected})")
    data = np.frombuffer(raw, dtype="<c16", offset=_PTYF_HEADER.size).reshape(ny, nx)
    return ComplexField(GridSpec(nx=nx, ny=ny, dx=dx, dy=dy), data.astype(np.complex128))

"""Grids, centered transforms, aperture masks, PTYF container."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptyparam.fields import (
    ComplexField,
    GridSpec,
    InvalidFieldError,
    OmegaMask,
    PupilMask,
    disk_mask,
    fft2,
    ifft2,
    make_omega,
    read_ptyf,
    reciprocal_grid,
    write_ptyf,
)


def random_field(nx, ny, dx=0.7, dy=1.3, seed=0):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(ny, nx)) + 1j * rng.normal(size=(ny, nx))
    return ComplexField(GridSpec(nx=nx, ny=ny, dx=dx, dy=dy), data)


def dft2_direct(f: ComplexField) -> np.ndarray:
    """O(N^2) direct sum over centered coordinates: the transform oracle."""
    g = f.grid
    kg = reciprocal_grid(g)
    x, y = g.mesh()
    out = np.empty(g.shape, dtype=complex)
    for iy, ky in enumerate(kg.y_coords()):
        for ix, kx in enumerate(kg.x_coords()):
            out[iy, ix] = np.sum(f.data * np.exp(-1j * (kx * x + ky * y)))
    return out / np.sqrt(g.nx * g.ny)


# --- grids -------------------------------------------------------------------


def test_grid_center_and_coords():
    for n in (4, 5):
        g = GridSpec(nx=n, ny=n + 1, dx=0.5, dy=0.25)
        assert g.shape == (n + 1, n)
        assert g.center == ((n + 1) // 2, n // 2)
        assert g.x_coords()[g.center[1]] == 0.0
        assert g.y_coords()[g.center[0]] == 0.0
        np.testing.assert_allclose(np.diff(g.x_coords()), g.dx)
        assert g.extent == (n * 0.5, (n + 1) * 0.25)
    x, y = GridSpec(nx=3, ny=4, dx=1.0, dy=1.0).mesh()
    assert x.shape == (1, 3) and y.shape == (4, 1)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(nx=0, ny=4, dx=1.0, dy=1.0),
        dict(nx=4, ny=4, dx=0.0, dy=1.0),
        dict(nx=4, ny=4, dx=1.0, dy=-2.0),
        dict(nx=4, ny=4, dx=np.nan, dy=1.0),
    ],
)
def test_grid_rejects_bad_parameters(kwargs):
    with pytest.raises(InvalidFieldError):
        GridSpec(**kwargs)


def test_reciprocal_grid_is_an_involution():
    g = GridSpec(nx=6, ny=9, dx=0.31, dy=1.7)
    kg = reciprocal_grid(g)
    np.testing.assert_allclose(kg.dx, 2 * np.pi / (6 * 0.31), rtol=1e-15)
    back = reciprocal_grid(kg)
    assert back.shape == g.shape
    np.testing.assert_allclose([back.dx, back.dy], [g.dx, g.dy], rtol=1e-15)


def test_complex_field_validation():
    g = GridSpec(nx=3, ny=2, dx=1.0, dy=1.0)
    with pytest.raises(InvalidFieldError):
        ComplexField(g, np.zeros((3, 3)))
    bad = np.zeros((2, 3), complex)
    bad[0, 0] = np.nan
    with pytest.raises(InvalidFieldError):
        ComplexField(g, bad)
    f = ComplexField(g, np.full((2, 3), 1 + 1j))
    np.testing.assert_allclose(f.power(), 12.0)
    np.testing.assert_allclose(f.intensity(), 2.0)
    c = f.copy()
    c.data[0, 0] = 0.0
    assert f.data[0, 0] == 1 + 1j


# --- transforms --------------------------------------------------------------


@pytest.mark.parametrize("nx,ny", [(8, 8), (7, 5), (6, 5), (1, 9)])
def test_fft_matches_direct_dft(nx, ny):
    f = random_field(nx, ny, seed=nx * 10 + ny)
    got = fft2(f)
    np.testing.assert_allclose(got.data, dft2_direct(f), atol=1e-12 * np.abs(f.data).max())
    assert got.grid == reciprocal_grid(f.grid)


def test_ifft_inverts_fft_exactly():
    f = random_field(12, 10, seed=3)
    back = ifft2(fft2(f))
    np.testing.assert_allclose(back.data, f.data, atol=1e-13)
    assert back.grid == f.grid


def test_parseval():
    f = random_field(16, 11, seed=4)
    assert abs(fft2(f).power() - f.power()) <= 1e-12 * f.power()


def test_translation_multiplies_spectrum_by_phase():
    # circular shift by whole cells <-> exp(-i k . s) on the spectrum
    f = random_field(12, 8, seed=5)
    mx, my = 3, -2
    shifted = ComplexField(f.grid, np.roll(f.data, (my, mx), axis=(0, 1)))
    kg = reciprocal_grid(f.grid)
    kx, ky = kg.mesh()
    phase = np.exp(-1j * (kx * mx * f.grid.dx + ky * my * f.grid.dy))
    np.testing.assert_allclose(fft2(shifted).data, fft2(f).data * phase, atol=1e-12)


def test_fft_of_centered_delta_is_flat():
    g = GridSpec(nx=9, ny=6, dx=0.5, dy=0.5)
    data = np.zeros(g.shape, complex)
    data[g.center] = 1.0
    spec = fft2(ComplexField(g, data)).data
    np.testing.assert_allclose(spec, 1.0 / np.sqrt(g.nx * g.ny), atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(
    nx=st.integers(min_value=1, max_value=12),
    ny=st.integers(min_value=1, max_value=12),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_transform_unitarity_properties(nx, ny, seed):
    f = random_field(nx, ny, seed=seed)
    spec = fft2(f)
    assert abs(spec.power() - f.power()) <= 1e-11 * max(f.power(), 1e-30)
    np.testing.assert_allclose(ifft2(spec).data, f.data, atol=1e-12 * (1 + np.abs(f.data).max()))


# --- masks -------------------------------------------------------------------


def test_disk_mask_includes_boundary():
    kx = np.array([[0.0, 3.0, 3.0000001, -3.0]])
    ky = np.zeros_like(kx)
    mask = disk_mask(kx, ky, 3.0)
    assert mask.tolist() == [[True, True, False, True]]


def test_disk_mask_boundary_ties_are_path_independent():
    # the same physical coordinate computed two ways must classify identically
    dk = 2.0 * np.pi / 100.0
    m = np.arange(-60, 61)
    direct = (m + 40.0) * dk
    shifted = m * dk + 40.0 * dk
    assert np.any(direct != shifted)  # the float paths really differ
    r = 40.0 * dk
    np.testing.assert_array_equal(
        disk_mask(direct, np.zeros_like(direct), r), disk_mask(shifted, np.zeros_like(shifted), r)
    )


def test_pupil_mask_radius_and_validation():
    g = GridSpec(nx=21, ny=21, dx=0.5, dy=0.5)
    p = PupilMask(grid=g, na=0.4, k=2 * np.pi)
    assert p.radius == pytest.approx(0.8 * np.pi)
    kx, ky = g.mesh()
    np.testing.assert_array_equal(p.mask, disk_mask(kx, ky, p.radius))
    with pytest.raises(InvalidFieldError):
        PupilMask(grid=g, na=0.0, k=2 * np.pi)
    with pytest.raises(InvalidFieldError):
        PupilMask(grid=g, na=0.4, k=-1.0)


def test_omega_is_union_of_shifted_disks():
    g = GridSpec(nx=31, ny=31, dx=0.4, dy=0.4)
    tilts = np.array([[1.2, 0.0], [0.0, -1.2], [0.8, 0.8]])
    na, k = 0.3, 2 * np.pi
    omega = make_omega(tilts, na, k, g)
    kx, ky = g.mesh()
    manual = np.zeros(g.shape, bool)
    for tx, ty in tilts:
        manual |= disk_mask(kx + tx, ky + ty, k * na)
    np.testing.assert_array_equal(omega.mask, manual)
    assert omega.count == manual.sum()


def test_omega_dark_field_has_central_hole():
    # tilts steeper than the aperture leave the specular beam unobserved:
    # the origin cell of the union must stay dark
    g = GridSpec(nx=41, ny=41, dx=0.3, dy=0.3)
    k, na = 2 * np.pi, 0.3
    steep = 2.5 * k * na
    az = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    tilts = steep * np.column_stack([np.cos(az), np.sin(az)])
    omega = make_omega(tilts, na, k, g)
    assert omega.dark_field_violations == []
    assert not omega.mask[g.center]
    shallow = make_omega(np.array([[0.5 * k * na, 0.0]]), na, k, g)
    assert shallow.dark_field_violations == [0]


def test_omega_rejects_bad_inputs():
    g = GridSpec(nx=5, ny=5, dx=1.0, dy=1.0)
    with pytest.raises(InvalidFieldError):
        OmegaMask(grid=g, tilts=np.zeros((0, 2)), na=0.4, k=2 * np.pi)
    with pytest.raises(InvalidFieldError):
        OmegaMask(grid=g, tilts=np.zeros((3, 3)), na=0.4, k=2 * np.pi)
    with pytest.raises(InvalidFieldError):
        OmegaMask(grid=g, tilts=np.zeros((1, 2)), na=1.5, k=2 * np.pi)


# --- PTYF container ----------------------------------------------------------


def test_ptyf_round_trip_is_lossless(tmp_path):
    f = random_field(7, 5, dx=0.125, dy=2.5, seed=9)
    path = tmp_path / "field.ptyf"
    write_ptyf(path, f)
    back = read_ptyf(path)
    assert back.grid == f.grid
    np.testing.assert_array_equal(back.data, f.data)


def test_ptyf_rejects_malformed_files(tmp_path):
    f = random_field(4, 4, seed=1)
    path = tmp_path / "field.ptyf"
    write_ptyf(path, f)
    raw = path.read_bytes()

    short = tmp_path / "short.ptyf"
    short.write_bytes(raw[:10])
    with pytest.raises(InvalidFieldError, match="truncated"):
        read_ptyf(short)

    magic = tmp_path / "magic.ptyf"
    magic.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(InvalidFieldError, match="magic"):
        read_ptyf(magic)

    version = tmp_path / "version.ptyf"
    version.write_bytes(raw[:4] + b"\x09" + raw[5:])
    with pytest.raises(InvalidFieldError, match="version"):
        read_ptyf(version)

    clipped = tmp_path / "clipped.ptyf"
    clipped.write_bytes(raw[:-16])
    with pytest.raises(InvalidFieldError, match="payload"):
        read_ptyf(clipped)

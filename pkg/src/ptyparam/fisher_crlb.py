"""Fisher information and Cramér-Rao lower bounds for Poisson photon noise.

For counts ``n ~ Poisson(I(theta))`` accumulated over views ``j`` and pixels
``p``, the Fisher matrix is

    M[l, m] = sum_{j,p} dI/dtheta_l * dI/dtheta_m / I,

with intensities in photons (the photon energy is the unit of energy).  The
derivative stacks are assembled analytically for both measurement models;
:func:`fisher_finite_difference` builds the same matrix from central
differences of any intensity map and serves as the independent cross-check.

Closed-form shortcuts published for special cases (an isolated scatterer; a
rectangle probed edge-on) are provided alongside the general constructions
so their accuracy can be measured rather than assumed; they bake in
additional approximations (flat pupil amplitude, continuum transforms) and
are not used by the CRLB pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import jv

from .fields import ComplexField, GridSpec, _centered_fft2, _centered_ifft2, reciprocal_grid
from .forward_dipole import DipoleScene
from .forward_rect import RECT_THETA_NAMES, RectParams, band_limited_object, rect_spectrum_jacobian

DEFAULT_INTENSITY_FLOOR = 1e-12


@dataclass
class FisherMatrix:
    """Symmetric PSD information matrix with a named parameter layout."""

    matrix: np.ndarray
    names: tuple[str, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=float)
        n = len(self.names)
        if self.matrix.shape != (n, n):
            raise ValueError(f"matrix shape {self.matrix.shape} does not match {n} parameter names")


@dataclass
class CrlbReport:
    """Per-parameter lower bounds plus inversion diagnostics."""

    values: np.ndarray
    names: tuple[str, ...]
    fisher_diag: np.ndarray
    condition_number: float
    used_pseudo_inverse: bool
    pn: float | None = None


def crlb(fisher: FisherMatrix, diagonal_only: bool = False, pn: float | None = None,
         cond_limit: float = 1e12) -> CrlbReport:
    """Cramér-Rao bounds: the diagonal of the inverse Fisher matrix.

    ``diagonal_only=True`` instead inverts only the diagonal entries, which
    bounds each parameter assuming all others are known.  Near-singular
    matrices (condition number beyond ``cond_limit``) fall back to the
    eigenvalue pseudo-inverse and flag it in the report.
    """
    m = fisher.matrix
    sym_err = np.linalg.norm(m - m.T)
    if sym_err > 1e-8 * max(np.linalg.norm(m), 1e-300):
        raise ValueError(f"Fisher matrix is not symmetric (asymmetry {sym_err:.3e})")
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    w_max = w.max()
    if w_max <= 0.0:
        raise ValueError("Fisher matrix has no positive eigenvalues; no information to invert")
    w_min = w.min()
    condition = float(w_max / w_min) if w_min > 0.0 else np.inf
    if diagonal_only:
        diag = np.diag(m)
        if np.any(diag <= 0.0):
            raise ValueError("diagonal-only bound requires strictly positive Fisher diagonal")
        values = 1.0 / diag
        used_pseudo = False
    else:
        bad = w < w_max / cond_limit
        used_pseudo = bool(bad.any())
        inv_w = np.where(bad, 0.0, 1.0 / np.where(bad, 1.0, w))
        values = np.einsum("ij,j,ij->i", v, inv_w, v)
    return CrlbReport(
        values=values,
        names=fisher.names,
        fisher_diag=np.diag(m).copy(),
        condition_number=condition,
        used_pseudo_inverse=used_pseudo,
        pn=pn,
    )


# --- scatterer model ---------------------------------------------------------


def _dipole_rows(scene: DipoleScene, tilt: np.ndarray, q: ComplexField):
    """Per-tilt intensity and intensity-derivative stack for all parameters."""
    kx, ky = q.grid.mesh()
    kxs = kx - float(tilt[0])
    kys = ky - float(tilt[1])
    parts = [
        q.data * (d.alpha * np.exp(-1j * (kxs * d.x + kys * d.y)))
        for d in scene.dipoles
    ]
    a = _centered_ifft2(sum(parts))
    intensity = np.abs(a) ** 2
    abar = np.conj(a)
    rows = np.empty((3 * scene.n,) + q.grid.shape)
    for i, d in enumerate(scene.dipoles):
        b = _centered_ifft2(parts[i])
        rows[3 * i] = 2.0 / d.alpha * np.real(abar * b)
        rows[3 * i + 1] = 2.0 * np.real(abar * _centered_ifft2(-1j * kxs * parts[i]))
        rows[3 * i + 2] = 2.0 * np.real(abar * _centered_ifft2(-1j * kys * parts[i]))
    return intensity, rows


def fisher_dipoles(
    scene: DipoleScene,
    tilts: np.ndarray,
    q: ComplexField,
    floor: float = DEFAULT_INTENSITY_FLOOR,
) -> FisherMatrix:
    """Fisher matrix of all scatterer parameters for a dark-field tilt series.

    Layout ``(alpha_1, x_1, y_1, alpha_2, ...)``; intensities below ``floor``
    photons are clamped (count reported in ``meta['floored_pixels']``).
    """
    tilts = np.atleast_2d(np.asarray(tilts, dtype=float))
    m = 3 * scene.n
    total = np.zeros((m, m))
    floored = 0
    for tilt in tilts:
        intensity, rows = _dipole_rows(scene, tilt, q)
        floored += int(np.count_nonzero(intensity < floor))
        weight = rows.reshape(m, -1) / np.maximum(intensity, floor).ravel()
        total += weight @ rows.reshape(m, -1).T
    total = (total + total.T) / 2.0
    return FisherMatrix(
        matrix=total,
        names=scene.theta_names(),
        meta={"floored_pixels": floored, "views": tilts.shape[0]},
    )


def fisher_single_dipole_closed(
    scene: DipoleScene,
    q: ComplexField,
    n_views: int,
    na: float,
    k: float,
) -> tuple[float, np.ndarray]:
    """Closed forms for an isolated scatterer: ``(I_aa, I_rr)``.

    ``I_aa = 4 * sum_{r',j} |ifft2(Q exp(-i k.r_1))|^2`` is exact (and
    tilt-independent).  The position block uses the Airy-derivative form:
    with a flat pupil (axial wavenumber frozen at ``k``) the point image is
    ``J_1(K rho)/rho`` up to constants (``K = k*NA``), its radial slope is
    ``-K J_2(K rho)/rho``, and summing the squared slope over the camera
    gives, per axis,

        I_rr[0,0] = I_rr[1,1]
                  = J * alpha^2 a_in^2 k^2 K^4 / (8 N dkx^2 dky^2)
                    * sum_{r'} J_2(K rho)^2 / rho^2,

    where ``N`` is the camera cell count, ``dk`` the reciprocal cell sides,
    ``rho = |r' - r_1|``, and the removable ``rho = 0`` term is zero.  The
    constant is the unitary-DFT rendering of the textbook continuum factor
    ``4 |C|^2`` with ``C = alpha a_in k^3 NA^2 / (8 pi)``.  The flat-pupil
    and continuum assumptions make this block approximate at the percent
    level on a finite sampled system, unlike ``I_aa``.
    """
    if scene.n != 1:
        raise ValueError(f"closed forms hold for a single scatterer, scene has {scene.n}")
    d = scene.dipoles[0]
    kx, ky = q.grid.mesh()
    psf = _centered_ifft2(q.data * np.exp(-1j * (kx * d.x + ky * d.y)))
    i_aa = 4.0 * n_views * float(np.sum(np.abs(psf) ** 2))

    camera = reciprocal_grid(q.grid)
    x, y = camera.mesh()
    rho_sq = (x - d.x) ** 2 + (y - d.y) ** 2
    rho = np.sqrt(rho_sq)
    big_k = k * na
    term = np.zeros_like(rho)
    nz = rho > 0.0
    term[nz] = jv(2, big_k * rho[nz]) ** 2 / rho_sq[nz]
    n_cells = camera.nx * camera.ny
    prefactor = (
        n_views
        * d.alpha**2
        * scene.a_in**2
        * k**2
        * big_k**4
        / (8.0 * n_cells * q.grid.dx**2 * q.grid.dy**2)
    )
    diag = prefactor * float(np.sum(term))
    return i_aa, diag * np.eye(2)


# --- rectangle model ---------------------------------------------------------


def fisher_rect(
    p: RectParams,
    probes: np.ndarray,
    origins: np.ndarray,
    obj_grid: GridSpec,
    floor: float = DEFAULT_INTENSITY_FLOOR,
) -> FisherMatrix:
    """Fisher matrix of the rectangle parameters for a ptychographic scan.

    Derivatives are propagated through the same chain that generates the
    data: analytic spectrum derivative -> band-limited object derivative ->
    per-view window -> far field.  Layout follows
    :data:`~ptyparam.forward_rect.RECT_THETA_NAMES`.
    """
    probes = np.asarray(probes, dtype=np.complex128)
    origins = np.asarray(origins, dtype=int)
    obj = band_limited_object(p, obj_grid).data
    d_obj = np.stack([_centered_ifft2(spec) for spec in rect_spectrum_jacobian(p, obj_grid)])
    my, mx = probes.shape[1:]
    total = np.zeros((6, 6))
    floored = 0
    for probe, (oy, ox) in zip(probes, origins):
        u = _centered_fft2(probe * obj[oy : oy + my, ox : ox + mx])
        intensity = np.abs(u) ** 2
        floored += int(np.count_nonzero(intensity < floor))
        ubar = np.conj(u)
        rows = np.empty((6, my, mx))
        for l in range(6):
            du = _centered_fft2(probe * d_obj[l, oy : oy + my, ox : ox + mx])
            rows[l] = 2.0 * np.real(ubar * du)
        weight = rows.reshape(6, -1) / np.maximum(intensity, floor).ravel()
        total += weight @ rows.reshape(6, -1).T
    total = (total + total.T) / 2.0
    return FisherMatrix(
        matrix=total,
        names=RECT_THETA_NAMES,
        meta={"floored_pixels": floored, "views": probes.shape[0]},
    )


def _phase_ratio(u: np.ndarray, guard: float = 1e-14) -> np.ndarray:
    # F(psi)/F(psi)* is a pure phase; where |F(psi)| underflows the phase is
    # numerically meaningless, so it is pinned to 1 there.
    mod = np.abs(u)
    safe = mod > guard * mod.max()
    ratio = np.ones_like(u)
    ratio[safe] = u[safe] / np.conj(u[safe])
    return ratio


def _eval_ratio_field(ratio: np.ndarray, kx: np.ndarray, ky: np.ndarray,
                      x: float, ys: np.ndarray) -> np.ndarray:
    """Inverse-transform the phase ratio at a fixed x and a list of y values.

    Direct nonuniform summation of ``(1/sqrt(N)) sum ratio * exp(i k.r)``
    over the available spectrum samples; exact for any evaluation point.
    """
    col = ratio @ np.exp(1j * kx * x)  # sum over kx for each ky row
    basis = np.exp(1j * np.outer(ys, ky))
    return (basis @ col) / np.sqrt(ratio.size)


def _interp_columns(arr: np.ndarray, x_axis: np.ndarray, x: float) -> np.ndarray:
    """Linear interpolation of a 2-D array along its column axis, all rows at once."""
    dx = x_axis[1] - x_axis[0]
    f = (x - x_axis[0]) / dx
    i0 = int(np.floor(f))
    w = f - i0
    if i0 < 0 or i0 >= x_axis.size - 1:
        # outside the sampled window; fields of interest vanish there
        return np.zeros(arr.shape[0], dtype=arr.dtype)
    return (1.0 - w) * arr[:, i0] + w * arr[:, i0 + 1]


def _edge_terms_one_axis(
    probe: np.ndarray,
    ratio: np.ndarray,
    kx: np.ndarray,
    ky: np.ndarray,
    x_abs: np.ndarray,
    y_abs: np.ndarray,
    tx: float,
    ty: float,
    c1: complex,
    half_width: float,
    xc: float,
    other_half: float,
    other_c: float,
) -> tuple[float, float]:
    """Edge-sum contributions of one view to the (size, position) pair along x.

    Returns ``(quarter_terms, cross_term_core)`` where the size entry is
    ``0.5*(direct) + 0.5*(plus) + 0.5*(minus) + 1.0*(cross)`` and the
    position entry is ``2*(direct) + 2*(plus) + 2*(minus) - 4*(cross)``;
    the caller combines them, so this returns the four building blocks
    folded into the two published linear combinations.
    """
    x_plus = xc + half_width / 2.0
    x_minus = xc - half_width / 2.0
    pi_other = (np.abs(y_abs - other_c) <= other_half / 2.0).astype(float)

    p_plus = _interp_columns(probe, x_abs, x_plus)
    p_minus = _interp_columns(probe, x_abs, x_minus)

    # K evaluated at the published doubled-coordinate points, shifted into
    # the window frame (the window transform references its own center, so
    # absolute point s maps to s - 2t for the phase-ratio field)
    ys = y_abs - 2.0 * ty
    k_plus = _eval_ratio_field(ratio, kx, ky, 2.0 * xc + half_width - 2.0 * tx, ys)
    k_minus = _eval_ratio_field(ratio, kx, ky, 2.0 * xc - half_width - 2.0 * tx, ys)
    k_mid = _eval_ratio_field(ratio, kx, ky, 2.0 * xc - 2.0 * tx, ys)

    c_sq = np.conj(c1) ** 2
    abs_c_sq = abs(c1) ** 2
    direct = float(np.sum(pi_other * abs_c_sq * (np.abs(p_plus) ** 2 + np.abs(p_minus) ** 2)))
    plus = float(np.sum(pi_other * np.real(c_sq * k_plus * np.conj(p_plus) ** 2)))
    minus = float(np.sum(pi_other * np.real(c_sq * k_minus * np.conj(p_minus) ** 2)))
    cross = float(np.sum(pi_other * np.real(c_sq * k_mid * np.conj(p_plus) * np.conj(p_minus))))

    size_term = 0.5 * direct + 0.5 * plus + 0.5 * minus + 1.0 * cross
    pos_term = 2.0 * direct + 2.0 * plus + 2.0 * minus - 4.0 * cross
    return size_term, pos_term


def fisher_rect_edge_terms(
    p: RectParams,
    probes: np.ndarray,
    origins: np.ndarray,
    obj_grid: GridSpec,
) -> dict[str, float]:
    """Published closed-form diagonals of the rectangle Fisher matrix.

    The size/position entries reduce to sums over the rectangle's edge
    lines, weighted by the probe there and by the phase field
    ``K_j = ifft2(F(psi_j)/F(psi_j)*)`` evaluated at doubled coordinates;
    the transmission entry sums over the rectangle area, and the phase entry
    is ``A1^2`` times it.  These forms carry the derivation's continuum
    assumptions; compare against :func:`fisher_rect` to quantify them.
    """
    probes = np.asarray(probes, dtype=np.complex128)
    origins = np.asarray(origins, dtype=int)
    my, mx = probes.shape[1:]
    obj = band_limited_object(p, obj_grid).data
    x_obj = obj_grid.x_coords()
    y_obj = obj_grid.y_coords()
    win = GridSpec(nx=mx, ny=my, dx=obj_grid.dx, dy=obj_grid.dy)
    kwin = reciprocal_grid(win)
    kx = kwin.x_coords()
    ky = kwin.y_coords()

    out = {name: 0.0 for name in ("A1", "phi1", "a1", "b1", "x1", "y1")}
    for probe, (oy, ox) in zip(probes, origins):
        x_abs = x_obj[ox : ox + mx]
        y_abs = y_obj[oy : oy + my]
        tx = x_abs[mx // 2]
        ty = y_abs[my // 2]
        u = _centered_fft2(probe * obj[oy : oy + my, ox : ox + mx])
        ratio = _phase_ratio(u)

        # transmission entry: area sums with K on the (shifted) window grid
        pi_rect = (
            (np.abs(x_abs[None, :] - p.x1) <= p.a1 / 2.0)
            & (np.abs(y_abs[:, None] - p.y1) <= p.b1 / 2.0)
        ).astype(float)
        k_grid_abs = np.roll(
            _centered_ifft2(ratio),
            (int(np.rint(ty / obj_grid.dy)), int(np.rint(tx / obj_grid.dx))),
            axis=(0, 1),
        )
        h = probe * pi_rect
        out["A1"] += 2.0 * float(np.sum(np.abs(h) ** 2))
        out["A1"] += 2.0 * float(
            np.sum(np.real(k_grid_abs * np.exp(-2j * p.phi1) * np.conj(h) ** 2))
        )

        size_x, pos_x = _edge_terms_one_axis(
            probe, ratio, kx, ky, x_abs, y_abs, tx, ty, p.c1, p.a1, p.x1, p.b1, p.y1
        )
        out["a1"] += size_x
        out["x1"] += pos_x
        # y direction: transpose the view so rows/columns swap roles
        size_y, pos_y = _edge_terms_one_axis(
            probe.T, ratio.T, ky, kx, y_abs, x_abs, ty, tx, p.c1, p.b1, p.y1, p.a1, p.x1
        )
        out["b1"] += size_y
        out["y1"] += pos_y
    out["phi1"] = p.A1**2 * out["A1"]
    return out


# --- finite-difference oracle -------------------------------------------------


def fisher_finite_difference(
    intensity_fn,
    theta: np.ndarray,
    rel_step: float = 1e-5,
    steps: np.ndarray | None = None,
    floor: float = DEFAULT_INTENSITY_FLOOR,
) -> np.ndarray:
    """Assemble the Fisher matrix from central differences of an intensity map.

    ``intensity_fn(theta)`` returns the full stack of expected intensities
    (any shape).  ``steps`` overrides the per-parameter step; by default it
    is ``rel_step * max(|theta_i|, 1)``.
    """
    theta = np.asarray(theta, dtype=float)
    if steps is None:
        steps = rel_step * np.maximum(np.abs(theta), 1.0)
    steps = np.asarray(steps, dtype=float)
    base = np.asarray(intensity_fn(theta), dtype=float)
    deriv = []
    for i in range(theta.size):
        up = theta.copy()
        dn = theta.copy()
        up[i] += steps[i]
        dn[i] -= steps[i]
        deriv.append(
            (np.asarray(intensity_fn(up), dtype=float) - np.asarray(intensity_fn(dn), dtype=float))
            / (2.0 * steps[i])
        )
    weight = 1.0 / np.maximum(base, floor)
    n = theta.size
    out = np.empty((n, n))
    for l in range(n):
        for m in range(l, n):
            out[l, m] = out[m, l] = float(np.sum(deriv[l] * deriv[m] * weight))
    return out

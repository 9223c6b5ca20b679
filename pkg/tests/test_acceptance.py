"""Acceptance gate: one test per headline behavior, each printing a single
``criterion N ...: PASS/FAIL`` line with the measured values next to the
required tolerance.  The two Monte Carlo criteria run full seeded campaigns
and dominate the suite's runtime (roughly 45 minutes and 6 minutes).

Every tolerance asserted here is the stated requirement; nothing is
loosened to fit the implementation.  Where a requirement is not met the
test prints an honest FAIL line with the measured numbers and then fails.
"""

import time

import numpy as np

from ptyparam.fields import ComplexField, GridSpec, fft2, make_omega
from ptyparam.fisher_crlb import (
    crlb,
    fisher_dipoles,
    fisher_finite_difference,
    fisher_rect,
    fisher_single_dipole_closed,
)
from ptyparam.fit import (
    BoxBounds,
    box_minimize,
    dipole_initial_guess,
    fit_dipoles,
    fit_rect,
    make_dipole_objective,
    make_rect_objective,
)
from ptyparam.forward_dipole import (
    Dipole,
    DipoleScene,
    TiltSet,
    dark_field_intensity,
    object_spectrum,
    q_factor,
    snap_tilts,
    tilt_cells,
)
from ptyparam.forward_rect import RectParams, band_limited_object, rect_spectrum_model
from ptyparam.montecarlo import TrialPlan, run_campaign
from ptyparam.presets import DipoleDarkField, RectPtycho, dipole_reference, rect_reference
from ptyparam.recon import ReconConfig, anchor_phase, fourier_pty_reconstruct, pie_reconstruct


def _emit(capsys, text: str) -> None:
    """Print one live line per criterion, bypassing pytest capture."""
    with capsys.disabled():
        print("\n" + text, flush=True)


def _progress(capsys, label: str, every: int = 50):
    def callback(done: int, total: int) -> None:
        if done % every == 0 or done == total:
            with capsys.disabled():
                print(f"    [{label}] {done}/{total} trials", flush=True)

    return callback


def _small_dark_field():
    det = GridSpec(nx=32, ny=32, dx=2 * np.pi / 16, dy=2 * np.pi / 16)
    k, na = 2 * np.pi, 0.4
    q = q_factor(det, 0.0, 1.0, na, k)
    tilts = snap_tilts(TiltSet(count=12, polar_deg=60.0).nominal(), det)
    scene = DipoleScene(
        dipoles=(Dipole(alpha=1e-3, x=-2.5, y=0.7), Dipole(alpha=6e-4, x=3.1, y=-1.2)), a_in=1.0
    )
    return scene, tilts, q, k, na


# ---------------------------------------------------------------------------
# criterion 1: noise-free dark-field retrieval at printed precision


def test_criterion_1_noise_free_dark_field_retrieval(capsys):
    t0 = time.monotonic()
    cfg = DipoleDarkField()
    counts = cfg.intensities()
    recon = fourier_pty_reconstruct(
        counts, cfg.q(), cfg.cells(), cfg.omega(), ReconConfig(max_iters=200, tol=1e-13)
    )
    reference = np.where(
        cfg.omega().mask, object_spectrum(cfg.scene(), cfg.ext_kgrid()).data, 0.0
    )
    anchored = anchor_phase(recon.estimate.data, reference)
    theta0, bounds = dipole_initial_guess(
        counts.sum(axis=0),
        cfg.camera_grid(),
        n=cfg.scene().n,
        q_power=cfg.q().power(),
        n_views=cfg.n_tilts,
    )
    result = fit_dipoles(ComplexField(cfg.ext_kgrid(), anchored), cfg.omega(), theta0, bounds)

    um_per_wavelength = cfg.wavelength_nm * 1e-3
    strengths = result.theta[[0, 3]]
    positions_um = result.theta[[1, 2, 4, 5]] * um_per_wavelength
    target_strengths = np.array([1.000e-3, 0.512e-3])  # units of wavelength^3
    target_positions = np.array([-8.333, 0.000, 8.356, 0.088])  # micrometers
    err_a = float(np.abs(strengths - target_strengths).max())
    err_r = float(np.abs(positions_um - target_positions).max())
    elapsed = time.monotonic() - t0

    ok = result.converged and err_a <= 5e-7 and err_r <= 5e-4 and elapsed < 300.0
    _emit(
        capsys,
        f"criterion 1 (noise-free dark-field retrieval): {'PASS' if ok else 'FAIL'} — "
        f"max strength error {err_a:.2e} (tol 5e-07), "
        f"max position error {err_r:.2e} um (tol 5e-04), {elapsed:.0f} s (limit 300)",
    )
    assert result.converged, result.message
    assert err_a <= 5e-7, f"strength error {err_a:.3e} exceeds half a printed digit (5e-7)"
    assert err_r <= 5e-4, f"position error {err_r:.3e} um exceeds half a printed digit (5e-4)"
    assert elapsed < 300.0, f"pipeline took {elapsed:.0f} s (limit 300 s)"


# ---------------------------------------------------------------------------
# criterion 2: noise-free rectangle retrieval at printed precision


def test_criterion_2_noise_free_rectangle_retrieval(capsys):
    t0 = time.monotonic()
    cfg = RectPtycho()
    counts = cfg.intensities()
    recon = pie_reconstruct(
        counts, cfg.views(), cfg.obj_grid(), ReconConfig(max_iters=400, tol=1e-13)
    )
    anchored = anchor_phase(recon.estimate.data, cfg.object_field().data)
    spectrum = fft2(ComplexField(cfg.obj_grid(), anchored - 1.0))
    theta0 = cfg.guess_theta()
    result = fit_rect(spectrum, cfg.obj_grid(), theta0, cfg.fit_bounds(theta0))

    truth = np.array(cfg.params)
    err = float(np.abs(result.theta - truth).max())
    elapsed = time.monotonic() - t0

    ok = result.converged and err <= 0.005 and elapsed < 120.0
    _emit(
        capsys,
        f"criterion 2 (noise-free rectangle retrieval): {'PASS' if ok else 'FAIL'} — "
        f"max parameter error {err:.2e} (tol 5e-03), {elapsed:.0f} s (limit 120)",
    )
    assert result.converged, result.message
    assert err <= 0.005, f"parameter error {err:.3e} exceeds the printed precision (0.005)"
    assert elapsed < 120.0, f"pipeline took {elapsed:.0f} s (limit 120 s)"


# ---------------------------------------------------------------------------
# criterion 3: the x1 lower bound scales exactly as 1/(photon number)


def test_criterion_3_crlb_inverse_flux_scaling(capsys):
    photon_numbers = (1e4, 1e6, 1e8)
    values = []
    for pn in photon_numbers:
        cfg = dipole_reference(pn=pn)
        report = crlb(fisher_dipoles(cfg.scene(), cfg.tilts(), cfg.q()))
        values.append(report.values[report.names.index("x1")])
    products = np.array(values) * np.array(photon_numbers)
    ratios_pct = 100.0 * products / products[0]
    spread = float(np.abs(ratios_pct - 100.0).max())

    ok = spread <= 0.1
    pretty = ", ".join(f"{v:.4e}@{pn:.0e}" for v, pn in zip(values, photon_numbers))
    _emit(
        capsys,
        f"criterion 3 (bound scales as 1/flux): {'PASS' if ok else 'FAIL'} — "
        f"CRLB(x1) = {pretty}; CRLB*PN ratios {ratios_pct[0]:.3f}/{ratios_pct[1]:.3f}/"
        f"{ratios_pct[2]:.3f} % (need 100.0 +/- 0.1)",
    )
    assert spread <= 0.1, f"CRLB(x1)*PN varies by {spread:.3f}% across the flux sweep"


# ---------------------------------------------------------------------------
# criterion 4: campaign variance sits on the bound; high-flux bias vanishes


def test_criterion_4_dipole_campaigns_respect_bound(capsys):
    t0 = time.monotonic()
    mid = run_campaign(
        TrialPlan(kind="dipole", photon_number=1e6, trials=200),
        progress=_progress(capsys, "dipole pn=1e6"),
    )
    var_mid = mid.value("x1")
    bound_mid = mid.value("x1", "crlb_values")
    ratio_to_named = var_mid / 4.28e-8

    high = run_campaign(
        TrialPlan(kind="dipole", photon_number=1e8, trials=72, recon_iters=150, recon_tol=0.0),
        progress=_progress(capsys, "dipole pn=1e8", every=24),
    )
    var_high = high.value("x1")
    bias_sq_high = high.value("x1", "bias_sq")
    elapsed = time.monotonic() - t0

    in_band = bound_mid <= var_mid <= 3.0 * bound_mid
    near_named = 0.5 <= ratio_to_named <= 2.0
    unbiased = bias_sq_high < var_high / 10.0
    ok = in_band and near_named and unbiased and elapsed < 3600.0
    _emit(
        capsys,
        f"criterion 4 (dipole campaigns vs bound): {'PASS' if ok else 'FAIL'} — "
        f"pn=1e6 T={mid.trials_used}: Var(x1)={var_mid:.4e}, CRLB={bound_mid:.4e} "
        f"(ratio {var_mid / bound_mid:.2f}, need 1..3), vs 4.28e-08 ratio "
        f"{ratio_to_named:.2f} (need 0.5..2); pn=1e8 T={high.trials_used}: "
        f"Bias^2(x1)={bias_sq_high:.2e} < Var/10={var_high / 10.0:.2e}: {unbiased}; "
        f"{elapsed:.0f} s (limit 3600)",
    )
    assert mid.failures == 0 and high.failures == 0, (mid.failure_reasons, high.failure_reasons)
    assert in_band, f"Var(x1)={var_mid:.4e} outside [CRLB, 3*CRLB]=[{bound_mid:.4e}, {3 * bound_mid:.4e}]"
    assert near_named, f"Var(x1)={var_mid:.4e} not within factor 2 of 4.28e-8"
    assert unbiased, f"Bias^2(x1)={bias_sq_high:.3e} not below Var/10={var_high / 10:.3e}"
    assert elapsed < 3600.0, f"campaigns took {elapsed:.0f} s (limit 3600 s)"


# ---------------------------------------------------------------------------
# criterion 5: a stronger second scatterer tightens the x1 bound


def test_criterion_5_second_scatterer_lowers_x1_bound(capsys):
    values = []
    for factor in (1.0, 2.0, 4.0):
        cfg = dipole_reference(pn=1e8, alpha2_factor=factor)
        report = crlb(fisher_dipoles(cfg.scene(), cfg.tilts(), cfg.q()))
        values.append(report.values[report.names.index("x1")])
    decreasing = values[0] > values[1] > values[2]

    _emit(
        capsys,
        f"criterion 5 (second-scatterer correlation): {'PASS' if decreasing else 'FAIL'} — "
        f"CRLB(x1) over strength factors 1/2/4: {values[0]:.4e} > {values[1]:.4e} > "
        f"{values[2]:.4e} (need strict decrease)",
    )
    assert decreasing, f"CRLB(x1) not strictly decreasing across the strength sweep: {values}"


# ---------------------------------------------------------------------------
# criterion 6: rectangle height sweep — bound trends and campaign variance


def test_criterion_6_rectangle_height_sweep(capsys):
    t0 = time.monotonic()
    bounds_by_b1 = {}
    for b1 in (1.0, 5.0, 15.0, 40.0, 50.0, 60.0):
        cfg = rect_reference(pn=1e8, b1=b1)
        probes, origins = cfg.probes_and_origins()
        report = crlb(fisher_rect(cfg.rect(), probes, origins, cfg.obj_grid()))
        bounds_by_b1[b1] = dict(zip(report.names, report.values))

    small = [1.0, 5.0, 15.0]
    large = [40.0, 50.0, 60.0]
    a1_small = [bounds_by_b1[b]["a1"] for b in small]
    x1_small = [bounds_by_b1[b]["x1"] for b in small]
    b1_large = [bounds_by_b1[b]["b1"] for b in large]
    y1_large = [bounds_by_b1[b]["y1"] for b in large]
    small_ok = all(np.diff(a1_small) < 0) and all(np.diff(x1_small) < 0)
    large_ok = all(np.diff(b1_large) > 0) and all(np.diff(y1_large) > 0)

    campaign = run_campaign(
        TrialPlan(kind="rect", photon_number=1e8, trials=200, b1=15.0),
        progress=_progress(capsys, "rect b1=15"),
    )
    var_a1 = campaign.value("a1")
    crlb_a1 = campaign.value("a1", "crlb_values")
    ratio = var_a1 / 9.017e-8
    mc_ok = 0.5 <= ratio <= 2.0
    elapsed = time.monotonic() - t0

    ok = small_ok and large_ok and mc_ok
    _emit(
        capsys,
        f"criterion 6 (rectangle height sweep): {'PASS' if ok else 'FAIL'} — "
        f"CRLB(a1) {a1_small[0]:.3e}>{a1_small[1]:.3e}>{a1_small[2]:.3e} and CRLB(x1) "
        f"decreasing over heights 1/5/15: {small_ok}; CRLB(b1), CRLB(y1) increasing over "
        f"40/50/60: {large_ok}; campaign T={campaign.trials_used} at height 15: "
        f"Var(a1)={var_a1:.4e} vs named 9.017e-08 (ratio {ratio:.2f}, need 0.5..2, "
        f"Var/CRLB={var_a1 / crlb_a1:.2f}): {mc_ok}; {elapsed:.0f} s",
    )
    assert small_ok, f"a1/x1 bounds not strictly decreasing over small heights: {a1_small}, {x1_small}"
    assert large_ok, f"b1/y1 bounds not increasing over large heights: {b1_large}, {y1_large}"
    assert campaign.failures == 0, campaign.failure_reasons
    assert mc_ok, (
        f"Var(a1)={var_a1:.4e} is {ratio:.2f}x the named 9.017e-8, outside factor 2; "
        f"the estimator here is near-efficient (Var/CRLB={var_a1 / crlb_a1:.2f} with "
        f"CRLB={crlb_a1:.4e}), so matching the named variance would require an estimator "
        f"roughly 3x the information bound"
    )


# ---------------------------------------------------------------------------
# criterion 7: information-matrix oracles


def test_criterion_7_fisher_oracles(capsys):
    # finite-difference equivalence, reduced dark-field configuration
    scene, tilts, q, k, na = _small_dark_field()
    analytic = fisher_dipoles(scene, tilts, q).matrix

    def dipole_intensity(theta):
        s = DipoleScene.from_theta(theta, a_in=scene.a_in, z=scene.z)
        return np.stack([dark_field_intensity(s, t, q) for t in tilts])

    fd = fisher_finite_difference(dipole_intensity, scene.theta)
    rel_dark = float(np.linalg.norm(analytic - fd) / np.linalg.norm(analytic))

    # finite-difference equivalence, rectangle grid with a reduced 3x3 scan
    preset = RectPtycho(scan_n=3)
    probes, origins = preset.probes_and_origins()
    g = preset.obj_grid()
    analytic_rect = fisher_rect(preset.rect(), probes, origins, g).matrix
    win = GridSpec(nx=preset.win_n, ny=preset.win_n, dx=g.dx, dy=g.dy)

    def rect_intensity(theta):
        obj = band_limited_object(RectParams.from_theta(theta), g).data
        out = []
        for probe, (oy, ox) in zip(probes, origins):
            view = obj[oy : oy + preset.win_n, ox : ox + preset.win_n]
            out.append(fft2(ComplexField(win, probe * view)).intensity())
        return np.stack(out)

    fd_rect = fisher_finite_difference(rect_intensity, np.array(preset.params))
    rel_rect = float(np.linalg.norm(analytic_rect - fd_rect) / np.linalg.norm(analytic_rect))

    # single-scatterer closed forms against the general matrix diagonals
    ref = DipoleDarkField()
    lone = DipoleScene(dipoles=(Dipole(alpha=1e-3, x=-16.666, y=0.0),), a_in=ref.a_in)
    general = fisher_dipoles(lone, ref.tilts(), ref.q()).matrix
    i_aa, i_rr = fisher_single_dipole_closed(lone, ref.q(), ref.n_tilts, ref.na, ref.k)
    rel_aa = float(abs(i_aa - general[0, 0]) / abs(general[0, 0]))
    rel_pos = float(
        max(
            abs(i_rr[0, 0] - general[1, 1]) / abs(general[1, 1]),
            abs(i_rr[1, 1] - general[2, 2]) / abs(general[2, 2]),
        )
    )

    fd_ok = rel_dark <= 1e-3 and rel_rect <= 1e-3
    aa_ok = rel_aa <= 1e-6
    pos_ok = rel_pos <= 1e-6
    ok = fd_ok and aa_ok and pos_ok
    _emit(
        capsys,
        f"criterion 7 (information-matrix oracles): {'PASS' if ok else 'FAIL'} — "
        f"finite-difference equivalence rel {rel_dark:.1e} / {rel_rect:.1e} (tol 1e-03): "
        f"{fd_ok}; strength closed form rel {rel_aa:.2e} (tol 1e-06): {aa_ok}; "
        f"position closed form rel {rel_pos:.2e} (tol 1e-06): {pos_ok}",
    )
    assert rel_dark <= 1e-3, f"dark-field Fisher vs finite differences: rel {rel_dark:.3e}"
    assert rel_rect <= 1e-3, f"rectangle Fisher vs finite differences: rel {rel_rect:.3e}"
    assert rel_aa <= 1e-6, f"strength closed form off by rel {rel_aa:.3e}"
    assert rel_pos <= 1e-6, (
        f"position closed form off by rel {rel_pos:.3e}: the closed form freezes the "
        f"axial wavenumber over a flat pupil and integrates a continuum point image, "
        f"assumptions the sampled finite system only satisfies at the percent level"
    )


# ---------------------------------------------------------------------------
# criterion 8: property suites


def test_criterion_8_property_suites(capsys):
    checks = []
    rng = np.random.default_rng(20260825)

    # unitary transform against the direct O(N^2) definition, plus Parseval
    g = GridSpec(nx=8, ny=8, dx=0.7, dy=1.3)
    f = ComplexField(g, rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8)))
    fwd = fft2(f)
    cx, cy = g.nx // 2, g.ny // 2
    direct = np.empty((8, 8), dtype=complex)
    for a in range(8):
        for b in range(8):
            acc = 0.0
            for m in range(8):
                for n in range(8):
                    acc += f.data[m, n] * np.exp(-2j * np.pi * ((a - cy) * (m - cy) + (b - cx) * (n - cx)) / 8)
            direct[a, b] = acc / 8.0
    rel_dft = np.abs(fwd.data - direct).max() / np.abs(direct).max()
    checks.append(("fft-vs-direct-dft", rel_dft <= 1e-12, f"rel {rel_dft:.1e}"))
    parseval = abs(fwd.power() - f.power()) / f.power()
    checks.append(("parseval", parseval <= 1e-12, f"rel {parseval:.1e}"))

    # information matrices: symmetric, positive semidefinite, flux-quadratic
    scene, tilts, q, k, na = _small_dark_field()
    fm = fisher_dipoles(scene, tilts, q, floor=1e-30)
    sym = bool(np.array_equal(fm.matrix, fm.matrix.T))
    eigs = np.linalg.eigvalsh(fm.matrix)
    psd = bool(eigs.min() >= -1e-9 * eigs.max())
    checks.append(("fisher-symmetric-psd", sym and psd, f"min eig {eigs.min():.1e}"))
    c = 3.0
    brighter = DipoleScene(dipoles=scene.dipoles, a_in=c * scene.a_in)
    qb = ComplexField(q.grid, c * q.data)
    scaled = fisher_dipoles(brighter, tilts, qb, floor=1e-30)
    flux_rel = np.abs(scaled.matrix - c**2 * fm.matrix).max() / np.abs(fm.matrix).max() / c**2
    checks.append(("fisher-flux-squared", flux_rel <= 1e-12, f"rel {flux_rel:.1e}"))

    # analytic gradients of both fit costs against central differences
    ext = GridSpec(nx=61, ny=61, dx=q.grid.dx, dy=q.grid.dy)
    omega = make_omega(tilts, na, k, ext)
    fun_d, grad_d = make_dipole_objective(object_spectrum(scene, ext), omega)
    theta_d = scene.theta * np.array([1.2, 1.01, 1.0, 0.8, 0.99, 1.02]) + np.array(
        [0.0, 0.0, 0.15, 0.0, 0.0, -0.1]
    )
    rect = RectPtycho()
    grid_r = rect.obj_grid()
    fun_r, grad_r = make_rect_objective(
        rect_spectrum_model(RectParams.from_theta(np.array(rect.params)), grid_r), grid_r
    )
    grad_ok = True
    worst = 0.0
    for fun, grad, theta in ((fun_d, grad_d, theta_d), (fun_r, grad_r, rect.guess_theta())):
        gv = grad(theta)
        for i in range(theta.size):
            h = 1e-6 * max(abs(theta[i]), 1.0)
            tp, tm = theta.copy(), theta.copy()
            tp[i] += h
            tm[i] -= h
            fd_i = (fun(tp) - fun(tm)) / (2.0 * h)
            err = abs(gv[i] - fd_i) / max(abs(fd_i), 1e-8 * np.abs(gv).max())
            worst = max(worst, err)
            grad_ok &= err <= 1e-5
    checks.append(("gradient-vs-fd", grad_ok, f"worst rel {worst:.1e} (tol 1e-5)"))

    # reconstruction support invariant: nothing appears outside the coverage
    cells = tilt_cells(tilts, q.grid)
    meas = np.stack([dark_field_intensity(scene, t, q) for t in tilts])
    res = fourier_pty_reconstruct(meas, q, cells, omega, ReconConfig(max_iters=40, tol=0.0))
    support_ok = bool(np.all(res.estimate.data[~omega.mask] == 0.0))
    checks.append(("omega-support-invariant", support_ok, "exact zeros off support"))

    # box-constrained minimizer feasibility, including clamped targets
    feasible = True
    for _ in range(20):
        lo = rng.uniform(-2.0, 0.0, size=2)
        hi = rng.uniform(0.5, 2.0, size=2)
        target = rng.uniform(-3.0, 3.0, size=2)
        weights = rng.uniform(0.5, 3.0, size=2)
        box = BoxBounds(lower=lo, upper=hi)
        res_fit = box_minimize(
            lambda t: float(np.sum(weights * (t - target) ** 2)),
            np.clip(np.zeros(2), lo, hi),
            box,
            grad=lambda t: 2.0 * weights * (t - target),
        )
        feasible &= bool(box.contains(res_fit.theta))
        feasible &= bool(np.allclose(res_fit.theta, np.clip(target, lo, hi), atol=1e-5))
    checks.append(("box-feasibility", feasible, "20 clamped quadratics"))

    failed = [name for name, good, _ in checks if not good]
    ok = not failed
    detail = "; ".join(f"{name} {'OK' if good else 'FAIL'} ({info})" for name, good, info in checks)
    _emit(capsys, f"criterion 8 (property suites): {'PASS' if ok else 'FAIL'} — {detail}")
    assert ok, f"property checks failed: {failed}"

"""Seeded Monte Carlo campaigns checking estimator variance against the
information-theoretic lower bound.

A campaign draws ``trials`` independent Poisson realizations of the
noise-free view intensities, runs the full estimation pipeline on each
(iterative reconstruction, gauge anchoring, parameter fit) and reduces the
per-trial estimates to sample variance and squared bias per parameter,
side by side with the lower-bound diagonal.

Reproducibility: trial ``t`` uses a counter-based generator keyed by
``base_seed + t``, so results are independent of worker count and of any
other consumer of the global random state.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fields import ComplexField, fft2, reciprocal_grid
from .fisher_crlb import CrlbReport, crlb, fisher_dipoles, fisher_rect
from .fit import DetectionError, NonFiniteCostError, dipole_initial_guess, fit_dipoles, fit_rect
from .forward_dipole import object_spectrum
from .forward_rect import RECT_THETA_NAMES
from .presets import DipoleDarkField, RectPtycho, dipole_reference, rect_reference
from .recon import (
    DivergenceError,
    ReconConfig,
    anchor_phase,
    fourier_pty_reconstruct,
    pie_reconstruct,
)

_KINDS = ("dipole", "rect")

# reconstruction budgets per model kind: (max sweeps, relative cost tolerance)
_RECON_DEFAULTS = {
    "dipole": (60, 1e-9),
    "rect": (250, 1e-10),
}


class CampaignError(RuntimeError):
    """Raised when too many trials fail to produce a usable estimate."""


@dataclass(frozen=True)
class TrialPlan:
    """Specification of one Monte Carlo campaign."""

    kind: str
    photon_number: float
    trials: int = 200
    base_seed: int = 20260825
    workers: int = 1
    alpha2_factor: float = 1.0  # dipole campaigns: strength scale of scatterer 2
    b1: Optional[float] = None  # rect campaigns: override the rectangle height
    recon_iters: Optional[int] = None
    recon_tol: Optional[float] = None
    # first-order debias of the Poisson modulus targets; see ReconConfig
    amplitude_offset: float = 0.25
    max_failure_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"kind must be one of {_KINDS}, got {self.kind!r}")
        if self.photon_number <= 0.0:
            raise ValueError(f"photon_number must be positive, got {self.photon_number}")
        if self.trials < 2:
            raise ValueError(f"need at least 2 trials for a variance, got {self.trials}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")

    def recon_config(self) -> ReconConfig:
        iters, tol = _RECON_DEFAULTS[self.kind]
        return ReconConfig(
            max_iters=self.recon_iters if self.recon_iters is not None else iters,
            tol=self.recon_tol if self.recon_tol is not None else tol,
            amplitude_offset=self.amplitude_offset,
        )


@dataclass
class McReport:
    """Campaign summary: per-parameter moments next to the lower bound."""

    kind: str
    photon_number: float
    base_seed: int
    names: tuple[str, ...]
    truth: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    bias_sq: np.ndarray
    crlb_values: np.ndarray
    trials_requested: int
    trials_used: int
    failures: int
    failure_reasons: dict = field(default_factory=dict)

    def variance_ratio(self) -> np.ndarray:
        """Sample variance over lower bound, parameter by parameter."""
        return self.variance / self.crlb_values

    def value(self, name: str, which: str = "variance") -> float:
        i = self.names.index(name)
        return float(getattr(self, which)[i])

    def rows(self) -> list[dict]:
        """Flat per-parameter records, convenient for CSV export."""
        out = []
        for i, name in enumerate(self.names):
            out.append(
                {
                    "parameter": name,
                    "truth": float(self.truth[i]),
                    "mean": float(self.mean[i]),
                    "variance": float(self.variance[i]),
                    "bias_sq": float(self.bias_sq[i]),
                    "crlb": float(self.crlb_values[i]),
                    "variance_over_crlb": float(self.variance[i] / self.crlb_values[i]),
                }
            )
        return out


def sample_poisson(intensity: np.ndarray, seed: int) -> np.ndarray:
    """Poisson photon counts for the given expected intensities.

    Uses a counter-based generator keyed by ``seed`` alone, so each seed
    yields an independent, reproducible stream.
    """
    intensity = np.asarray(intensity, dtype=float)
    if np.any(intensity < 0.0):
        raise ValueError("expected intensities must be non-negative")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    return rng.poisson(intensity)


def calibrate_flux(kind: str, photon_number: float, **kwargs):
    """Return the reference configuration rescaled to the given photon budget."""
    if kind == "dipole":
        return dipole_reference(pn=photon_number, alpha2_factor=kwargs.get("alpha2_factor", 1.0))
    if kind == "rect":
        return rect_reference(pn=photon_number, b1=kwargs.get("b1"))
    raise ValueError(f"kind must be one of {_KINDS}, got {kind!r}")


def variance_bias(estimates: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample variance (ddof=1) and squared bias of stacked estimates.

    ``estimates`` has shape (trials, n_params).
    """
    estimates = np.asarray(estimates, dtype=float)
    if estimates.ndim != 2 or estimates.shape[0] < 2:
        raise ValueError("need a (trials >= 2, n_params) array of estimates")
    var = estimates.var(axis=0, ddof=1)
    bias_sq = (estimates.mean(axis=0) - np.asarray(truth, dtype=float)) ** 2
    return var, bias_sq


class _DipoleCampaign:
    """Precomputed state shared by every trial of a dipole campaign."""

    def __init__(self, plan: TrialPlan):
        self.plan = plan
        cfg = dipole_reference(pn=plan.photon_number, alpha2_factor=plan.alpha2_factor)
        self.cfg = cfg
        self.scene = cfg.scene()
        self.q = cfg.q()
        self.cells = cfg.cells()
        self.omega = cfg.omega()
        self.camera_grid = cfg.camera_grid()
        self.ext_kgrid = cfg.ext_kgrid()
        self.intensity = cfg.intensities()
        self.recon_cfg = plan.recon_config()
        self.truth = self.scene.theta
        self.names = self.scene.theta_names()
        truth_spec = object_spectrum(self.scene, self.ext_kgrid).data
        self.anchor_ref = np.where(self.omega.mask, truth_spec, 0.0)
        self.q_power = self.q.power()

    def crlb_report(self) -> CrlbReport:
        fisher = fisher_dipoles(self.scene, self.cfg.tilts(), self.q)
        return crlb(fisher, pn=self.plan.photon_number)

    def run_trial(self, t: int) -> tuple[Optional[np.ndarray], Optional[str]]:
        counts = sample_poisson(self.intensity, self.plan.base_seed + t).astype(float)
        try:
            recon = fourier_pty_reconstruct(counts, self.q, self.cells, self.omega, self.recon_cfg)
        except DivergenceError:
            return None, "reconstruction diverged"
        est = anchor_phase(recon.estimate.data, self.anchor_ref)
        spectrum = ComplexField(self.ext_kgrid, est)
        try:
            theta0, bounds = dipole_initial_guess(
                counts.sum(axis=0),
                self.camera_grid,
                n=self.scene.n,
                q_power=self.q_power,
                n_views=len(self.cells),
            )
            result = fit_dipoles(spectrum, self.omega, theta0, bounds)
        except (DetectionError, NonFiniteCostError) as exc:
            return None, type(exc).__name__
        if not result.converged:
            return None, "fit did not converge"
        if result.active.any():
            return None, "fit ended on a bound"
        return result.theta, None


class _RectCampaign:
    """Precomputed state shared by every trial of a rectangle campaign."""

    def __init__(self, plan: TrialPlan):
        self.plan = plan
        cfg = rect_reference(pn=plan.photon_number, b1=plan.b1)
        self.cfg = cfg
        self.obj_grid = cfg.obj_grid()
        self.views = cfg.views()
        self.intensity = cfg.intensities()
        self.recon_cfg = plan.recon_config()
        rect = cfg.rect()
        self.rect = rect
        self.truth = rect.theta
        self.names = RECT_THETA_NAMES
        self.anchor_ref = cfg.object_field().data
        self.guess = cfg.guess_theta()
        self.bounds = cfg.fit_bounds(self.guess)
        # fallback starts for trials where the default guess drops into the
        # mirror basin (phase off by ~pi with compensating transmission);
        # quarter-period phase shifts reliably cross back
        self.retry_starts = []
        for dphi in (-np.pi / 2, np.pi / 2, -np.pi / 4, np.pi / 4):
            start = self.guess.copy()
            start[1] += dphi
            self.retry_starts.append(np.clip(start, self.bounds.lower, self.bounds.upper))

    def crlb_report(self) -> CrlbReport:
        probes, origins = self.cfg.probes_and_origins()
        fisher = fisher_rect(self.rect, probes, origins, self.obj_grid)
        return crlb(fisher, pn=self.plan.photon_number)

    def run_trial(self, t: int) -> tuple[Optional[np.ndarray], Optional[str]]:
        counts = sample_poisson(self.intensity, self.plan.base_seed + t).astype(float)
        try:
            recon = pie_reconstruct(counts, self.views, self.obj_grid, self.recon_cfg)
        except DivergenceError:
            return None, "reconstruction diverged"
        est = anchor_phase(recon.estimate.data, self.anchor_ref)
        spec_hat = fft2(ComplexField(self.obj_grid, est - 1.0))
        best = None
        try:
            for start in [self.guess] + self.retry_starts:
                result = fit_rect(spec_hat, self.obj_grid, start, self.bounds)
                if result.converged and not result.active.any():
                    if best is None or result.cost < best.cost:
                        best = result
                    if start is self.guess:
                        break  # default start landed in the interior: accept
        except NonFiniteCostError as exc:
            return None, type(exc).__name__
        if best is None:
            return None, "fit did not converge or ended on a bound"
        return best.theta, None


def _make_campaign(plan: TrialPlan):
    return _DipoleCampaign(plan) if plan.kind == "dipole" else _RectCampaign(plan)


_WORKER_CAMPAIGN = None


def _worker_init(plan: TrialPlan) -> None:
    global _WORKER_CAMPAIGN
    _WORKER_CAMPAIGN = _make_campaign(plan)


def _worker_trial(t: int):
    return _WORKER_CAMPAIGN.run_trial(t)


def run_campaign(plan: TrialPlan, progress=None) -> McReport:
    """Run a full campaign and reduce it to an :class:`McReport`.

    ``progress`` may be a callable taking (completed, total); it is invoked
    after every trial in single-worker mode.

    Raises :class:`CampaignError` when more than ``plan.max_failure_fraction``
    of the trials fail (non-converged fit, estimate stuck on a bound, or a
    diverged reconstruction).
    """
    campaign = _make_campaign(plan)
    results: list[tuple[Optional[np.ndarray], Optional[str]]] = []
    if plan.workers == 1:
        for t in range(plan.trials):
            results.append(campaign.run_trial(t))
            if progress is not None:
                progress(t + 1, plan.trials)
    else:
        with ProcessPoolExecutor(
            max_workers=plan.workers, initializer=_worker_init, initargs=(plan,)
        ) as pool:
            results = list(pool.map(_worker_trial, range(plan.trials), chunksize=1))

    estimates = [theta for theta, _ in results if theta is not None]
    reasons: dict[str, int] = {}
    for theta, reason in results:
        if theta is None:
            reasons[reason] = reasons.get(reason, 0) + 1
    failures = plan.trials - len(estimates)
    if failures > plan.max_failure_fraction * plan.trials:
        raise CampaignError(
            f"{failures}/{plan.trials} trials failed ({reasons}); "
            f"exceeds the allowed fraction {plan.max_failure_fraction}"
        )

    stacked = np.array(estimates)
    var, bias_sq = variance_bias(stacked, campaign.truth)
    report = campaign.crlb_report()
    return McReport(
        kind=plan.kind,
        photon_number=plan.photon_number,
        base_seed=plan.base_seed,
        names=tuple(campaign.names),
        truth=np.asarray(campaign.truth, dtype=float),
        mean=stacked.mean(axis=0),
        variance=var,
        bias_sq=bias_sq,
        crlb_values=np.asarray(report.values, dtype=float),
        trials_requested=plan.trials,
        trials_used=len(estimates),
        failures=failures,
        failure_reasons=reasons,
    )

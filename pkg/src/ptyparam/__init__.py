"""Parameter retrieval for ptychographic measurements.

Simulates two reference experiments (dark-field tilt series over point
scatterers; real-space scanning ptychography of a rectangle), reconstructs
the complex field from intensity-only data, fits physical parameters to the
reconstruction, and compares estimator statistics against the Poisson-noise
information bound.
"""

from .cli import ConfigError, ExperimentConfig, main
from .fields import (
    ComplexField,
    GridSpec,
    InvalidFieldError,
    OmegaMask,
    PupilMask,
    fft2,
    ifft2,
    make_omega,
    read_ptyf,
    reciprocal_grid,
    write_ptyf,
)
from .fisher_crlb import (
    CrlbReport,
    FisherMatrix,
    crlb,
    fisher_dipoles,
    fisher_finite_difference,
    fisher_rect,
    fisher_rect_edge_terms,
    fisher_single_dipole_closed,
)
from .fit import (
    BoxBounds,
    DetectionError,
    FitResult,
    NonFiniteCostError,
    box_minimize,
    dipole_cost,
    dipole_initial_guess,
    fit_dipoles,
    fit_rect,
    rect_spectrum_cost,
)
from .forward_dipole import (
    Dipole,
    DipoleScene,
    TiltSet,
    dark_field_intensity,
    object_spectrum,
    photon_count_dipole,
    pupil_field,
    q_factor,
    snap_tilts,
    sphere_polarisability,
    tilt_cells,
)
from .forward_rect import (
    RECT_THETA_NAMES,
    RectParams,
    ScanPlan,
    band_limited_object,
    exit_wave,
    far_field_intensity,
    fresnel_number,
    gaussian_probe,
    probe_photon_count,
    raster_scan_plan,
    rect_spectrum_jacobian,
    rect_spectrum_model,
    scan_probes,
    window_origins,
)
from .montecarlo import (
    CampaignError,
    McReport,
    TrialPlan,
    calibrate_flux,
    run_campaign,
    sample_poisson,
    variance_bias,
)
from .presets import DipoleDarkField, RectPtycho, dipole_reference, rect_reference
from .recon import (
    DivergenceError,
    ReconConfig,
    ReconResult,
    ViewSet,
    anchor_phase,
    fourier_pty_reconstruct,
    mle_poisson_refine,
    modulus_projection,
    pie_reconstruct,
    poisson_nll,
    poisson_nll_total,
    tilt_views,
)

__version__ = "0.1.0"

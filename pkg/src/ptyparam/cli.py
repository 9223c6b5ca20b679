"""Declarative experiment runner.

One command per process::

    ptyparam simulate    config.toml [--output-dir DIR]
    ptyparam reconstruct config.toml [--output-dir DIR]
    ptyparam fit         config.toml [--output-dir DIR]
    ptyparam crlb        config.toml [--output-dir DIR]
    ptyparam montecarlo  config.toml [--output-dir DIR] [--threads N]
    ptyparam report      RUNDIR      [--output-dir DIR] [--check]

Configs are TOML.  ``application`` selects the model ("dipole-darkfield" or
"rect-ptycho"); the ``[geometry]``, ``[scene]``, ``[recon]``, ``[noise]``,
``[sweeps]`` and ``[output]`` tables override the built-in reference values.
Unknown keys are rejected.  Every length is a string ``"VALUE UNIT"`` with
unit ``nm``, ``um`` or ``lambda``; angles are plain numbers in degrees
(keys ending in ``_deg``) or radians (the rectangle phase).

Commands compose through a shared output directory: ``simulate`` writes one
PTYF intensity file per view plus ``manifest.csv``; ``reconstruct`` reads
them and writes ``recon.ptyf`` + ``recon_summary.csv``; ``fit`` reads the
reconstruction and writes ``fit.csv``; ``crlb`` and ``montecarlo`` write
``crlb.csv`` / ``mc.csv`` directly from the config; ``report`` turns a run
directory into plot-ready curve CSVs and small SVG charts, and with
``--check`` verifies the scaling/ordering/bounding properties of whatever
curves are present.

Exit codes: 0 ok, 2 configuration or input error, 3 numerical failure,
4 report check failure.  Errors are emitted as one JSON object on stderr.
Every output file is written atomically (temp file + rename), and all
outputs are byte-deterministic for a fixed config and seed except for the
timestamp comment on the first line of each CSV/SVG.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Union

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from .fields import ComplexField, InvalidFieldError, fft2, read_ptyf, reciprocal_grid, write_ptyf
from .fisher_crlb import FisherMatrix, crlb, fisher_dipoles, fisher_rect
from .fit import DetectionError, NonFiniteCostError, dipole_initial_guess, fit_dipoles, fit_rect
from .forward_dipole import object_spectrum
from .forward_rect import RECT_THETA_NAMES
from .montecarlo import CampaignError, TrialPlan, run_campaign
from .presets import DipoleDarkField, RectPtycho
from .recon import (
    DivergenceError,
    ReconConfig,
    anchor_phase,
    fourier_pty_reconstruct,
    pie_reconstruct,
)

APPLICATIONS = ("dipole-darkfield", "rect-ptycho")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_CHECK = 4

_NUMERICAL_ERRORS = (
    DivergenceError,
    NonFiniteCostError,
    DetectionError,
    CampaignError,
    np.linalg.LinAlgError,
    FloatingPointError,
)


class ConfigError(ValueError):
    """Bad configuration or missing/invalid input file."""

    def __init__(self, message: str, where: str | None = None):
        super().__init__(message)
        self.where = where


class CheckFailure(RuntimeError):
    """One or more report checks failed; carries the failing check names."""

    def __init__(self, failed: list[str]):
        super().__init__("checks failed: " + ", ".join(failed))
        self.failed = failed


# --- units and schema helpers ----------------------------------------------

_ABSOLUTE_UNITS = {"nm": 1e-9, "um": 1e-6, "µm": 1e-6}
_RELATIVE_UNITS = ("lambda", "λ")


def _split_length(raw, where: str) -> tuple[float, str]:
    if not isinstance(raw, str):
        raise ConfigError(
            f"lengths are 'VALUE UNIT' strings (units nm, um, lambda), got {raw!r}", where
        )
    parts = raw.split()
    if len(parts) != 2:
        raise ConfigError(f"cannot parse length {raw!r}; expected 'VALUE UNIT'", where)
    try:
        value = float(parts[0])
    except ValueError:
        raise ConfigError(f"cannot parse length value in {raw!r}", where) from None
    unit = parts[1]
    if unit not in _ABSOLUTE_UNITS and unit not in _RELATIVE_UNITS:
        raise ConfigError(f"unknown length unit {unit!r} (use nm, um or lambda)", where)
    return value, unit


def length_in_lambda(raw, where: str, wavelength_nm: float) -> float:
    """Parse a 'VALUE UNIT' length into wavelengths."""
    value, unit = _split_length(raw, where)
    if unit in _RELATIVE_UNITS:
        return value
    return value * _ABSOLUTE_UNITS[unit] / (wavelength_nm * 1e-9)


def length_in_um(raw, where: str, wavelength_nm: float) -> float:
    value, unit = _split_length(raw, where)
    if unit in _RELATIVE_UNITS:
        return value * wavelength_nm * 1e-3
    return value * _ABSOLUTE_UNITS[unit] / 1e-6


def wavelength_nm_of(raw, where: str) -> float:
    """The wavelength itself must be absolute (nm or um)."""
    value, unit = _split_length(raw, where)
    if unit in _RELATIVE_UNITS:
        raise ConfigError("the wavelength cannot be given in wavelengths", where)
    nm = value * _ABSOLUTE_UNITS[unit] / 1e-9
    if nm <= 0:
        raise ConfigError(f"wavelength must be positive, got {raw!r}", where)
    return nm


def _reject_unknown(block: dict, allowed: tuple[str, ...], where: str) -> None:
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}; allowed: {sorted(allowed)}", where)


def _typed(block: dict, key: str, kind: type, where: str, default):
    if key not in block:
        return default
    value = block[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ConfigError(f"expected {kind.__name__}, got {value!r}", f"{where}.{key}")
    return value


# --- resolved configuration --------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully resolved experiment: model preset plus run policy.

    ``preset`` carries the geometry, the scene and (when a photon number is
    configured) the calibrated flux.  ``recon_overrides`` holds only the keys
    the user actually set, so commands can tell an explicit choice from a
    default.
    """

    application: str
    preset: Union[DipoleDarkField, RectPtycho]
    recon_overrides: dict
    photon_number: Optional[float]
    trials: int
    base_seed: int
    sweep_photon_numbers: tuple[float, ...]
    sweep_alpha2_factors: tuple[float, ...]
    sweep_b1: tuple[float, ...]
    output_dir: Optional[str]
    rect_guess: Optional[np.ndarray]

    @property
    def kind(self) -> str:
        return "dipole" if self.application == "dipole-darkfield" else "rect"

    def recon_config(self, **defaults) -> ReconConfig:
        merged = {**defaults, **self.recon_overrides}
        try:
            return ReconConfig(**merged)
        except ValueError as exc:
            raise ConfigError(str(exc), "recon") from None

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        _reject_unknown(
            data, ("application", "geometry", "scene", "recon", "noise", "sweeps", "output"), "top level"
        )
        application = data.get("application")
        if application not in APPLICATIONS:
            raise ConfigError(
                f"application must be one of {list(APPLICATIONS)}, got {application!r}", "application"
            )
        for key in ("geometry", "scene", "recon", "noise", "sweeps", "output"):
            if key in data and not isinstance(data[key], dict):
                raise ConfigError("expected a table", key)

        if application == "dipole-darkfield":
            preset = _dipole_preset(data.get("geometry", {}), data.get("scene", {}))
            rect_guess = None
        else:
            preset, rect_guess = _rect_preset(data.get("geometry", {}), data.get("scene", {}))

        recon = data.get("recon", {})
        _reject_unknown(
            recon, ("max_iters", "beta", "tol", "order", "seed", "amplitude_offset"), "recon"
        )
        overrides = {
            "max_iters": _typed(recon, "max_iters", int, "recon", None),
            "beta": _typed(recon, "beta", float, "recon", None),
            "tol": _typed(recon, "tol", float, "recon", None),
            "order": _typed(recon, "order", str, "recon", None),
            "seed": _typed(recon, "seed", int, "recon", None),
            "amplitude_offset": _typed(recon, "amplitude_offset", float, "recon", None),
        }
        overrides = {k: v for k, v in overrides.items() if v is not None}

        noise = data.get("noise", {})
        _reject_unknown(noise, ("photon_number", "trials", "base_seed"), "noise")
        photon_number = _typed(noise, "photon_number", float, "noise", None)
        if photon_number is not None and photon_number <= 0:
            raise ConfigError(f"photon_number must be positive, got {photon_number}", "noise")
        trials = _typed(noise, "trials", int, "noise", 200)
        base_seed = _typed(noise, "base_seed", int, "noise", 20260825)

        if photon_number is not None:
            try:
                preset = preset.with_photon_number(photon_number)
            except (ValueError, IndexError) as exc:
                raise ConfigError(f"cannot calibrate flux: {exc}", "noise.photon_number") from None

        sweeps = data.get("sweeps", {})
        _reject_unknown(sweeps, ("photon_numbers", "alpha2_factors", "b1_values"), "sweeps")
        sweep_pn = tuple(
            float(v) for v in _float_list(sweeps.get("photon_numbers", []), "sweeps.photon_numbers")
        )
        sweep_alpha2 = tuple(
            float(v) for v in _float_list(sweeps.get("alpha2_factors", []), "sweeps.alpha2_factors")
        )
        if application == "rect-ptycho":
            raw_b1 = sweeps.get("b1_values", [])
            if not isinstance(raw_b1, list):
                raise ConfigError("expected an array of lengths", "sweeps.b1_values")
            sweep_b1 = tuple(
                length_in_lambda(v, "sweeps.b1_values", preset.wavelength_nm) for v in raw_b1
            )
            if sweep_alpha2:
                raise ConfigError("alpha2_factors applies to dipole-darkfield only", "sweeps")
        else:
            sweep_b1 = ()
            if sweeps.get("b1_values"):
                raise ConfigError("b1_values applies to rect-ptycho only", "sweeps")

        output = data.get("output", {})
        _reject_unknown(output, ("directory",), "output")
        output_dir = _typed(output, "directory", str, "output", None)

        return cls(
            application=application,
            preset=preset,
            recon_overrides=overrides,
            photon_number=photon_number,
            trials=trials,
            base_seed=base_seed,
            sweep_photon_numbers=sweep_pn,
            sweep_alpha2_factors=sweep_alpha2,
            sweep_b1=sweep_b1,
            output_dir=output_dir,
            rect_guess=rect_guess,
        )


def _float_list(raw, where: str) -> list[float]:
    if not isinstance(raw, list):
        raise ConfigError("expected an array of numbers", where)
    out = []
    for v in raw:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"expected a number, got {v!r}", where)
        out.append(float(v))
    return out


def _dipole_preset(geometry: dict, scene: dict) -> DipoleDarkField:
    _reject_unknown(
        geometry,
        (
            "wavelength",
            "na",
            "polar_deg",
            "n_tilts",
            "detector_pixels",
            "detector_pitch",
            "grid_pixels",
            "magnification",
            "incident_amplitude",
        ),
        "geometry",
    )
    base = DipoleDarkField()
    wl = wavelength_nm_of(geometry["wavelength"], "geometry.wavelength") if "wavelength" in geometry else base.wavelength_nm
    fields = dict(
        wavelength_nm=wl,
        na=_typed(geometry, "na", float, "geometry", base.na),
        polar_deg=_typed(geometry, "polar_deg", float, "geometry", base.polar_deg),
        n_tilts=_typed(geometry, "n_tilts", int, "geometry", base.n_tilts),
        det_n=_typed(geometry, "detector_pixels", int, "geometry", base.det_n),
        ext_n=_typed(geometry, "grid_pixels", int, "geometry", base.ext_n),
        magnification=_typed(geometry, "magnification", float, "geometry", base.magnification),
        a_in=_typed(geometry, "incident_amplitude", float, "geometry", base.a_in),
    )
    if "detector_pitch" in geometry:
        fields["det_dx"] = length_in_lambda(geometry["detector_pitch"], "geometry.detector_pitch", wl)

    _reject_unknown(scene, ("dipoles",), "scene")
    if "dipoles" in scene:
        raw = scene["dipoles"]
        if not isinstance(raw, list):
            raise ConfigError("expected an array of dipole tables", "scene.dipoles")
        dipoles = []
        for i, entry in enumerate(raw):
            where = f"scene.dipoles[{i}]"
            if not isinstance(entry, dict):
                raise ConfigError("each dipole is a table {alpha=..., x=..., y=...}", where)
            _reject_unknown(entry, ("alpha", "x", "y"), where)
            for key in ("alpha", "x", "y"):
                if key not in entry:
                    raise ConfigError(f"missing key {key!r}", where)
            alpha = entry["alpha"]
            if isinstance(alpha, bool) or not isinstance(alpha, (int, float)):
                raise ConfigError("alpha is a plain number (units of wavelength^3)", where)
            dipoles.append(
                (
                    float(alpha),
                    length_in_lambda(entry["x"], f"{where}.x", wl),
                    length_in_lambda(entry["y"], f"{where}.y", wl),
                )
            )
        fields["dipoles"] = tuple(dipoles)
    try:
        preset = replace(base, **fields)
    except ValueError as exc:
        raise ConfigError(str(exc), "geometry") from None
    # fail now, not mid-command: building the derived objects runs every
    # geometric consistency check (grids, tilt set, aperture, snapping)
    try:
        preset.scene()
    except ValueError as exc:
        raise ConfigError(str(exc), "scene.dipoles") from None
    try:
        preset.kgrid()
        preset.ext_kgrid()
        preset.cells()
        preset.q()
    except ValueError as exc:
        raise ConfigError(str(exc), "geometry") from None
    return preset


_RECT_SCENE_KEYS = ("transmission", "phase", "width", "height", "x", "y")


def _rect_theta(block: dict, where: str, wl: float, fallback: np.ndarray) -> np.ndarray:
    theta = np.array(fallback, dtype=float)
    for i, key in enumerate(_RECT_SCENE_KEYS):
        if key not in block:
            continue
        if key in ("transmission", "phase"):
            value = block[key]
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError("expected a plain number", f"{where}.{key}")
            theta[i] = float(value)
        else:
            theta[i] = length_in_lambda(block[key], f"{where}.{key}", wl)
    return theta


def _rect_preset(geometry: dict, scene: dict) -> tuple[RectPtycho, Optional[np.ndarray]]:
    _reject_unknown(
        geometry,
        (
            "wavelength",
            "object_pixels",
            "pixel_pitch",
            "window_pixels",
            "probe_radius",
            "probe_fwhm",
            "probe_scale",
            "scan_points",
            "scan_pitch",
            "detector_pixel",
            "distance",
        ),
        "geometry",
    )
    base = RectPtycho()
    wl = wavelength_nm_of(geometry["wavelength"], "geometry.wavelength") if "wavelength" in geometry else base.wavelength_nm
    fields = dict(
        wavelength_nm=wl,
        obj_n=_typed(geometry, "object_pixels", int, "geometry", base.obj_n),
        win_n=_typed(geometry, "window_pixels", int, "geometry", base.win_n),
        probe_scale=_typed(geometry, "probe_scale", float, "geometry", base.probe_scale),
        scan_n=_typed(geometry, "scan_points", int, "geometry", base.scan_n),
    )
    for key, field_name in (
        ("pixel_pitch", "dx"),
        ("probe_radius", "probe_radius"),
        ("probe_fwhm", "probe_fwhm"),
        ("scan_pitch", "scan_pitch"),
    ):
        if key in geometry:
            fields[field_name] = length_in_lambda(geometry[key], f"geometry.{key}", wl)
    if "detector_pixel" in geometry:
        fields["det_pixel_um"] = length_in_um(geometry["detector_pixel"], "geometry.detector_pixel", wl)
    if "distance" in geometry:
        fields["distance_cm"] = length_in_um(geometry["distance"], "geometry.distance", wl) * 1e-4

    allowed = _RECT_SCENE_KEYS + ("guess",)
    _reject_unknown(scene, allowed, "scene")
    truth = _rect_theta(scene, "scene", wl, np.array(base.params))
    fields["params"] = tuple(float(v) for v in truth)

    guess = None
    if "guess" in scene:
        if not isinstance(scene["guess"], dict):
            raise ConfigError("expected a table", "scene.guess")
        _reject_unknown(scene["guess"], _RECT_SCENE_KEYS, "scene.guess")
        preset_tmp = replace(base, **fields)
        guess = _rect_theta(scene["guess"], "scene.guess", wl, preset_tmp.guess_theta())

    try:
        preset = replace(base, **fields)
    except ValueError as exc:
        raise ConfigError(str(exc), "geometry") from None
    # fail now, not mid-command: building the derived objects runs every
    # geometric consistency check (grids, probe, scan coverage)
    try:
        preset.rect()
    except ValueError as exc:
        raise ConfigError(str(exc), "scene") from None
    try:
        preset.probes_and_origins()
    except ValueError as exc:
        raise ConfigError(str(exc), "geometry") from None
    return preset, guess


# --- deterministic file emission --------------------------------------------


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None:
        return ""
    return "%.12g" % float(value)


def _stamp(command: str) -> str:
    return "# ptyparam %s %s" % (command, datetime.now(timezone.utc).isoformat(timespec="seconds"))


def write_csv(path: Path, command: str, header: list[str], rows: list[list]) -> None:
    """CSV with a timestamp comment line, written atomically.

    Everything below the first line is byte-deterministic for fixed inputs.
    """
    buf = io.StringIO()
    buf.write(_stamp(command) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    _atomic_write_bytes(path, buf.getvalue().encode())


def read_csv_rows(path: Path) -> tuple[list[str], list[dict]]:
    """Read a CSV written by :func:`write_csv`, skipping comment lines."""
    if not path.is_file():
        raise ConfigError(f"missing input file: {path}")
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise ConfigError(f"empty CSV: {path}") from None
    return header, [dict(zip(header, row)) for row in reader]


# --- tiny SVG line charts (decoration; the CSVs are the contract) -----------

_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _svg_transform(values: np.ndarray, log: bool, lo: float, hi: float, a: float, b: float):
    v = np.log10(values) if log else np.asarray(values, dtype=float)
    span = (hi - lo) or 1.0
    return a + (v - lo) / span * (b - a)


def write_svg_chart(
    path: Path,
    command: str,
    title: str,
    xlabel: str,
    ylabel: str,
    x: np.ndarray,
    lines: dict[str, np.ndarray],
    points: dict[str, np.ndarray] | None = None,
    logx: bool = False,
    logy: bool = True,
) -> None:
    """A minimal static line chart; points overlay as circles."""
    width, height = 640, 420
    left, right, top, bottom = 80, 620, 50, 370
    points = points or {}
    x = np.asarray(x, dtype=float)
    ys = [np.asarray(v, dtype=float) for v in lines.values()]
    ys += [np.asarray(v, dtype=float)[np.isfinite(np.asarray(v, dtype=float))] for v in points.values()]
    all_y = np.concatenate([v[np.isfinite(v) & (v > 0 if logy else True)] for v in ys]) if ys else np.array([1.0])
    tx = np.log10(x) if logx else x
    ty = np.log10(all_y) if logy else all_y
    xlo, xhi = float(tx.min()), float(tx.max())
    ylo, yhi = float(ty.min()), float(ty.max())
    if xlo == xhi:
        xlo, xhi = xlo - 0.5, xhi + 0.5
    if ylo == yhi:
        ylo, yhi = ylo - 0.5, yhi + 0.5
    pad = 0.05 * (yhi - ylo)
    ylo, yhi = ylo - pad, yhi + pad

    def px(values):
        return _svg_transform(values, logx, xlo, xhi, left, right)

    def py(values):
        return _svg_transform(values, logy, ylo, yhi, bottom, top)

    parts = [
        "<!-- %s -->" % _stamp(command)[2:],
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{(left + right) / 2:.0f}" y="24" text-anchor="middle" font-size="15">{title}</text>',
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{bottom}" x2="{left}" y2="{top}" stroke="black"/>',
        f'<text x="{(left + right) / 2:.0f}" y="{height - 8}" text-anchor="middle">{xlabel}</text>',
        f'<text x="18" y="{(top + bottom) / 2:.0f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {(top + bottom) / 2:.0f})">{ylabel}</text>',
    ]
    # axis ticks: decades when logarithmic, five linear ticks otherwise
    if logx:
        ticks = range(math.ceil(xlo), math.floor(xhi) + 1)
        tick_vals = [(10.0**d, f"1e{d}") for d in ticks]
    else:
        tick_vals = [(xlo + f * (xhi - xlo), "%.4g" % (xlo + f * (xhi - xlo))) for f in (0, 0.25, 0.5, 0.75, 1)]
    for val, label in tick_vals:
        xp = float(px(np.array([val]))[0])
        parts.append(f'<line x1="{xp:.1f}" y1="{bottom}" x2="{xp:.1f}" y2="{bottom + 5}" stroke="black"/>')
        parts.append(f'<text x="{xp:.1f}" y="{bottom + 18}" text-anchor="middle">{label}</text>')
    if logy:
        ticks = range(math.ceil(ylo), math.floor(yhi) + 1)
        tick_vals = [(10.0**d, f"1e{d}") for d in ticks]
    else:
        tick_vals = [(ylo + f * (yhi - ylo), "%.4g" % (ylo + f * (yhi - ylo))) for f in (0, 0.5, 1)]
    for val, label in tick_vals:
        yp = float(py(np.array([val]))[0])
        parts.append(f'<line x1="{left - 5}" y1="{yp:.1f}" x2="{left}" y2="{yp:.1f}" stroke="black"/>')
        parts.append(f'<text x="{left - 8}" y="{yp + 4:.1f}" text-anchor="end">{label}</text>')

    legend_y = top + 6
    for i, (label, y) in enumerate(lines.items()):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        y = np.asarray(y, dtype=float)
        keep = np.isfinite(y) & ((y > 0) if logy else True)
        pts = " ".join(f"{float(a):.1f},{float(b):.1f}" for a, b in zip(px(x[keep]), py(y[keep])))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{right - 150}" y="{legend_y}" fill="{color}">{label}</text>')
        legend_y += 16
    for i, (label, y) in enumerate(points.items()):
        color = _SVG_COLORS[(len(lines) + i) % len(_SVG_COLORS)]
        y = np.asarray(y, dtype=float)
        keep = np.isfinite(y) & ((y > 0) if logy else True)
        for a, b in zip(px(x[keep]), py(y[keep])):
            parts.append(f'<circle cx="{float(a):.1f}" cy="{float(b):.1f}" r="4" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{right - 150}" y="{legend_y}" fill="{color}">{label}</text>')
        legend_y += 16
    parts.append("</svg>")
    _atomic_write_bytes(path, "\n".join(parts).encode())


# --- command implementations --------------------------------------------------


def _out_dir(config: Optional[ExperimentConfig], flag: Optional[str], fallback: str = ".") -> Path:
    chosen = flag or (config.output_dir if config else None) or fallback
    path = Path(chosen)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _view_name(j: int) -> str:
    return "view_%03d.ptyf" % j


def cmd_simulate(config: ExperimentConfig, outdir: Path) -> int:
    """Write one PTYF intensity file per view plus ``manifest.csv``."""
    preset = config.preset
    views_dir = outdir / "views"
    views_dir.mkdir(parents=True, exist_ok=True)
    if config.kind == "dipole":
        intensity = preset.intensities()
        grid = preset.kgrid()
        tilts = preset.tilts()
        cells = preset.cells()
        header = ["view", "tilt_kx", "tilt_ky", "cell_x", "cell_y"]
        rows = [
            [j, tilts[j, 0], tilts[j, 1], int(cells[j, 0]), int(cells[j, 1])]
            for j in range(len(cells))
        ]
    else:
        intensity = preset.intensities()
        grid = reciprocal_grid(preset.win_grid())
        shifts = preset.plan().shifts
        header = ["view", "shift_x", "shift_y"]
        rows = [[j, shifts[j, 0], shifts[j, 1]] for j in range(shifts.shape[0])]
    for j in range(intensity.shape[0]):
        write_ptyf(views_dir / _view_name(j), ComplexField(grid, intensity[j].astype(np.complex128)))
    write_csv(outdir / "manifest.csv", "simulate", header, rows)
    print(f"wrote {intensity.shape[0]} views and manifest.csv to {outdir}")
    return EXIT_OK


def _load_views(config: ExperimentConfig, outdir: Path) -> np.ndarray:
    _, rows = read_csv_rows(outdir / "manifest.csv")
    if not rows:
        raise ConfigError(f"manifest in {outdir} lists no views")
    stack = []
    for row in rows:
        path = outdir / "views" / _view_name(int(row["view"]))
        field = read_ptyf(path)
        data = field.data
        if np.max(np.abs(data.imag), initial=0.0) > 1e-9 * max(np.max(np.abs(data.real)), 1.0):
            raise ConfigError(f"view file {path} does not hold a real intensity")
        if np.any(data.real < 0):
            raise ConfigError(f"view file {path} holds negative intensities")
        stack.append(data.real)
    meas = np.stack(stack)
    expect = config.preset.intensities().shape
    if meas.shape != expect:
        raise ConfigError(
            f"measurements in {outdir} have shape {meas.shape}; the config expects {expect}"
        )
    return meas


def cmd_reconstruct(config: ExperimentConfig, outdir: Path) -> int:
    """Reconstruct the object (spectrum) from the simulated views in ``outdir``."""
    measurements = _load_views(config, outdir)
    preset = config.preset
    if config.kind == "dipole":
        rcfg = config.recon_config(max_iters=200, tol=1e-13)
        result = fourier_pty_reconstruct(measurements, preset.q(), preset.cells(), preset.omega(), rcfg)
    else:
        rcfg = config.recon_config(max_iters=400, tol=1e-13)
        result = pie_reconstruct(measurements, preset.views(), preset.obj_grid(), rcfg)
    write_ptyf(outdir / "recon.ptyf", result.estimate)
    write_csv(
        outdir / "recon_summary.csv",
        "reconstruct",
        ["sweeps", "converged", "final_cost"],
        [[result.sweeps, bool(result.converged), result.final_cost]],
    )
    write_csv(
        outdir / "cost_trace.csv",
        "reconstruct",
        ["sweep", "cost"],
        [[i + 1, cost] for i, cost in enumerate(result.trace)],
    )
    print(f"wrote recon.ptyf ({result.sweeps} sweeps, converged={result.converged}) to {outdir}")
    return EXIT_OK


def cmd_fit(config: ExperimentConfig, outdir: Path) -> int:
    """Fit scene parameters to ``recon.ptyf``; writes ``fit.csv``."""
    recon_path = outdir / "recon.ptyf"
    if not recon_path.is_file():
        raise ConfigError(f"missing input file: {recon_path} (run reconstruct first)")
    est_field = read_ptyf(recon_path)
    preset = config.preset
    if config.kind == "dipole":
        scene = preset.scene()
        if scene.n == 0:
            raise ConfigError("cannot fit an empty scene", "scene.dipoles")
        if est_field.grid.shape != preset.ext_kgrid().shape:
            raise ConfigError(
                f"recon grid {est_field.grid.shape} does not match the configured "
                f"extended grid {preset.ext_kgrid().shape}"
            )
        reference = np.where(preset.omega().mask, object_spectrum(scene, preset.ext_kgrid()).data, 0.0)
        anchored = anchor_phase(est_field.data, reference)
        counts = _load_views(config, outdir)
        theta0, bounds = dipole_initial_guess(
            counts.sum(axis=0),
            preset.camera_grid(),
            n=scene.n,
            q_power=preset.q().power(),
            n_views=preset.n_tilts,
        )
        result = fit_dipoles(ComplexField(preset.ext_kgrid(), anchored), preset.omega(), theta0, bounds)
        names, truth = scene.theta_names(), scene.theta
    else:
        if est_field.grid.shape != preset.obj_grid().shape:
            raise ConfigError(
                f"recon grid {est_field.grid.shape} does not match the configured "
                f"object grid {preset.obj_grid().shape}"
            )
        anchored = anchor_phase(est_field.data, preset.object_field().data)
        spec_hat = fft2(ComplexField(preset.obj_grid(), anchored - 1.0))
        theta0 = config.rect_guess if config.rect_guess is not None else preset.guess_theta()
        bounds = preset.fit_bounds(theta0)
        result = fit_rect(spec_hat, preset.obj_grid(), theta0, bounds)
        names, truth = RECT_THETA_NAMES, preset.rect().theta
    if not result.converged:
        raise NonFiniteCostError(f"fit did not converge: {result.message}")
    active = [
        "lower" if result.active_lower[i] else ("upper" if result.active_upper[i] else "")
        for i in range(len(names))
    ]
    rows = [
        [
            names[i],
            theta0[i],
            bounds.lower[i],
            bounds.upper[i],
            result.theta[i],
            truth[i],
            result.theta[i] - truth[i],
            active[i],
        ]
        for i in range(len(names))
    ]
    header = ["parameter", "guess", "lower", "upper", "estimate", "truth", "error", "active_bound"]
    write_csv(outdir / "fit.csv", "fit", header, rows)
    print(f"wrote fit.csv ({len(names)} parameters, cost {result.cost:.3e}) to {outdir}")
    return EXIT_OK


def _fisher_matrix(config: ExperimentConfig, preset) -> FisherMatrix:
    if config.kind == "dipole":
        return fisher_dipoles(preset.scene(), preset.tilts(), preset.q())
    probes, origins = preset.probes_and_origins()
    return fisher_rect(preset.rect(), probes, origins, preset.obj_grid())


def cmd_crlb(config: ExperimentConfig, outdir: Path) -> int:
    """Lower-bound sweeps; writes ``crlb.csv`` and the matrices behind it (``fisher.csv``)."""
    if config.photon_number is None:
        raise ConfigError("crlb needs noise.photon_number (the flux normalization)", "noise")
    preset = config.preset
    names = preset.scene().theta_names() if config.kind == "dipole" else RECT_THETA_NAMES
    rows: list[list] = []
    fisher_rows: list[list] = []

    def sweep_point(sweep: str, value, point_preset) -> None:
        fisher = _fisher_matrix(config, point_preset)
        values = crlb(fisher).values
        rows.extend([sweep, value, names[i], values[i]] for i in range(len(names)))
        fisher_rows.extend(
            [sweep, value, names[i], *fisher.matrix[i]] for i in range(len(names))
        )

    pn_values = config.sweep_photon_numbers or (config.photon_number,)
    for pn in pn_values:
        sweep_point("photon_number", pn, preset.with_photon_number(pn))
    for factor in config.sweep_alpha2_factors:
        sweep_point("alpha2_factor", factor, preset.with_alpha2_factor(factor))
    for b1 in config.sweep_b1:
        sweep_point("b1", b1, preset.with_b1(b1))

    write_csv(outdir / "crlb.csv", "crlb", ["sweep", "sweep_value", "parameter", "crlb"], rows)
    fisher_header = ["sweep", "sweep_value", "parameter", *names]
    write_csv(outdir / "fisher.csv", "crlb", fisher_header, fisher_rows)
    print(f"wrote crlb.csv ({len(rows)} rows) and fisher.csv to {outdir}")
    return EXIT_OK


def _campaign_plan(config: ExperimentConfig, workers: int) -> TrialPlan:
    """Map the config onto a reference campaign, rejecting unsupported scenes.

    Campaigns run against the two reference configurations; the supported
    degrees of freedom are the photon number, the strength of the second
    scatterer (dipole) and the rectangle height (rect).
    """
    if config.photon_number is None:
        raise ConfigError("montecarlo needs noise.photon_number", "noise")
    unsupported = set(config.recon_overrides) - {"max_iters", "tol", "amplitude_offset"}
    if unsupported:
        raise ConfigError(
            f"montecarlo campaigns fix the sweep policy; cannot override {sorted(unsupported)}",
            "recon",
        )
    extra = {}
    if "max_iters" in config.recon_overrides:
        extra["recon_iters"] = config.recon_overrides["max_iters"]
    if "tol" in config.recon_overrides:
        extra["recon_tol"] = config.recon_overrides["tol"]
    if "amplitude_offset" in config.recon_overrides:
        extra["amplitude_offset"] = config.recon_overrides["amplitude_offset"]

    if config.kind == "dipole":
        reference = DipoleDarkField().with_photon_number(config.photon_number)
        given = config.preset
        factor = None
        if len(given.dipoles) == len(reference.dipoles) == 2:
            d_ref, d_got = reference.dipoles, given.dipoles
            same_first = d_got[0] == d_ref[0]
            same_pos2 = d_got[1][1:] == d_ref[1][1:]
            if same_first and same_pos2 and d_ref[1][0] != 0:
                factor = d_got[1][0] / d_ref[1][0]
        if factor is None or replace(given, dipoles=reference.dipoles) != reference:
            raise ConfigError(
                "montecarlo supports the reference two-scatterer scene "
                "(optionally rescaling the second strength); edit trials/photon_number instead",
                "scene",
            )
        return TrialPlan(
            kind="dipole",
            photon_number=config.photon_number,
            trials=config.trials,
            base_seed=config.base_seed,
            workers=workers,
            alpha2_factor=factor,
            **extra,
        )

    reference = RectPtycho().with_photon_number(config.photon_number)
    given = config.preset
    b1 = given.params[3]
    if replace(given, params=reference.params) != reference or (
        given.params[:3] + given.params[4:] != reference.params[:3] + reference.params[4:]
    ):
        raise ConfigError(
            "montecarlo supports the reference rectangle scene "
            "(optionally overriding the height); edit trials/photon_number instead",
            "scene",
        )
    return TrialPlan(
        kind="rect",
        photon_number=config.photon_number,
        trials=config.trials,
        base_seed=config.base_seed,
        workers=workers,
        b1=None if b1 == reference.params[3] else b1,
        **extra,
    )


def cmd_montecarlo(config: ExperimentConfig, outdir: Path, threads: int) -> int:
    """Run the seeded campaign; writes ``mc.csv`` and ``mc_context.json``."""
    plan = _campaign_plan(config, threads)
    report = run_campaign(plan)
    rows = [
        [r["parameter"], r["truth"], r["mean"], r["variance"], r["bias_sq"], r["crlb"], report.trials_used]
        for r in report.rows()
    ]
    write_csv(
        outdir / "mc.csv",
        "montecarlo",
        ["parameter", "truth", "mean", "variance", "bias_sq", "crlb", "trials_used"],
        rows,
    )
    context = {
        "kind": plan.kind,
        "photon_number": plan.photon_number,
        "alpha2_factor": plan.alpha2_factor,
        "b1": plan.b1,
        "trials": plan.trials,
        "trials_used": report.trials_used,
        "failures": report.failures,
        "base_seed": plan.base_seed,
    }
    _atomic_write_bytes(outdir / "mc_context.json", (json.dumps(context, indent=2) + "\n").encode())
    print(
        f"wrote mc.csv ({report.trials_used}/{plan.trials} trials used, "
        f"{report.failures} failures) to {outdir}"
    )
    return EXIT_OK


# --- report -------------------------------------------------------------------


def _curve_table(rows: list[dict], sweep: str) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    mine = [r for r in rows if r["sweep"] == sweep]
    values = sorted({float(r["sweep_value"]) for r in mine})
    params = sorted({r["parameter"] for r in mine})
    table = {p: np.full(len(values), np.nan) for p in params}
    for r in mine:
        table[r["parameter"]][values.index(float(r["sweep_value"]))] = float(r["crlb"])
    return np.array(values), table


def _mc_overlay(outdir: Path) -> tuple[Optional[dict], dict[str, float]]:
    context_path = outdir / "mc_context.json"
    mc_path = outdir / "mc.csv"
    if not (context_path.is_file() and mc_path.is_file()):
        return None, {}
    context = json.loads(context_path.read_text())
    _, rows = read_csv_rows(mc_path)
    return context, {r["parameter"]: float(r["variance"]) for r in rows}


def cmd_report(rundir: Path, outdir: Path, check: bool) -> int:
    """Assemble plot-ready curves (CSV + SVG) from a run directory.

    With ``check=True``, verify the defining properties of whatever curves
    are present: lower bounds scale as 1/PN across a photon-number sweep;
    the first scatterer's x-bound decreases when the second scatterer gets
    stronger; the rectangle bounds follow the documented height trends
    (a1/x1 improve up to 15 wavelengths, b1/y1 degrade beyond 40); Monte
    Carlo variances sit above the bound (with finite-sample slack) and the
    x1 estimator is asymptotically unbiased at high flux.
    """
    crlb_path = rundir / "crlb.csv"
    if not crlb_path.is_file():
        raise ConfigError(f"missing input file: {crlb_path} (run crlb first)")
    _, rows = read_csv_rows(crlb_path)
    context, mc_var = _mc_overlay(rundir)
    checks: list[tuple[str, bool, str]] = []
    wrote = []

    pn, table = _curve_table(rows, "photon_number")
    if pn.size:
        header = ["photon_number"] + [f"crlb_{p}" for p in table]
        overlay_cols = []
        # overlay only when the campaign ran the same scene the sweep bounds
        plain_campaign = context is not None and (
            context.get("alpha2_factor") in (None, 1.0) and context.get("b1") is None
        )
        if plain_campaign and context["photon_number"] in pn:
            overlay_cols = [f"var_{p}" for p in mc_var]
            header += overlay_cols
        out_rows = []
        for i, v in enumerate(pn):
            row = [v] + [table[p][i] for p in table]
            if overlay_cols:
                row += [mc_var[p] if v == context["photon_number"] else None for p in mc_var]
            out_rows.append(row)
        write_csv(outdir / "report_crlb_vs_photon_number.csv", "report", header, out_rows)
        points = {}
        if plain_campaign and context["photon_number"] in pn:
            mask = {p: np.where(pn == context["photon_number"], mc_var[p], np.nan) for p in mc_var}
            points = {f"var {p}": mask[p] for p in ("x1",) if p in mask}
        write_svg_chart(
            outdir / "report_crlb_vs_photon_number.svg",
            "report",
            "Lower bounds vs photon number",
            "photon number",
            "variance bound",
            pn,
            {f"crlb {p}": table[p] for p in table},
            points=points,
            logx=True,
            logy=True,
        )
        wrote.append("report_crlb_vs_photon_number")
        if pn.size >= 2:
            ok = True
            for p, vals in table.items():
                scale = vals * pn
                ok &= bool(np.all(np.abs(scale / scale[0] - 1.0) < 1e-3))
            checks.append(("crlb-inverse-photon-number", ok, "crlb * PN constant to 0.1%"))

    alpha2, table = _curve_table(rows, "alpha2_factor")
    if alpha2.size:
        header = ["alpha2_factor"] + [f"crlb_{p}" for p in table]
        out_rows = [[v] + [table[p][i] for p in table] for i, v in enumerate(alpha2)]
        write_csv(outdir / "report_crlb_vs_alpha2_factor.csv", "report", header, out_rows)
        write_svg_chart(
            outdir / "report_crlb_vs_alpha2_factor.svg",
            "report",
            "Lower bounds vs second-scatterer strength",
            "strength factor",
            "variance bound",
            alpha2,
            {f"crlb {p}": table[p] for p in table},
            logx=False,
            logy=True,
        )
        wrote.append("report_crlb_vs_alpha2_factor")
        if alpha2.size >= 2 and "x1" in table:
            diffs = np.diff(table["x1"])
            checks.append(
                ("crlb-x1-decreasing-alpha2", bool(np.all(diffs < 0)), "stronger scatterer 2 lowers x1 bound")
            )

    b1, table = _curve_table(rows, "b1")
    if b1.size:
        header = ["b1"] + [f"crlb_{p}" for p in table]
        out_rows = [[v] + [table[p][i] for p in table] for i, v in enumerate(b1)]
        write_csv(outdir / "report_crlb_vs_b1.csv", "report", header, out_rows)
        points = {}
        if context is not None and context.get("b1") is not None and context["b1"] in b1:
            points = {
                f"var {p}": np.where(b1 == context["b1"], mc_var[p], np.nan)
                for p in ("a1", "x1")
                if p in mc_var
            }
        write_svg_chart(
            outdir / "report_crlb_vs_b1.svg",
            "report",
            "Lower bounds vs rectangle height",
            "height (wavelengths)",
            "variance bound",
            b1,
            {f"crlb {p}": table[p] for p in table},
            points=points,
            logx=False,
            logy=True,
        )
        wrote.append("report_crlb_vs_b1")
        small = b1 <= 15.0
        if small.sum() >= 2:
            for p in ("a1", "x1"):
                if p in table:
                    diffs = np.diff(table[p][small])
                    checks.append(
                        (f"crlb-{p}-decreasing-small-b1", bool(np.all(diffs < 0)), "taller helps below 15")
                    )
        large = b1 >= 40.0
        if large.sum() >= 2:
            for p in ("b1", "y1"):
                if p in table:
                    diffs = np.diff(table[p][large])
                    checks.append(
                        (f"crlb-{p}-increasing-large-b1", bool(np.all(diffs > 0)), "taller hurts beyond 40")
                    )

    if context is not None and mc_var:
        _, mc_rows = read_csv_rows(rundir / "mc.csv")
        trials = max(int(context["trials_used"]), 2)
        slack = 1.0 - 3.0 * math.sqrt(2.0 / trials)
        ok = all(float(r["variance"]) >= slack * float(r["crlb"]) for r in mc_rows)
        checks.append(("mc-variance-above-crlb", ok, f"sample variance >= crlb * {slack:.3f}"))
        if context["kind"] == "dipole" and context["photon_number"] >= 1e8:
            by_name = {r["parameter"]: r for r in mc_rows}
            if "x1" in by_name:
                r = by_name["x1"]
                ok = float(r["bias_sq"]) < float(r["variance"]) / 10.0
                checks.append(("mc-x1-asymptotic-unbiased", ok, "bias^2 below variance/10"))

    if not wrote and not checks:
        raise ConfigError(f"nothing to report in {rundir} (no recognized sweeps)")
    print(f"wrote {', '.join(wrote) or 'no curves'} to {outdir}")
    failed = [name for name, ok, _ in checks if not ok]
    if check:
        for name, ok, detail in checks:
            print("CHECK %-34s %s (%s)" % (name, "PASS" if ok else "FAIL", detail))
        if failed:
            raise CheckFailure(failed)
        if not checks:
            raise ConfigError(f"--check found no verifiable curves in {rundir}")
    return EXIT_OK


# --- entry point ---------------------------------------------------------------


def _emit_error(kind: str, message: str, **extra) -> None:
    payload = {"error": kind, "message": message}
    payload.update({k: v for k, v in extra.items() if v is not None})
    sys.stderr.write(json.dumps(payload) + "\n")


def _default_threads() -> int:
    raw = os.environ.get("PTYPARAM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ptyparam",
        description="Simulate, reconstruct, fit and bound ptychographic parameter retrieval experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_threads in (
        ("simulate", False),
        ("reconstruct", False),
        ("fit", False),
        ("crlb", False),
        ("montecarlo", True),
    ):
        p = sub.add_parser(name)
        p.add_argument("config", help="TOML experiment configuration")
        p.add_argument("--output-dir", default=None, help="run directory (default: config [output], else .)")
        if needs_threads:
            p.add_argument(
                "--threads",
                type=int,
                default=_default_threads(),
                help="worker processes for trials (default: $PTYPARAM_THREADS or 1)",
            )
    p = sub.add_parser("report")
    p.add_argument("rundir", help="directory holding crlb.csv (and optionally mc.csv)")
    p.add_argument("--output-dir", default=None, help="where to write the report (default: the run dir)")
    p.add_argument("--check", action="store_true", help="verify curve properties; exit 4 on failure")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            rundir = Path(args.rundir)
            if not rundir.is_dir():
                raise ConfigError(f"run directory not found: {rundir}")
            outdir = _out_dir(None, args.output_dir, fallback=str(rundir))
            return cmd_report(rundir, outdir, args.check)
        config = ExperimentConfig.from_file(args.config)
        outdir = _out_dir(config, args.output_dir)
        if args.command == "simulate":
            return cmd_simulate(config, outdir)
        if args.command == "reconstruct":
            return cmd_reconstruct(config, outdir)
        if args.command == "fit":
            return cmd_fit(config, outdir)
        if args.command == "crlb":
            return cmd_crlb(config, outdir)
        if args.command == "montecarlo":
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            return cmd_montecarlo(config, outdir, args.threads)
        raise ConfigError(f"unknown command {args.command!r}")  # pragma: no cover
    except ConfigError as exc:
        _emit_error("config", str(exc), where=exc.where)
        return EXIT_CONFIG
    except InvalidFieldError as exc:
        _emit_error("config", str(exc))
        return EXIT_CONFIG
    except CheckFailure as exc:
        _emit_error("check", str(exc), failed=exc.failed)
        return EXIT_CHECK
    except _NUMERICAL_ERRORS as exc:
        _emit_error("numerical", f"{type(exc).__name__}: {exc}")
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

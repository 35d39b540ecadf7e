"""Per-gas target spectra and vetting configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import yaml

from ._validation import check_gas, check_positive
from .cube_io import BandWindow, SpectralCube, WavelengthGrid, select_bands
from .errors import ConfigError, CubeIOError

# molar masses in g/mol, used for mass conversion of mixing-ratio lengths
MOLAR_MASS = {"CH4": 16.04, "NH3": 17.031, "NO2": 46.0055, "CO": 28.01}

_OUT_COMMON = ((381, 1633), (1692, 2094), (2441, 2493))
_DEFAULTS = {
    "CH4": dict(in_band=((2100, 2440),), out_band=_OUT_COMMON,
                mf_background_threshold=30.0, min_candidate_pixels=25,
                wide_window=((1560, 2500),)),
    "NH3": dict(in_band=((1498, 1603), (1952, 2130), (2123, 2326)),
                out_band=((381, 1498), (1603, 1922), (2441, 2493)),
                mf_background_threshold=300.0, min_candidate_pixels=100),
    "NO2": dict(in_band=((381, 753),),
                out_band=((753, 1633), (1692, 2094), (2441, 2493)),
                mf_background_threshold=1200.0, min_candidate_pixels=100),
    "CO": dict(in_band=((2278, 2441),), out_band=_OUT_COMMON,
               mf_background_threshold=300.0, min_candidate_pixels=100),
}


@dataclass(frozen=True, eq=False)
class GasTarget:
    """Target spectra resampled to a wavelength grid.

    ``unit_absorption`` is the fractional radiance change per ppm m (the
    matched filter target before continuum scaling); ``k_coeffs`` is the
    Beer-Lambert absorption coefficient per ppm m.
    """

    gas: str
    grid: WavelengthGrid
    unit_absorption: np.ndarray
    k_coeffs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gas", check_gas(self.gas))
        for name in ("unit_absorption", "k_coeffs"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).ravel()
            if arr.size != len(self.grid):
                raise ConfigError(f"{name} has {arr.size} values for {len(self.grid)} bands")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} has non-finite values")
            object.__setattr__(self, name, arr)

    def scaled(self, mean_radiance, band_set):
        """Matched-filter target: unit absorption times the local mean radiance."""
        return self.unit_absorption[band_set] * np.asarray(mean_radiance)


def _windows(pairs):
    return tuple(w if isinstance(w, BandWindow) else BandWindow(*w) for w in pairs)


def _overlap(a: BandWindow, b: BandWindow):
    # touching endpoints are allowed; the shared band is removed from the out-band set
    return min(a.hi, b.hi) > max(a.lo, b.lo)


@dataclass(frozen=True)
class GasConfig:
    gas: str
    in_band: Tuple[BandWindow, ...]
    out_band: Tuple[BandWindow, ...]
    mf_background_threshold: float
    min_candidate_pixels: int
    dnorm_high: float = 0.3
    dnorm_low: float = 0.5
    wide_window: Tuple[BandWindow, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "gas", check_gas(self.gas))
        object.__setattr__(self, "in_band", _windows(self.in_band))
        object.__setattr__(self, "out_band", _windows(self.out_band))
        if not self.in_band or not self.out_band:
            raise ConfigError("in_band and out_band need at least one window each")
        wide = _windows(self.wide_window) if self.wide_window else (
            BandWindow(min(w.lo for w in self.in_band), max(w.hi for w in self.in_band)),
        )
        object.__setattr__(self, "wide_window", wide)
        for a in self.in_band:
            for b in self.out_band:
                if _overlap(a, b):
                    raise ConfigError(f"in-band {a.as_list()} overlaps out-band {b.as_list()}")
        check_positive(self.mf_background_threshold, "mf_background_threshold")
        check_positive(self.dnorm_high, "dnorm_high")
        check_positive(self.dnorm_low, "dnorm_low")
        if int(self.min_candidate_pixels) < 0:
            raise ConfigError("min_candidate_pixels must be non-negative")
        object.__setattr__(self, "min_candidate_pixels", int(self.min_candidate_pixels))
        if not self.dnorm_high < self.dnorm_low:
            raise ConfigError("dnorm_high must be below dnorm_low")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return {
            "gas": self.gas,
            "in_band": [w.as_list() for w in self.in_band],
            "out_band": [w.as_list() for w in self.out_band],
            "wide_window": [w.as_list() for w in self.wide_window],
            "mf_background_threshold": float(self.mf_background_threshold),
            "min_candidate_pixels": self.min_candidate_pixels,
            "dnorm_high": float(self.dnorm_high),
            "dnorm_low": float(self.dnorm_low),
        }


def default_config(gas) -> GasConfig:
    gas = check_gas(gas)
    return GasConfig(gas=gas, **_DEFAULTS[gas])


def load_config(path, gas=None) -> GasConfig:
    """Read a YAML gas config; missing keys fall back to :func:`default_config`."""
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise CubeIOError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} is not a key: value mapping")
    raw = dict(raw.get("gas_config", raw))
    gas = check_gas(gas or raw.get("gas", "CH4"))
    if "gas" in raw and check_gas(raw["gas"]) != gas:
        raise ConfigError(f"config is for {raw['gas']}, requested {gas}")
    base = default_config(gas).to_dict()
    known = set(base)
    for key, value in raw.items():
        if key in known:
            base[key] = value
    base["gas"] = gas
    try:
        return GasConfig(**base)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass(frozen=True, eq=False)
class FitWindowSet:
    """Band indices of each in-band window and of the pooled out-band set."""

    in_band: Tuple[np.ndarray, ...]
    out_band: np.ndarray
    windows: Tuple[BandWindow, ...] = field(default=())


def resolve_windows(cfg: GasConfig, cube_or_grid, bad_bands=None, min_bands=3) -> FitWindowSet:
    in_sets = tuple(select_bands(cube_or_grid, [w], bad_bands=bad_bands, min_bands=min_bands)
                    for w in cfg.in_band)
    out = select_bands(cube_or_grid, cfg.out_band, bad_bands=bad_bands, min_bands=0)
    out = np.setdiff1d(out, np.concatenate(in_sets))
    if out.size < min_bands:
        raise ConfigError(f"out-band windows resolve to {out.size} bands (< {min_bands})")
    return FitWindowSet(in_band=in_sets, out_band=out, windows=cfg.in_band)


def resample(wavelengths, values, grid: WavelengthGrid):
    """Linear interpolation onto band centers; bands outside the source range get 0."""
    wavelengths = np.asarray(wavelengths, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(wavelengths, kind="stable")
    wavelengths, values = wavelengths[order], values[order]
    if np.any(np.diff(wavelengths) <= 0):
        raise ConfigError("target wavelengths must be unique")
    return np.interp(grid.centers, wavelengths, values, left=0.0, right=0.0)


def read_spectrum(path):
    try:
        arr = np.loadtxt(path, dtype=np.float64, comments="#", ndmin=2)
    except OSError as exc:
        raise CubeIOError(f"cannot read spectrum {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"malformed spectrum file {path}: {exc}") from exc
    if arr.shape[1] != 2:
        raise ConfigError(f"{path}: expected two columns (wavelength, value)")
    return arr[:, 0], arr[:, 1]


def write_spectrum(path, wavelengths, values, header=None):
    arr = np.column_stack([np.asarray(wavelengths, float), np.asarray(values, float)])
    np.savetxt(path, arr, fmt="%.10g", header=header or "", comments="# ")


def load_target(path, grid: WavelengthGrid, gas="CH4", unit_path=None) -> GasTarget:
    """Load absorption coefficients k (and optionally unit absorption) onto ``grid``.

    Without ``unit_path`` the unit absorption is taken as ``-k``, the
    first-order Beer-Lambert radiance change per ppm m.
    """
    wl, k = read_spectrum(path)
    lo, hi = grid.centers[0], grid.centers[-1]
    if np.count_nonzero((wl >= lo) & (wl <= hi)) < 3:
        raise ConfigError(f"{path}: fewer than 3 samples overlap the grid range")
    k_grid = resample(wl, k, grid)
    if unit_path is None:
        unit = -k_grid
    else:
        uwl, uval = read_spectrum(unit_path)
        if np.count_nonzero((uwl >= lo) & (uwl <= hi)) < 3:
            raise ConfigError(f"{unit_path}: fewer than 3 samples overlap the grid range")
        unit = resample(uwl, uval, grid)
    return GasTarget(gas=gas, grid=grid, unit_absorption=unit, k_coeffs=k_grid)

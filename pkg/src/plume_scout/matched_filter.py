"""Classical matched filter: column-wise (CMF) and whole-scene (WMF) variants.

For a pixel spectrum x with background mean mu and covariance S, the
enhancement estimate is

    alpha = t' S^-1 (x - mu) / (t' S^-1 t),    t = unit_absorption * mu

so alpha is a mixing-ratio length (ppm m) and is invariant to a global
radiance gain.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_band_indices, check_fraction, check_gas, check_is_fitted
from .cube_io import BandWindow, SpectralCube, WavelengthGrid, select_bands
from .errors import ConfigError, NumericError
from .signatures import GasTarget, default_config

logger = logging.getLogger(__name__)

VARIANTS = ("CMF", "WMF")
MIN_VALID_PIXELS = 10


@dataclass(frozen=True, eq=False)
class ColumnStats:
    """Background statistics per column group.

    ``group_of_column[c]`` indexes ``means``/``covariances`` for detector
    column ``c``. Groups that fell back to scene-wide statistics are flagged
    in ``fallback``.
    """

    mode: str
    band_set: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    group_of_column: np.ndarray
    pixel_count: np.ndarray
    fallback: np.ndarray
    shrinkage: float

    @property
    def n_groups(self):
        return self.means.shape[0]

    def subset(self, keep):
        """Marginal statistics over a subset (boolean mask or positions) of ``band_set``."""
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        return ColumnStats(
            mode=self.mode,
            band_set=self.band_set[keep],
            means=self.means[:, keep],
            covariances=self.covariances[:, keep][:, :, keep],
            group_of_column=self.group_of_column,
            pixel_count=self.pixel_count,
            fallback=self.fallback,
            shrinkage=self.shrinkage,
        )


@dataclass(frozen=True, eq=False)
class EnhancementMap:
    """Per-pixel mixing-ratio length (ppm m); NaN marks nodata pixels."""

    alpha: np.ndarray
    variant: str
    gas: str
    band_set: np.ndarray
    stats: Optional[ColumnStats] = None
    normalizer: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.alpha.shape

    def sigma_alpha(self):
        """Theoretical background std of alpha per column, 1/sqrt(t' S^-1 t)."""
        if self.normalizer is None or self.stats is None:
            return None
        return 1.0 / np.sqrt(self.normalizer[self.stats.group_of_column])

    def to_cube(self, nodata=-9999.0, scene_id=None):
        data = np.where(np.isfinite(self.alpha), self.alpha, nodata).astype(np.float32)
        meta = {
            "variant": self.variant,
            "gas": self.gas,
            "band set": "{" + ", ".join(str(int(i)) for i in self.band_set) + "}",
        }
        if scene_id is not None:
            meta["scene id"] = scene_id
        return SpectralCube(data[:, :, None], nodata=nodata, metadata=meta)

    @classmethod
    def from_cube(cls, cube: SpectralCube):
        if cube.bands != 1:
            raise ConfigError("enhancement raster must have a single band")
        alpha = cube.data[:, :, 0].astype(np.float64)
        alpha = np.where(cube.valid_mask(), alpha, np.nan)
        meta = cube.metadata
        bs = meta.get("band set", "{}").strip("{} ")
        band_set = np.array([int(s) for s in bs.split(",") if s.strip()], dtype=np.intp)
        return cls(alpha=alpha, variant=meta.get("variant", "CMF").upper(),
                   gas=check_gas(meta.get("gas", "CH4")), band_set=band_set)


def _check_variant(mode):
    mode = str(mode).upper()
    if mode not in VARIANTS:
        raise ConfigError(f"unknown matched filter variant {mode!r}; expected cmf or wmf")
    return mode


def _mean_cov(X):
    # fixed reduction order: float64 sums over the pixel axis, 1/n normalization
    n = X.shape[0]
    mu = X.sum(axis=0) / n
    D = X - mu
    return mu, (D.T @ D) / n


def _shrink(S, s):
    return (1.0 - s) * S + s * np.diag(np.diag(S))


def column_groups(n_cols, n_groups=None):
    """Map each column to a contiguous group; default is one group per column."""
    n_groups = n_cols if n_groups is None else int(n_groups)
    if not 1 <= n_groups <= n_cols:
        raise ConfigError(f"n_groups must lie in [1, {n_cols}], got {n_groups}")
    out = np.empty(n_cols, dtype=np.intp)
    for g, cols in enumerate(np.array_split(np.arange(n_cols), n_groups)):
        out[cols] = g
    return out


def column_stats(cube: SpectralCube, band_set, mode="CMF", shrinkage=0.02, n_groups=None,
                 min_pixels=MIN_VALID_PIXELS, pixel_mask=None) -> ColumnStats:
    """Estimate background mean and shrunk covariance over ``band_set``.

    WMF pools every valid pixel. CMF estimates one pair per column group
    (default: per detector column); a group with fewer than ``min_pixels``
    valid pixels uses the scene-wide pair instead. ``pixel_mask`` restricts
    which pixels count as background.
    """
    mode = _check_variant(mode)
    band_set = check_band_indices(band_set, cube.bands)
    s = check_fraction(shrinkage, "shrinkage")
    valid = cube.valid_mask()
    if pixel_mask is not None:
        valid = valid & np.asarray(pixel_mask, dtype=bool)
    X_all = cube.data[:, :, band_set].astype(np.float64)
    nb = band_set.size

    n_valid = int(valid.sum())
    if n_valid < min_pixels:
        raise NumericError(f"scene has {n_valid} valid pixels (< {min_pixels})")
    mu_g, S_g = _mean_cov(X_all[valid])

    if mode == "WMF":
        groups = np.zeros(cube.cols, dtype=np.intp)
    else:
        groups = column_groups(cube.cols, n_groups)
    ng = int(groups.max()) + 1
    means = np.empty((ng, nb))
    covs = np.empty((ng, nb, nb))
    counts = np.zeros(ng, dtype=np.intp)
    fallback = np.zeros(ng, dtype=bool)
    for g in range(ng):
        cols = np.flatnonzero(groups == g)
        sel = valid[:, cols]
        counts[g] = int(sel.sum())
        if ng == 1:
            means[g], covs[g] = mu_g, S_g
        elif counts[g] < min_pixels:
            means[g], covs[g] = mu_g, S_g
            fallback[g] = True
        else:
            Xg = X_all[:, cols][sel]
            means[g], covs[g] = _mean_cov(Xg)
        covs[g] = _shrink(covs[g], s)
        try:
            np.linalg.cholesky(covs[g])
        except np.linalg.LinAlgError as exc:
            raise NumericError(
                f"covariance of group {g} is not positive definite after shrinkage {s}"
            ) from exc
    if fallback.any():
        logger.info("%d of %d column groups fell back to scene statistics", fallback.sum(), ng)
    return ColumnStats(mode=mode, band_set=band_set, means=means, covariances=covs,
                       group_of_column=groups, pixel_count=counts, fallback=fallback,
                       shrinkage=s)


def apply_mf(cube: SpectralCube, target: GasTarget, stats: ColumnStats, band_set=None,
             exclude_bands=None) -> EnhancementMap:
    """Matched-filter enhancement for every pixel.

    ``exclude_bands`` drops band indices (e.g. an interfering gas feature)
    by marginalizing the stored statistics, so no re-estimation is needed.
    """
    band_set = stats.band_set if band_set is None else check_band_indices(band_set, cube.bands)
    if not np.array_equal(band_set, stats.band_set):
        raise ConfigError("statistics were computed on a different band set")
    if target.k_coeffs.size != cube.bands:
        raise ConfigError("target grid does not match cube band count")
    if exclude_bands is not None:
        keep = ~np.isin(band_set, np.asarray(exclude_bands))
        if not keep.any():
            raise ConfigError("band exclusion removes every band")
        stats = stats.subset(keep)
        band_set = stats.band_set
    valid = cube.valid_mask()
    alpha = np.full((cube.rows, cube.cols), np.nan)
    norms = np.empty(stats.n_groups)
    X = cube.data[:, :, band_set].astype(np.float64)
    for g in range(stats.n_groups):
        mu = stats.means[g]
        t = target.scaled(mu, band_set)
        try:
            cf = scipy.linalg.cho_factor(stats.covariances[g], lower=True, check_finite=True)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"singular covariance in group {g}") from exc
        w = scipy.linalg.cho_solve(cf, t)
        norm = float(t @ w)
        if not np.isfinite(norm) or norm <= 0:
            raise NumericError(f"target has zero whitened energy in group {g}; check band set")
        norms[g] = norm
        cols = np.flatnonzero(stats.group_of_column == g)
        block = X[:, cols, :]
        vals = ((block - mu) @ w) / norm
        sub = valid[:, cols]
        alpha[:, cols] = np.where(sub, vals, np.nan)
    return EnhancementMap(alpha=alpha, variant=stats.mode, gas=target.gas,
                          band_set=band_set, stats=stats, normalizer=norms)


def narrow_band_set(gas, grid, bad_bands=None, cfg=None):
    """Union of the configured in-band (absorbing) windows."""
    cfg = cfg or default_config(gas)
    return select_bands(grid, cfg.in_band, bad_bands=bad_bands)


def wide_window_band_set(gas, grid, bad_bands=None, cfg=None):
    """Indices of the configured wide matched-filter range, minus bad bands."""
    cfg = cfg or default_config(gas)
    try:
        return select_bands(grid, cfg.wide_window, bad_bands=bad_bands)
    except ConfigError as exc:
        raise ConfigError(f"wide window for {cfg.gas} not covered by grid: {exc}") from exc


def _upper_outliers(alpha, groups, n_sigma):
    """Pixels more than ``n_sigma`` robust (MAD) sigmas above their group median."""
    out = np.zeros(alpha.shape, dtype=bool)
    for g in np.unique(groups):
        cols = np.flatnonzero(groups == g)
        a = alpha[:, cols]
        vals = a[np.isfinite(a)]
        if vals.size == 0:
            continue
        med = np.median(vals)
        scale = 1.4826 * np.median(np.abs(vals - med))
        out[:, cols] = np.isfinite(a) & (a - med > n_sigma * scale)
    return out


class MatchedFilter(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` learns background statistics, ``transform`` maps alpha.

    Parameters
    ----------
    target : GasTarget
    variant : {'cmf', 'wmf'}
    bands : 'wide', 'narrow' or a list of (lo, hi) windows in nm
    shrinkage : float
        Weight of the diagonal target in the covariance estimate.
    n_groups : int or None
        CMF column groups; None gives one group per detector column.
    exclude_windows : list of (lo, hi) or None
        Windows removed from the band set at transform time.
    background_clip : float or None
        If set, a second pass re-estimates the statistics without pixels whose
        first-pass alpha exceeds ``background_clip`` background sigmas. None
        keeps the single-pass filter.
    """

    def __init__(self, target=None, variant="wmf", bands="wide", shrinkage=0.02,
                 n_groups=None, exclude_windows=None, background_clip=None, config=None):
        self.target = target
        self.variant = variant
        self.bands = bands
        self.shrinkage = shrinkage
        self.n_groups = n_groups
        self.exclude_windows = exclude_windows
        self.background_clip = background_clip
        self.config = config

    def _band_set(self, cube):
        if cube.grid is None:
            raise ConfigError("cube has no wavelength grid")
        gas = self.target.gas
        if isinstance(self.bands, str):
            if self.bands == "wide":
                return wide_window_band_set(gas, cube.grid, cube.bad_bands, self.config)
            if self.bands == "narrow":
                return narrow_band_set(gas, cube.grid, cube.bad_bands, self.config)
            raise ConfigError(f"unknown band selection {self.bands!r}")
        windows = [w if isinstance(w, BandWindow) else BandWindow(*w) for w in self.bands]
        return select_bands(cube, windows)

    def fit(self, cube, y=None):
        if not isinstance(self.target, GasTarget):
            raise ConfigError("MatchedFilter needs a GasTarget")
        band_set = self._band_set(cube)
        stats = column_stats(cube, band_set, mode=self.variant,
                             shrinkage=self.shrinkage, n_groups=self.n_groups)
        self.background_mask_ = cube.valid_mask()
        if self.background_clip is not None:
            first = apply_mf(cube, self.target, stats, band_set)
            keep = ~_upper_outliers(first.alpha, stats.group_of_column, float(self.background_clip))
            self.background_mask_ = self.background_mask_ & keep
            stats = column_stats(cube, band_set, mode=self.variant, shrinkage=self.shrinkage,
                                 n_groups=self.n_groups, pixel_mask=self.background_mask_)
        self.stats_ = stats
        self.band_set_ = band_set
        return self

    def transform(self, cube):
        check_is_fitted(self, "stats_")
        exclude = None
        if self.exclude_windows:
            windows = [w if isinstance(w, BandWindow) else BandWindow(*w)
                       for w in self.exclude_windows]
            exclude = np.flatnonzero(np.any([w.contains(cube.wavelengths) for w in windows], axis=0))
        return apply_mf(cube, self.target, self.stats_, self.band_set_, exclude_bands=exclude)

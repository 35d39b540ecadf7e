"""Spectral vetting of plume candidates by their aggregate transmittance.

For each candidate the strongest in-plume pixels are paired with spectrally
similar, low-enhancement background pixels. The ratio of their mean spectra
approximates the plume transmittance, which is fit per absorbing window by

    T(lambda) = P(lambda) * exp(-a * k(lambda))

with P a low-order polynomial continuum. The score ``dnorm`` is the mean
absolute residual divided by the modeled absorption depth.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import scipy.ndimage
from sklearn.base import BaseEstimator, RegressorMixin

from ._validation import check_is_fitted
from .candidates import PlumeCandidate
from .cube_io import BandWindow, SpectralCube
from .errors import ConfigError, NumericError, UnfittableError
from .matched_filter import EnhancementMap
from .signatures import FitWindowSet, GasConfig, GasTarget, resolve_windows

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = "1.0"
MIN_PAIRS = 5
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class SpectrumPair:
    in_pixel: tuple
    bg_pixel: tuple
    similarity: float
    in_alpha: float
    bg_alpha: float


@dataclass(frozen=True, eq=False)
class TransmittanceCurve:
    wavelengths: np.ndarray
    values: np.ndarray
    n_pairs: int
    band_index: np.ndarray


def select_in_plume(cand: PlumeCandidate, emap: EnhancementMap, n=40):
    """Up to ``n`` in-plume pixels grown around the strongest enhancements.

    Seeds are visited in descending alpha; each contributes itself and its
    8-neighbours inside the candidate (strongest first) until ``n`` pixels
    are collected. Returns (row, col) tuples.
    """
    alpha = np.nan_to_num(emap.alpha, nan=-np.inf)
    shape = alpha.shape
    inside = cand.mask(shape)
    pix = cand.pixels
    a = alpha[pix[:, 0], pix[:, 1]]
    # stable: ties resolved by raster order of the candidate pixel list
    order = np.argsort(-a, kind="stable")
    chosen, seen = [], set()
    for i in order:
        if len(chosen) >= n:
            break
        r, c = int(pix[i, 0]), int(pix[i, 1])
        ring = [(r, c)]
        nbrs = []
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r + dr, c + dc
                if (dr or dc) and 0 <= rr < shape[0] and 0 <= cc < shape[1] and inside[rr, cc]:
                    nbrs.append((-alpha[rr, cc], rr, cc))
        ring += [(rr, cc) for _, rr, cc in sorted(nbrs)]
        for p in ring:
            if p not in seen and len(chosen) < n:
                seen.add(p)
                chosen.append(p)
    return chosen


def background_eligible(cand: PlumeCandidate, cube: SpectralCube, emap: EnhancementMap,
                        cfg: GasConfig, buffer=2):
    """Pixels usable as background: valid, low enhancement, outside the buffered plume."""
    alpha = emap.alpha
    near = cand.mask(alpha.shape)
    if buffer > 0:
        near = scipy.ndimage.binary_dilation(near, structure=_EIGHT, iterations=int(buffer))
    with np.errstate(invalid="ignore"):
        low = np.isfinite(alpha) & (alpha < cfg.mf_background_threshold)
    return low & ~near & cube.valid_mask()


def _cosine(a, B):
    na = np.linalg.norm(a)
    nb = np.linalg.norm(B, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return (B @ a) / (nb * na)


def pair_background(in_pixels, cand: PlumeCandidate, cube: SpectralCube, emap: EnhancementMap,
                    cfg: GasConfig, out_bands=None, similarity_threshold=0.995,
                    search_radius=150.0, buffer=2) -> List[SpectrumPair]:
    """Best cosine-similarity background partner for each in-plume pixel.

    Similarity uses only the out-band (non-absorbing) bands. In-plume pixels
    with no partner above ``similarity_threshold`` are dropped; fewer than
    five surviving pairs raises :class:`UnfittableError`.
    """
    if out_bands is None:
        out_bands = resolve_windows(cfg, cube).out_band
    out_bands = np.asarray(out_bands)
    eligible = background_eligible(cand, cube, emap, cfg, buffer)
    n_eligible = int(eligible.sum())
    diag = {"n_in": len(in_pixels), "n_eligible": n_eligible, "n_pairs": 0}
    if n_eligible < max(len(in_pixels), 1):
        raise UnfittableError(
            f"only {n_eligible} eligible background pixels for {len(in_pixels)} in-plume pixels", diag)
    er, ec = np.nonzero(eligible)
    E = cube.data[er, ec][:, out_bands].astype(np.float64)
    pairs = []
    for r, c in sorted(in_pixels):
        d2 = (er - r) ** 2 + (ec - c) ** 2
        near = np.flatnonzero(d2 <= search_radius ** 2)
        if near.size == 0:
            continue
        x = cube.data[r, c, out_bands].astype(np.float64)
        sim = _cosine(x, E[near])
        sim = np.where(np.isfinite(sim), sim, -np.inf)
        j = int(np.argmax(sim))
        if sim[j] < similarity_threshold:
            continue
        br, bc = int(er[near[j]]), int(ec[near[j]])
        pairs.append(SpectrumPair(in_pixel=(int(r), int(c)), bg_pixel=(br, bc),
                                  similarity=float(sim[j]), in_alpha=float(emap.alpha[r, c]),
                                  bg_alpha=float(emap.alpha[br, bc])))
    diag["n_pairs"] = len(pairs)
    if len(pairs) < MIN_PAIRS:
        raise UnfittableError(f"only {len(pairs)} background pairs (< {MIN_PAIRS})", diag)
    return pairs


def transmittance(pairs: Sequence[SpectrumPair], cube: SpectralCube, window) -> TransmittanceCurve:
    """Mean in-plume spectrum over mean background spectrum, on ``window`` band indices."""
    if len(pairs) < MIN_PAIRS:
        raise UnfittableError(f"transmittance needs >= {MIN_PAIRS} pairs, got {len(pairs)}")
    window = np.asarray(window)
    ip = np.array([p.in_pixel for p in pairs])
    bp = np.array([p.bg_pixel for p in pairs])
    num = cube.data[ip[:, 0], ip[:, 1]][:, window].astype(np.float64).mean(axis=0)
    den = cube.data[bp[:, 0], bp[:, 1]][:, window].astype(np.float64).mean(axis=0)
    keep = den > 0
    if not keep.any():
        raise NumericError("every window band has non-positive background radiance")
    return TransmittanceCurve(wavelengths=cube.wavelengths[window][keep],
                              values=num[keep] / den[keep], n_pairs=len(pairs),
                              band_index=window[keep])


class TransmittanceFitter(RegressorMixin, BaseEstimator):
    """Polynomial continuum times Beer-Lambert absorption, fit to a transmittance curve.

    ``X`` is an (n, 2) array of (wavelength, k) per band; ``y`` the measured
    transmittance. The optical path ``a`` is found by a log-grid scan then
    golden-section refinement of the least-squares objective; the continuum
    is solved in closed form for each trial ``a``.
    """

    def __init__(self, degree=2, a_max=50000.0, xtol=1e-3, max_iter=200, depth_floor=0.01,
                 n_grid=96):
        self.degree = degree
        self.a_max = a_max
        self.xtol = xtol
        self.max_iter = max_iter
        self.depth_floor = depth_floor
        self.n_grid = n_grid

    def _basis(self, wl):
        lo, hi = self.wl_range_
        x = 2.0 * (wl - lo) / (hi - lo) - 1.0
        return np.vander(x, self.degree + 1, increasing=True)

    def _solve(self, a, B, k, y):
        E = np.exp(-a * k)
        V = B * E[:, None]
        coef, *_ = np.linalg.lstsq(V, y, rcond=None)
        r = y - V @ coef
        return float(r @ r), coef

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).ravel()
        if X.ndim != 2 or X.shape[1] != 2 or X.shape[0] != y.size:
            raise ConfigError("X must be (n, 2) [wavelength, k] matching y")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise NumericError("non-finite values in transmittance fit inputs")
        wl, k = X[:, 0], X[:, 1]
        if y.size < self.degree + 3:
            raise NumericError(f"window has {y.size} bands, need >= {self.degree + 3}")
        if not np.any(k > 0) or np.ptp(wl) <= 0:
            raise NumericError("degenerate window: no absorption or zero wavelength span")
        self.wl_range_ = (float(wl.min()), float(wl.max()))
        B = self._basis(wl)

        def f(a):
            return self._solve(a, B, k, y)[0]

        grid = np.concatenate([[0.0], np.geomspace(1.0, self.a_max, self.n_grid - 1)])
        vals = np.array([f(a) for a in grid])
        i = int(np.argmin(vals))
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
        # golden-section on the bracket around the best grid point
        c = hi - _GOLDEN * (hi - lo)
        d = lo + _GOLDEN * (hi - lo)
        fc, fd = f(c), f(d)
        it = 0
        while hi - lo > self.xtol:
            it += 1
            if it > self.max_iter:
                raise NumericError("optical depth search did not converge")
            if fc < fd:
                hi, d, fd = d, c, fc
                c = hi - _GOLDEN * (hi - lo)
                fc = f(c)
            else:
                lo, c, fc = c, d, fd
                d = lo + _GOLDEN * (hi - lo)
                fd = f(d)
        cands = [(f(lo), lo), (fc, c), (fd, d), (f(hi), hi), (vals[i], grid[i])]
        best_f, a = min(cands)
        obj, coef = self._solve(a, B, k, y)
        self.n_iter_ = it
        self.alpha_ = float(a)
        self.coef_ = coef
        self.objective_ = obj
        model = self.predict(X)
        self.residual_ = y - model
        continuum = B @ coef
        depth = float(np.mean(continuum)) * (1.0 - math.exp(-a * float(k.max())))
        self.depth_ = max(depth, float(self.depth_floor))
        self.mae_ = float(np.mean(np.abs(self.residual_)))
        self.dnorm_ = self.mae_ / self.depth_
        return self

    def continuum(self, wavelengths):
        check_is_fitted(self, "coef_")
        return self._basis(np.asarray(wavelengths, dtype=np.float64)) @ self.coef_

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = np.asarray(X, dtype=np.float64)
        return self.continuum(X[:, 0]) * np.exp(-self.alpha_ * X[:, 1])

    def objective(self, a, coef, X, y):
        """Least-squares objective for arbitrary (a, continuum coefficients)."""
        X = np.asarray(X, dtype=np.float64)
        model = (self._basis(X[:, 0]) @ np.asarray(coef)) * np.exp(-a * X[:, 1])
        r = np.asarray(y, dtype=np.float64) - model
        return float(r @ r)


@dataclass
class WindowFit:
    window: BandWindow
    dnorm: float
    alpha_fit: float
    continuum_coeffs: np.ndarray
    wavelengths: np.ndarray
    transmittance: np.ndarray
    model: np.ndarray
    residual_curve: np.ndarray

    def to_dict(self):
        return {
            "window": self.window.as_list(),
            "dnorm": float(self.dnorm),
            "alpha_fit": float(self.alpha_fit),
            "continuum_coeffs": [float(v) for v in self.continuum_coeffs],
            "wavelengths": [float(v) for v in self.wavelengths],
            "transmittance": [float(v) for v in self.transmittance],
            "model": [float(v) for v in self.model],
            "residual_curve": [float(v) for v in self.residual_curve],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(window=BandWindow(*d["window"]), dnorm=d["dnorm"], alpha_fit=d["alpha_fit"],
                   continuum_coeffs=np.array(d["continuum_coeffs"]),
                   wavelengths=np.array(d["wavelengths"]),
                   transmittance=np.array(d["transmittance"]), model=np.array(d["model"]),
                   residual_curve=np.array(d["residual_curve"]))


def combine_dnorm(values):
    """Single window: its score. Several windows: the product of their scores."""
    values = [float(v) for v in values]
    if not values:
        raise ValueError("no window scores")
    if len(values) == 1:
        return values[0]
    return float(np.prod(values))


@dataclass
class FitReport:
    gas: str
    per_window: List[WindowFit]
    dnorm_combined: Optional[float]
    alpha_combined: Optional[float]
    pairing_diagnostics: dict
    status: str = "ok"
    message: str = ""
    candidate_id: int = 0
    scene_id: str = "scene"

    @property
    def fitted(self):
        return self.status == "ok"

    def to_dict(self):
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "gas": self.gas,
            "scene_id": self.scene_id,
            "candidate_id": self.candidate_id,
            "status": self.status,
            "message": self.message,
            "dnorm_combined": self.dnorm_combined,
            "alpha_combined": self.alpha_combined,
            "pairing_diagnostics": dict(self.pairing_diagnostics),
            "per_window": [w.to_dict() for w in self.per_window],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ConfigError(f"unsupported fit report schema {d.get('schema_version')!r}")
        return cls(gas=d["gas"], per_window=[WindowFit.from_dict(w) for w in d["per_window"]],
                   dnorm_combined=d["dnorm_combined"], alpha_combined=d["alpha_combined"],
                   pairing_diagnostics=dict(d["pairing_diagnostics"]), status=d["status"],
                   message=d.get("message", ""), candidate_id=d["candidate_id"],
                   scene_id=d["scene_id"])


def fit_window(curve: TransmittanceCurve, target: GasTarget, degree=2, **fitter_params) -> dict:
    k = target.k_coeffs[curve.band_index]
    X = np.column_stack([curve.wavelengths, k])
    fitter = TransmittanceFitter(degree=degree, **fitter_params).fit(X, curve.values)
    return {
        "alpha_fit": fitter.alpha_,
        "continuum_coeffs": fitter.coef_,
        "dnorm": fitter.dnorm_,
        "residual_curve": fitter.residual_,
        "model": fitter.predict(X),
        "fitter": fitter,
    }


def score_candidate(cand: PlumeCandidate, cube: SpectralCube, emap: EnhancementMap,
                    target: GasTarget, cfg: GasConfig, n_in=40, degree=2,
                    similarity_threshold=0.995, search_radius=150.0, buffer=2,
                    depth_floor=0.01, windows: Optional[FitWindowSet] = None) -> FitReport:
    """Full vetting of one candidate; raises UnfittableError when pairing fails."""
    if cfg.gas != target.gas:
        raise ConfigError(f"config gas {cfg.gas} differs from target gas {target.gas}")
    if emap.alpha.shape != (cube.rows, cube.cols):
        raise ConfigError("enhancement map and cube dimensions differ")
    windows = windows or resolve_windows(cfg, cube)
    in_pix = select_in_plume(cand, emap, n_in)
    pairs = pair_background(in_pix, cand, cube, emap, cfg, windows.out_band,
                            similarity_threshold, search_radius, buffer)
    fits = []
    weights = []
    for w, idx in zip(windows.windows, windows.in_band):
        curve = transmittance(pairs, cube, idx)
        res = fit_window(curve, target, degree=degree, depth_floor=depth_floor)
        fits.append(WindowFit(window=w, dnorm=res["dnorm"], alpha_fit=res["alpha_fit"],
                              continuum_coeffs=res["continuum_coeffs"],
                              wavelengths=curve.wavelengths, transmittance=curve.values,
                              model=res["model"], residual_curve=res["residual_curve"]))
        weights.append(float(target.k_coeffs[curve.band_index].sum()))
    weights = np.asarray(weights)
    alphas = np.array([f.alpha_fit for f in fits])
    alpha_comb = float(alphas @ weights / weights.sum()) if weights.sum() > 0 else float(alphas.mean())
    diag = {
        "n_in": len(in_pix),
        "n_pairs": len(pairs),
        "n_unique_background": len({p.bg_pixel for p in pairs}),
        "mean_similarity": float(np.mean([p.similarity for p in pairs])),
        "mean_in_alpha": float(np.mean([p.in_alpha for p in pairs])),
        "mean_bg_alpha": float(np.mean([p.bg_alpha for p in pairs])),
    }
    return FitReport(gas=cfg.gas, per_window=fits,
                     dnorm_combined=combine_dnorm([f.dnorm for f in fits]),
                     alpha_combined=alpha_comb, pairing_diagnostics=diag,
                     candidate_id=cand.candidate_id, scene_id=cand.scene_id)


class PlumeVetter(BaseEstimator):
    """Scores candidates of one scene; ``fit`` binds the scene, ``transform`` scores.

    Unfittable candidates come back as reports with ``status='unfittable'``
    rather than being dropped.
    """

    def __init__(self, target=None, config=None, n_in=40, degree=2, similarity_threshold=0.995,
                 search_radius=150.0, buffer=2, depth_floor=0.01):
        self.target = target
        self.config = config
        self.n_in = n_in
        self.degree = degree
        self.similarity_threshold = similarity_threshold
        self.search_radius = search_radius
        self.buffer = buffer
        self.depth_floor = depth_floor

    def fit(self, cube: SpectralCube, emap: EnhancementMap):
        self.cube_ = cube
        self.emap_ = emap
        self.windows_ = resolve_windows(self.config, cube)
        return self

    def score_one(self, cand):
        check_is_fitted(self, "cube_")
        try:
            return score_candidate(cand, self.cube_, self.emap_, self.target, self.config,
                                   n_in=self.n_in, degree=self.degree,
                                   similarity_threshold=self.similarity_threshold,
                                   search_radius=self.search_radius, buffer=self.buffer,
                                   depth_floor=self.depth_floor, windows=self.windows_)
        except (UnfittableError, NumericError) as exc:
            diag = getattr(exc, "diagnostics", {})
            logger.info("candidate %s unfittable: %s", cand.candidate_id, exc)
            return FitReport(gas=self.config.gas, per_window=[], dnorm_combined=None,
                             alpha_combined=None, pairing_diagnostics=diag, status="unfittable",
                             message=str(exc), candidate_id=cand.candidate_id,
                             scene_id=cand.scene_id)

    def transform(self, candidates):
        return [self.score_one(c) for c in candidates]

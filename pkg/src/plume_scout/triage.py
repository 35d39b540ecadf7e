"""Binning, prioritisation, emission estimates and the detection digest."""
from __future__ import annotations

import dataclasses
import datetime as _dt
import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from ._version import __version__
from .candidates import PlumeCandidate
from .errors import ConfigError, CubeIOError
from .plume_fit import FitReport
from .signatures import MOLAR_MASS, GasConfig

DIGEST_SCHEMA_VERSION = "1.0"
MOLAR_VOLUME_STP = 22.414  # L/mol
# effective wind U_eff = a * u10 + b (m/s); operator calibration, not a measured relation
UEFF_DEFAULT = (0.34, 0.54)
STRATEGIES = ("ml_confidence", "dnorm_asc", "alpha_desc", "dnorm_product_asc")


class TriageBin(str, enum.Enum):
    HIGH = "HIGH"
    LOW = "LOW"
    IGNORE = "IGNORE"


def bin_for(dnorm, dnorm_high=0.3, dnorm_low=0.5) -> TriageBin:
    """HIGH below ``dnorm_high``; LOW on [dnorm_high, dnorm_low]; IGNORE above or undefined."""
    if dnorm is None or not math.isfinite(dnorm):
        return TriageBin.IGNORE
    if dnorm < dnorm_high:
        return TriageBin.HIGH
    if dnorm <= dnorm_low:
        return TriageBin.LOW
    return TriageBin.IGNORE


def triage(report: FitReport, cfg: GasConfig) -> TriageBin:
    """Bin a fit report; unfittable reports are IGNORE (their status says why)."""
    if not report.fitted:
        return TriageBin.IGNORE
    return bin_for(report.dnorm_combined, cfg.dnorm_high, cfg.dnorm_low)


@dataclass(frozen=True, eq=False)
class RankedDetection:
    candidate: PlumeCandidate
    report: FitReport
    bin: TriageBin
    rank_key: tuple = ()
    emission: Optional[dict] = None

    @property
    def scene_id(self):
        return self.candidate.scene_id

    def to_dict(self):
        r, c = self.candidate.centroid
        rep = self.report
        return {
            "scene_id": self.candidate.scene_id,
            "candidate_id": self.candidate.candidate_id,
            "gas": rep.gas,
            "bin": self.bin.value,
            "status": rep.status,
            "confidence": self.candidate.confidence,
            "size_px": self.candidate.size_px,
            "centroid": [r, c],
            "dnorm_combined": rep.dnorm_combined,
            "alpha_combined": rep.alpha_combined,
            "windows": [{"window": w.window.as_list(), "dnorm": w.dnorm, "alpha_fit": w.alpha_fit}
                        for w in rep.per_window],
            "emission": self.emission,
        }


def _inf_if_none(v):
    return math.inf if v is None or not math.isfinite(v) else float(v)


def _strategy_key(det: RankedDetection, strategy):
    rep = det.report
    if strategy == "ml_confidence":
        return -float(det.candidate.confidence)
    if strategy == "dnorm_asc":
        # the primary (first) window alone
        return _inf_if_none(rep.per_window[0].dnorm if rep.per_window else None)
    if strategy == "dnorm_product_asc":
        return _inf_if_none(rep.dnorm_combined)
    if strategy == "alpha_desc":
        return -_inf_if_none(rep.alpha_combined) if rep.alpha_combined is not None else math.inf
    raise ConfigError(f"unknown ranking strategy {strategy!r}; choose from {STRATEGIES}")


def rank(dets: Sequence[RankedDetection], strategy="dnorm_product_asc") -> List[RankedDetection]:
    """Total order by the strategy key, ties broken by scene id then centroid."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown ranking strategy {strategy!r}; choose from {STRATEGIES}")
    keyed = []
    for d in dets:
        r, c = d.candidate.centroid
        key = (_strategy_key(d, strategy), d.candidate.scene_id, r, c, d.candidate.candidate_id)
        keyed.append(dataclasses.replace(d, rank_key=key))
    return sorted(keyed, key=lambda d: d.rank_key)


def estimate_emission(cand: PlumeCandidate, emap, wind_10m, pixel_area, gas=None,
                      ueff=UEFF_DEFAULT) -> dict:
    """Integrated-mass-enhancement flux estimate.

    IME (kg) = sum(alpha) * 1e-6 * pixel_area * M / 22.414, with alpha in
    ppm m and M in g/mol (so M / 22.414 is kg/m3 at STP). The plume length
    scale is sqrt(size * pixel_area) and the rate U_eff * IME / L in kg/h.
    """
    if pixel_area <= 0:
        raise ConfigError("pixel_area must be positive")
    if wind_10m < 0:
        raise ConfigError("wind speed must be non-negative")
    gas = gas or cand.gas
    if gas not in MOLAR_MASS:
        raise ConfigError(f"no molar mass for gas {gas!r}")
    alpha = np.asarray(getattr(emap, "alpha", emap), dtype=np.float64)
    vals = alpha[cand.pixels[:, 0], cand.pixels[:, 1]]
    total = float(np.sum(np.nan_to_num(vals, nan=0.0)))
    ime = total * 1e-6 * pixel_area * MOLAR_MASS[gas] / MOLAR_VOLUME_STP
    length = math.sqrt(cand.size_px * pixel_area)
    a, b = ueff
    u = a * wind_10m + b
    return {"rate_kg_h": u * ime / length * 3600.0, "ime_kg": ime, "ueff_m_s": u,
            "L_m": length, "wind_m_s": float(wind_10m)}


# ------------------------------------------------------------------ digest

def _canon(obj):
    """JSON-ready copy with floats at 6 significant digits and non-finite -> null."""
    if isinstance(obj, dict):
        return {str(k): _canon(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canon(v) for v in obj]
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            return None
        v = float(f"{v:.6g}")
        return 0.0 if v == 0 else v
    if isinstance(obj, np.ndarray):
        return _canon(obj.tolist())
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_canon(obj), sort_keys=True, indent=1, allow_nan=False) + "\n"


def config_hash(*parts) -> str:
    """Short stable hash of configuration dictionaries."""
    blob = json.dumps([_canon(p) for p in parts], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


@dataclass
class Digest:
    date: str
    scenes_processed: int
    detections: List[RankedDetection]
    config_hash: str
    version: str = __version__
    strategy: str = "dnorm_product_asc"
    failures: List[dict] = field(default_factory=list)
    bins: Sequence[str] = ("HIGH", "LOW", "IGNORE")

    def to_dict(self):
        dets = [dict(d.to_dict(), rank=i + 1) for i, d in enumerate(self.detections)]
        counts = {b.value: sum(d.bin == b for d in self.detections) for b in TriageBin}
        return {
            "schema_version": DIGEST_SCHEMA_VERSION,
            "date": self.date,
            "version": self.version,
            "config_hash": self.config_hash,
            "strategy": self.strategy,
            "bins": list(self.bins),
            "scenes_processed": self.scenes_processed,
            "n_detections": len(dets),
            "counts": counts,
            "detections": dets,
            "failures": sorted(self.failures, key=lambda f: (str(f.get("scene")), str(f.get("error")))),
        }

    def to_json(self):
        return canonical_json(self.to_dict())


def emit_digest(dets: Sequence[RankedDetection], meta: Optional[dict] = None, path=None,
                strategy="dnorm_product_asc", bins=None) -> Digest:
    """Rank, filter and (optionally) write the digest.

    ``meta`` may carry ``date`` (UTC ``YYYY-MM-DD``; defaults to today),
    ``scenes_processed``, ``config_hash`` and ``failures``. ``bins`` limits
    which triage bins are listed, e.g. ``("HIGH",)``.
    """
    meta = dict(meta or {})
    bins = tuple(TriageBin(b).value for b in (bins or ("HIGH", "LOW", "IGNORE")))
    kept = [d for d in dets if d.bin.value in bins]
    date = meta.get("date") or _dt.datetime.now(_dt.timezone.utc).date().isoformat()
    digest = Digest(date=str(date),
                    scenes_processed=int(meta.get("scenes_processed",
                                                  len({d.scene_id for d in dets}))),
                    detections=rank(kept, strategy), config_hash=str(meta.get("config_hash", "")),
                    strategy=strategy, failures=list(meta.get("failures", [])), bins=bins)
    if path is not None:
        try:
            Path(path).write_text(digest.to_json(), encoding="utf-8")
        except OSError as exc:
            raise CubeIOError(f"cannot write digest {path}: {exc}") from exc
    return digest


def export_plot_bundle(det: RankedDetection, emap, directory, pad=8):
    """Enhancement chip and per-window fit curves as plain text, one file each."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        pix = det.candidate.pixels
        alpha = np.asarray(emap.alpha)
        r0, c0 = np.maximum(pix.min(axis=0) - pad, 0)
        r1, c1 = np.minimum(pix.max(axis=0) + pad + 1, alpha.shape)
        np.savetxt(d / "chip.txt", alpha[r0:r1, c0:c1], fmt="%.6g",
                   header=f"alpha ppm m, rows {r0}:{r1}, cols {c0}:{c1}")
        written = [d / "chip.txt"]
        for i, w in enumerate(det.report.per_window):
            for name, vals in (("transmittance", w.transmittance), ("model", w.model)):
                p = d / f"window{i}_{name}.txt"
                np.savetxt(p, np.column_stack([w.wavelengths, vals]), fmt="%.8g",
                           header=f"wavelength_nm {name}")
                written.append(p)
    except OSError as exc:
        raise CubeIOError(f"cannot write plot bundle to {d}: {exc}") from exc
    return written

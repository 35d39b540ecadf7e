"""Per-scene processing and batch digest assembly behind the CLI.

Outputs live under ``<out>/<scene_id>/<gas>/<config_hash>/``; a scene whose
directory already holds ``scene.json`` is not recomputed. Digests are always
assembled from those files, so fresh runs, resumed runs and any degree of
parallelism yield the same bytes.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from . import synth
from ._validation import check_gas
from .candidates import (PlumeCandidate, ProposerParams, builtin_proposer, extract_candidates,
                         filter_by_size, import_mask, write_geojson)
from .cube_io import read_cube, write_cube
from .errors import ConfigError, CubeIOError, PlumeScoutError
from .matched_filter import MatchedFilter
from .plume_fit import FitReport, PlumeVetter
from .signatures import GasConfig, default_config, load_config, load_target
from .triage import (RankedDetection, TriageBin, config_hash, emit_digest, estimate_emission,
                     triage)

logger = logging.getLogger(__name__)

CONFIG_ENV = "PLUME_SCOUT_CONFIG"
SCENE_FILE = "scene.json"


@dataclass(frozen=True)
class RunConfig:
    gas: str = "CH4"
    variant: str = "wmf"
    proposer: str = "builtin"
    config_path: Optional[str] = None
    out_dir: str = "plume_scout_out"
    jobs: int = 1
    min_size: Optional[int] = None
    target_path: Optional[str] = None
    bands: str = "wide"
    background_clip: Optional[float] = 3.0
    base_threshold: float = 0.5
    logistic_center: float = 500.0
    logistic_scale: float = 200.0
    wind_10m: Optional[float] = None
    pixel_area: float = 3600.0
    strategy: str = "dnorm_product_asc"

    def __post_init__(self):
        object.__setattr__(self, "gas", check_gas(self.gas))
        if self.variant.lower() not in ("cmf", "wmf"):
            raise ConfigError(f"unknown matched-filter variant {self.variant!r}")
        if int(self.jobs) < 1:
            raise ConfigError("jobs must be >= 1")
        for name in ("config_path", "target_path"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{name.replace('_', ' ')} {p} does not exist")
        if self.proposer != "builtin" and "{scene_id}" not in self.proposer \
                and not Path(self.proposer).exists() \
                and not Path(self.proposer).with_suffix(".hdr").exists():
            raise ConfigError(f"proposer mask {self.proposer} does not exist")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_file(cls, path, **overrides):
        """Read the optional ``run:`` section of a YAML config; ``overrides`` win."""
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise CubeIOError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        run = dict(raw.get("run", {}) if isinstance(raw, dict) else {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(run) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        run.update({k: v for k, v in overrides.items() if v is not None})
        run.setdefault("config_path", str(path))
        return cls(**run)

    def gas_config(self) -> GasConfig:
        cfg = load_config(self.config_path, self.gas) if self.config_path else default_config(self.gas)
        if self.min_size is not None:
            cfg = cfg.replace(min_candidate_pixels=int(self.min_size))
        return cfg

    def proposer_params(self):
        return ProposerParams(base_threshold=self.base_threshold,
                              logistic_center=self.logistic_center,
                              logistic_scale=self.logistic_scale)

    def hash(self):
        """Hash of every setting that can change a scene's outputs."""
        d = dataclasses.asdict(self)
        for k in ("out_dir", "jobs", "config_path", "target_path"):
            d.pop(k)
        if self.proposer != "builtin":
            d["proposer"] = "external"
        target = None
        if self.target_path:
            target = hashlib.sha256(Path(self.target_path).read_bytes()).hexdigest()
        return config_hash(d, self.gas_config().to_dict(), target)


def resolve_config_path(path=None):
    """Explicit path, else the environment fallback, else None."""
    return path or os.environ.get(CONFIG_ENV) or None


def scene_dir(run: RunConfig, scene_id):
    return Path(run.out_dir) / scene_id / run.gas / run.hash()


def _target_for(run: RunConfig, cube):
    if run.target_path:
        return load_target(run.target_path, cube.grid, gas=run.gas)
    return synth.default_target(run.gas, cube.grid)


def enhancement(cube, run: RunConfig):
    if cube.grid is None:
        raise ConfigError("scene has no wavelength grid")
    target = _target_for(run, cube)
    mf = MatchedFilter(target, variant=run.variant, bands=run.bands,
                       background_clip=run.background_clip, config=run.gas_config())
    return target, mf.fit(cube).transform(cube)


def candidate_to_dict(c: PlumeCandidate):
    return {"pixels": c.pixels.tolist(), "confidence": c.confidence,
            "outline": [list(map(list, ring)) for ring in c.outline],
            "scene_id": c.scene_id, "gas": c.gas, "candidate_id": c.candidate_id}


def candidate_from_dict(d):
    return PlumeCandidate(pixels=np.asarray(d["pixels"], dtype=np.intp).reshape(-1, 2),
                          confidence=float(d["confidence"]),
                          outline=tuple(tuple(tuple(v) for v in ring) for ring in d["outline"]),
                          scene_id=d["scene_id"], gas=d["gas"], candidate_id=int(d["candidate_id"]))


def detection_to_dict(det: RankedDetection):
    return {"candidate": candidate_to_dict(det.candidate), "report": det.report.to_dict(),
            "bin": det.bin.value, "emission": det.emission}


def detection_from_dict(d):
    return RankedDetection(candidate=candidate_from_dict(d["candidate"]),
                           report=FitReport.from_dict(d["report"]), bin=TriageBin(d["bin"]),
                           emission=d.get("emission"))


def _write_json(path, obj):
    try:
        Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1), encoding="utf-8")
    except OSError as exc:
        raise CubeIOError(f"cannot write {path}: {exc}") from exc


def process_scene(scene_path, run: RunConfig, resume=True) -> dict:
    """Matched filter, proposals, vetting and triage for one scene; writes its outputs."""
    cube = read_cube(scene_path)
    scene_id = cube.scene_id if "scene id" in cube.metadata else Path(scene_path).stem
    out = scene_dir(run, scene_id)
    if resume and (out / SCENE_FILE).is_file():
        logger.info("scene %s already processed in %s", scene_id, out)
        return json.loads((out / SCENE_FILE).read_text(encoding="utf-8"))
    cfg = run.gas_config()
    target, emap = enhancement(cube, run)
    if run.proposer == "builtin":
        score = builtin_proposer(emap, run.proposer_params())
    else:
        score = import_mask(run.proposer.format(scene_id=scene_id), (cube.rows, cube.cols), run.gas)
    cands = extract_candidates(score, run.proposer_params(), scene_id=scene_id)
    cands = [dataclasses.replace(c, gas=run.gas) for c in
             filter_by_size(cands, cfg.min_candidate_pixels)]
    reports = PlumeVetter(target, cfg).fit(cube, emap).transform(cands)
    dets = []
    for c, rep in zip(cands, reports):
        em = None
        if run.wind_10m is not None:
            em = estimate_emission(c, emap, run.wind_10m, run.pixel_area, run.gas)
        dets.append(RankedDetection(candidate=c, report=rep, bin=triage(rep, cfg), emission=em))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CubeIOError(f"cannot create output directory {out}: {exc}") from exc
    write_cube(emap.to_cube(scene_id=scene_id), out / "enhancement.hdr")
    write_geojson(cands, out / "candidates.geojson")
    _write_json(out / "detections.json", [detection_to_dict(d) for d in dets])
    summary = {
        "scene_id": scene_id,
        "scene_path": str(scene_path),
        "gas": run.gas,
        "config_hash": run.hash(),
        "output_dir": str(out),
        "n_candidates": len(cands),
        "n_unfittable": sum(not r.fitted for r in reports),
        "bins": {b.value: sum(d.bin == b for d in dets) for b in TriageBin},
    }
    # written last: its presence marks the scene as complete
    _write_json(out / SCENE_FILE, summary)
    return summary


def load_detections(summary) -> List[RankedDetection]:
    path = Path(summary["output_dir"]) / "detections.json"
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CubeIOError(f"cannot read {path}: {exc}") from exc
    return [detection_from_dict(d) for d in raw]


def _safe_process(args):
    path, run = args
    try:
        return {"ok": True, "summary": process_scene(path, run)}
    except PlumeScoutError as exc:
        return {"ok": False, "scene": str(path), "category": exc.category, "error": str(exc)}


def read_scene_list(path):
    """Scene paths, one per line; blank lines and ``#`` comments skipped.

    Relative entries resolve against the list file's directory.
    """
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CubeIOError(f"cannot read scene list {path}: {exc}") from exc
    base = Path(path).parent
    out = []
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if line:
            p = Path(line)
            out.append(str(p if p.is_absolute() else base / p))
    return out


def run_batch(scenes, run: RunConfig, date=None, bins=None, digest_path=None):
    """Process scenes (in parallel if ``run.jobs > 1``) and emit one digest."""
    tasks = [(s, run) for s in scenes]
    if run.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(run.jobs, len(tasks))) as pool:
            results = list(pool.map(_safe_process, tasks))
    else:
        results = [_safe_process(t) for t in tasks]
    dets, failures, processed = [], [], 0
    for res in results:
        if res["ok"]:
            processed += 1
            dets.extend(load_detections(res["summary"]))
        else:
            logger.warning("scene %s failed (%s): %s", res["scene"], res["category"], res["error"])
            failures.append({"scene": res["scene"], "category": res["category"],
                             "error": res["error"]})
    meta = {"date": date, "scenes_processed": processed, "config_hash": run.hash(),
            "failures": failures}
    if digest_path is None:
        Path(run.out_dir).mkdir(parents=True, exist_ok=True)
        tag = date or "latest"
        digest_path = Path(run.out_dir) / f"digest_{run.gas}_{tag}_{run.hash()}.json"
    digest = emit_digest(dets, meta, path=digest_path, strategy=run.strategy, bins=bins)
    return digest, Path(digest_path)

"""Command-line entry point: ``plume-scout {mf,detect,digest,synth}``.

stdout carries one JSON summary per command; diagnostics go to stderr.
Exit codes: 0 success, 2 configuration, 3 I/O, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline, synth
from ._version import __version__
from .cube_io import SpectralCube, read_cube, write_cube
from .errors import ConfigError, CubeIOError, PlumeScoutError

logger = logging.getLogger("plume_scout")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OTHER = 0, 2, 3, 4, 1
_EXIT = {"CONFIG": EXIT_CONFIG, "IO": EXIT_IO, "NUMERIC": EXIT_NUMERIC}


def _run_config(args) -> pipeline.RunConfig:
    config = pipeline.resolve_config_path(getattr(args, "config", None))
    overrides = {
        "gas": args.gas,
        "variant": getattr(args, "variant", None),
        "proposer": getattr(args, "proposer", None),
        "out_dir": args.out,
        "jobs": getattr(args, "jobs", None),
        "min_size": getattr(args, "min_size", None),
        "target_path": getattr(args, "target", None),
        "wind_10m": getattr(args, "wind", None),
        "strategy": getattr(args, "strategy", None),
    }
    if config:
        if not Path(config).is_file():
            raise ConfigError(f"config file {config} does not exist")
        run = pipeline.RunConfig.from_file(config, **overrides)
    else:
        run = pipeline.RunConfig(**{k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "no_clip", False):
        run = run.replace(background_clip=None)
    return run


def cmd_mf(args):
    run = _run_config(args)
    cube = read_cube(args.scene)
    scene_id = cube.scene_id if "scene id" in cube.metadata else Path(args.scene).stem
    _, emap = pipeline.enhancement(cube, run)
    out = pipeline.scene_dir(run, scene_id)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CubeIOError(f"cannot create {out}: {exc}") from exc
    hdr = write_cube(emap.to_cube(scene_id=scene_id), out / "enhancement.hdr")
    fin = emap.alpha[np.isfinite(emap.alpha)]
    return {"scene_id": scene_id, "enhancement": str(hdr), "variant": emap.variant,
            "gas": emap.gas, "alpha_median": float(np.median(fin)) if fin.size else None}


def cmd_detect(args):
    run = _run_config(args)
    return pipeline.process_scene(args.scene, run, resume=not args.force)


def cmd_digest(args):
    run = _run_config(args)
    scenes = pipeline.read_scene_list(args.scenes)
    bins = ("HIGH",) if args.high_only else None
    digest, path = pipeline.run_batch(scenes, run, date=args.date, bins=bins,
                                      digest_path=args.digest)
    return {"digest": str(path), "scenes_processed": digest.scenes_processed,
            "n_detections": len(digest.detections), "n_failures": len(digest.failures),
            "config_hash": digest.config_hash}


def _truth_raster(arr, scene_id, what):
    return SpectralCube(np.asarray(arr, dtype=np.float32)[:, :, None],
                        metadata={"scene id": scene_id, "truth": what})


def cmd_synth(args):
    spec = synth.load_spec(args.spec)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CubeIOError(f"cannot create {out}: {exc}") from exc
    gases = sorted({p.gas for p in spec.plumes} | {args.gas})
    targets = {g: synth.default_target(g, spec.grid) for g in gases}
    cube, truth = synth.generate(spec, targets)
    sid = cube.scene_id
    files = {"scene": str(write_cube(cube, out / f"{sid}.hdr"))}
    rasters = {
        "alpha": truth.alpha_field,
        "plume_mask": truth.plume_mask,
        "class_map": truth.class_map,
        "clutter_mask": (np.any(truth.clutter_masks, axis=0) if truth.clutter_masks
                         else np.zeros(truth.class_map.shape, bool)),
    }
    for name, arr in rasters.items():
        files[name] = str(write_cube(_truth_raster(arr, sid, name), out / f"{sid}_truth_{name}.hdr"))
    return {"scene_id": sid, "files": files}


def build_parser():
    p = argparse.ArgumentParser(prog="plume-scout",
                                description="Trace-gas plume detection and spectral vetting.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, detect=True):
        sp.add_argument("--gas", default="CH4")
        sp.add_argument("--config", help=f"YAML config (falls back to ${pipeline.CONFIG_ENV})")
        sp.add_argument("--out", default=None, help="output root directory")
        sp.add_argument("--target", help="two-column absorption coefficient file (nm, k)")
        sp.add_argument("--variant", choices=("cmf", "wmf"), default=None)
        sp.add_argument("--no-clip", action="store_true",
                        help="single-pass background statistics")
        if detect:
            sp.add_argument("--proposer", default=None,
                            help="'builtin' or a score raster path ({scene_id} expands)")
            sp.add_argument("--min-size", type=int, default=None)
            sp.add_argument("--wind", type=float, default=None, help="10 m wind speed, m/s")
            sp.add_argument("--strategy", default=None)

    sp = sub.add_parser("mf", help="matched-filter enhancement raster")
    sp.add_argument("scene")
    common(sp, detect=False)
    sp.set_defaults(func=cmd_mf)

    sp = sub.add_parser("detect", help="full pipeline on one scene")
    sp.add_argument("scene")
    common(sp)
    sp.add_argument("--force", action="store_true", help="recompute existing outputs")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("digest", help="process a scene list and write a digest")
    sp.add_argument("scenes", help="text file with one scene path per line")
    common(sp)
    sp.add_argument("--jobs", type=int, default=None)
    sp.add_argument("--date", default=None, help="digest date, YYYY-MM-DD (default: today UTC)")
    sp.add_argument("--digest", default=None, help="digest output path")
    sp.add_argument("--high-only", action="store_true")
    sp.set_defaults(func=cmd_digest)

    sp = sub.add_parser("synth", help="generate a synthetic scene and its truth rasters")
    sp.add_argument("spec", help="YAML scene description")
    sp.add_argument("--out", default=".")
    sp.add_argument("--gas", default="CH4")
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        result = args.func(args)
    except PlumeScoutError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return _EXIT.get(exc.category, EXIT_OTHER)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

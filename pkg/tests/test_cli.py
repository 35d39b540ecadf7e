import json

import numpy as np
import pytest

from plume_scout import pipeline, synth
from plume_scout.candidates import ScoreMap, export_score_map
from plume_scout.cli import main
from plume_scout.cube_io import read_cube, write_cube


def write_scene(directory, spec):
    cube, truth = synth.generate(spec)
    return write_cube(cube, directory / f"{cube.scene_id}.hdr"), truth


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), err


def test_mf_recovers_injected_alpha(tmp_path, capsys):
    scene, truth = write_scene(tmp_path, synth.demo_spec(31))
    code, res, _ = run_cli(capsys, "mf", scene, "--out", tmp_path / "out")
    assert code == 0
    alpha = read_cube(res["enhancement"]).data[:, :, 0]
    pm = truth.plume_mask
    assert alpha[pm].mean() == pytest.approx(truth.alpha_field[pm].mean(), rel=0.15)


def test_exit_codes(tmp_path, capsys):
    scene, _ = write_scene(tmp_path, synth.demo_spec(1, rows=16, cols=16))
    code, _, err = run_cli(capsys, "mf", tmp_path / "nope.hdr", "--out", tmp_path)
    assert code == 3 and err.startswith("IO:")
    code, _, err = run_cli(capsys, "mf", scene, "--gas", "XE", "--out", tmp_path)
    assert code == 2 and err.startswith("CONFIG:")
    bad = tmp_path / "bad.yaml"
    bad.write_text("rows: 8\ncols: 8\ngrid: {bands: 4}\ncovariance: [[1, 2, 0, 0], [2, 1, 0, 0],"
                   " [0, 0, 1, 0], [0, 0, 0, 1]]\n")
    code, _, err = run_cli(capsys, "synth", bad, "--out", tmp_path / "s")
    assert code == 2 and "definite" in err
    code, _, _ = run_cli(capsys, "detect", scene, "--config", tmp_path / "missing.yaml")
    assert code == 2


def test_numeric_exit_code(tmp_path, capsys):
    from plume_scout.cube_io import SpectralCube
    cube = SpectralCube(np.ones((8, 8, 50), np.float32), grid=synth.default_grid(),
                        metadata={"scene id": "flat"})
    write_cube(cube, tmp_path / "flat.hdr")
    code, _, err = run_cli(capsys, "mf", tmp_path / "flat.hdr", "--out", tmp_path)
    assert code == 4 and err.startswith("NUMERIC:")


def test_detect_plumes_beat_clutter_external_mask(tmp_path, capsys):
    spec = synth.demo_spec(8, n_plumes=2, n_clutter=2, clutter_amplitude=0.08)
    scene, truth = write_scene(tmp_path, spec)
    mask = truth.plume_mask | np.any(truth.clutter_masks, axis=0)
    export_score_map(ScoreMap(mask.astype(float)), tmp_path / "mask.hdr")
    code, res, _ = run_cli(capsys, "detect", scene, "--out", tmp_path / "out",
                           "--proposer", tmp_path / "mask.hdr")
    assert code == 0 and res["n_candidates"] == 4
    dets = json.loads((tmp_path / "out").joinpath(*_rel(res), "detections.json").read_text())
    plume, clutter = [], []
    from scipy.ndimage import label
    comps, n = label(mask, structure=np.ones((3, 3)))
    pix_sets = {frozenset(map(tuple, np.argwhere(comps == i).tolist())) for i in range(1, n + 1)}
    for d in dets:
        px = frozenset(map(tuple, d["candidate"]["pixels"]))
        assert px in pix_sets  # the proposer is bypassed: candidates are the mask components
        r, c = d["candidate"]["pixels"][0]
        dn = d["report"]["dnorm_combined"]
        (plume if truth.plume_mask[r, c] else clutter).append(np.inf if dn is None else dn)
    assert len(plume) == 2 and len(clutter) == 2
    assert max(plume) < min(clutter)


def _rel(summary):
    return [summary["scene_id"], summary["gas"], summary["config_hash"]]


def test_detect_builtin_and_resume(tmp_path, capsys):
    spec = synth.demo_spec(8, n_plumes=2, n_clutter=2)
    scene, truth = write_scene(tmp_path, spec)
    code, res, _ = run_cli(capsys, "detect", scene, "--out", tmp_path / "out", "--wind", "3")
    assert code == 0 and res["bins"]["HIGH"] >= 2
    out = tmp_path / "out" / res["scene_id"] / "CH4" / res["config_hash"]
    for f in ("enhancement.hdr", "candidates.geojson", "detections.json", "scene.json"):
        assert (out / f).is_file()
    dets = json.loads((out / "detections.json").read_text())
    assert all(d["emission"]["rate_kg_h"] > 0 for d in dets if d["bin"] == "HIGH")
    before = (out / "detections.json").stat().st_mtime_ns
    code, again, _ = run_cli(capsys, "detect", scene, "--out", tmp_path / "out", "--wind", "3")
    assert again == res and (out / "detections.json").stat().st_mtime_ns == before


def test_background_scenes_have_no_high_detections(tmp_path):
    run = pipeline.RunConfig(out_dir=str(tmp_path / "out"))
    high = 0
    for seed in range(20):
        scene, _ = write_scene(tmp_path, synth.demo_spec(200 + seed, n_plumes=0))
        high += pipeline.process_scene(scene, run)["bins"]["HIGH"]
    assert high == 0


def make_batch(tmp_path, corrupt=False):
    paths = []
    for i in range(5):
        spec = synth.demo_spec(40 + i, n_plumes=1 if i < 3 else 0)
        paths.append(write_scene(tmp_path, spec)[0])
    if corrupt:
        bad = tmp_path / "broken.hdr"
        bad.write_text(paths[0].read_text())
        (tmp_path / "broken.img").write_bytes(b"\0" * 100)
        paths.append(bad)
    lst = tmp_path / "scenes.txt"
    lst.write_text("# nightly batch\n" + "\n".join(p.name for p in paths) + "\n")
    return lst


def test_digest_lists_high_detections(tmp_path, capsys):
    lst = make_batch(tmp_path)
    code, res, _ = run_cli(capsys, "digest", lst, "--out", tmp_path / "out", "--date",
                           "2024-05-01", "--high-only")
    assert code == 0 and res["scenes_processed"] == 5
    doc = json.loads(open(res["digest"]).read())
    assert doc["date"] == "2024-05-01" and doc["bins"] == ["HIGH"]
    assert sorted({d["scene_id"] for d in doc["detections"]}) == [
        "synth-0040", "synth-0041", "synth-0042"]


def test_digest_records_failure(tmp_path, capsys):
    lst = make_batch(tmp_path, corrupt=True)
    code, res, _ = run_cli(capsys, "digest", lst, "--out", tmp_path / "out", "--date", "2024-05-01")
    assert code == 0 and res["n_failures"] == 1 and res["scenes_processed"] == 5
    doc = json.loads(open(res["digest"]).read())
    assert [f["category"] for f in doc["failures"]] == ["IO"]
    assert doc["failures"][0]["scene"].endswith("broken.hdr")


def test_synth_command(tmp_path, capsys):
    spec = tmp_path / "s.yaml"
    spec.write_text("rows: 24\ncols: 24\nseed: 2\nscene_id: fx\n"
                    "plumes: [{origin: [12, 3], peak_alpha: 1800}]\n")
    code, res, _ = run_cli(capsys, "synth", spec, "--out", tmp_path / "a")
    assert code == 0
    code, res2, _ = run_cli(capsys, "synth", spec, "--out", tmp_path / "b")
    a, b = tmp_path / "a", tmp_path / "b"
    assert sorted(p.name for p in a.iterdir()) == sorted(p.name for p in b.iterdir())
    for p in a.iterdir():
        assert p.read_bytes() == (b / p.name).read_bytes()
    truth = read_cube(res["files"]["alpha"]).data[:, :, 0]
    assert truth.max() == pytest.approx(1800.0)
    assert read_cube(res["files"]["scene"]).bands == 50


def test_config_from_environment(tmp_path, capsys, monkeypatch):
    scene, _ = write_scene(tmp_path, synth.demo_spec(31))
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(f"gas_config:\n  gas: CH4\n  mf_background_threshold: 40\n"
                   f"run:\n  out_dir: {tmp_path / 'env_out'}\n  variant: cmf\n")
    monkeypatch.setenv(pipeline.CONFIG_ENV, str(cfg))
    code, res, _ = run_cli(capsys, "mf", scene)
    assert code == 0 and res["variant"] == "CMF"
    assert res["enhancement"].startswith(str(tmp_path / "env_out"))
    cfg.write_text("run:\n  bogus: 1\n")
    code, _, _ = run_cli(capsys, "mf", scene)
    assert code == 2


def test_config_hash_tracks_settings():
    a = pipeline.RunConfig()
    assert a.hash() == pipeline.RunConfig(out_dir="elsewhere", jobs=4).hash()
    assert a.hash() != pipeline.RunConfig(variant="cmf").hash()
    assert a.hash() != pipeline.RunConfig(min_size=10).hash()

import dataclasses
import json

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from plume_scout import synth
from plume_scout.candidates import candidate_from_mask
from plume_scout.cube_io import BandWindow, SpectralCube, WavelengthGrid
from plume_scout.errors import ConfigError, NumericError, UnfittableError
from plume_scout.matched_filter import EnhancementMap, MatchedFilter
from plume_scout.plume_fit import (FitReport, PlumeVetter, SpectrumPair, TransmittanceCurve,
                                   TransmittanceFitter, background_eligible, combine_dnorm,
                                   fit_window, pair_background, score_candidate, select_in_plume,
                                   transmittance)
from plume_scout.signatures import GasTarget, default_config

CFG = default_config("CH4")


def make_emap(alpha):
    alpha = np.asarray(alpha, dtype=float)
    return EnhancementMap(alpha=alpha, gas="CH4", variant="WMF", band_set=np.arange(3))


def window_curve(values, grid, idx):
    idx = np.asarray(idx)
    return TransmittanceCurve(wavelengths=grid.centers[idx], values=np.asarray(values),
                              n_pairs=5, band_index=idx)


# ------------------------------------------------------------------ selection

def test_select_small_candidate_returns_all():
    m = np.zeros((5, 5), bool)
    m[2, 1:4] = True
    emap = make_emap(np.arange(25.0).reshape(5, 5))
    chosen = select_in_plume(candidate_from_mask(m), emap, 40)
    assert sorted(chosen) == [(2, 1), (2, 2), (2, 3)]


def test_select_grows_around_maximum():
    m = np.zeros((7, 7), bool)
    m[1:6, 1:6] = True
    alpha = np.zeros((7, 7))
    alpha[3, 3] = 100.0
    alpha[1, 1] = 50.0
    chosen = select_in_plume(candidate_from_mask(m), make_emap(alpha), 9)
    ring = {(3 + dr, 3 + dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)}
    assert chosen[0] == (3, 3)
    assert set(chosen) == ring


def test_select_clips_to_candidate():
    m = np.zeros((4, 4), bool)
    m[0, :] = True
    alpha = np.ones((4, 4))
    alpha[0, 0] = 10.0
    alpha[1, 1] = 99.0  # outside the candidate
    chosen = select_in_plume(candidate_from_mask(m), make_emap(alpha), 2)
    assert chosen == [(0, 0), (0, 1)]


def test_select_on_plume_favors_strong_pixels(plume_scene):
    _, _, _, truth, emap = plume_scene
    cand = candidate_from_mask(truth.plume_mask)
    chosen = select_in_plume(cand, emap)
    assert len(chosen) == 40 and len(set(chosen)) == 40
    a = emap.alpha
    sel = np.mean([a[p] for p in chosen])
    assert sel >= a[truth.plume_mask].mean()


# ------------------------------------------------------------------ pairing

def uniform_cube(rows=12, cols=12, bands=30):
    grid = synth.default_grid(bands)
    spec = np.linspace(1.0, 2.0, bands)
    return SpectralCube(np.broadcast_to(spec, (rows, cols, bands)).copy(), grid=grid)


def test_uniform_background_similarity_one():
    cube = uniform_cube()
    m = np.zeros((12, 12), bool)
    m[5:7, 5:8] = True
    cand = candidate_from_mask(m)
    emap = make_emap(np.where(m, 500.0, 0.0))
    pairs = pair_background(select_in_plume(cand, emap), cand, cube, emap, CFG)
    assert len(pairs) == 6
    assert all(p.similarity == pytest.approx(1.0) for p in pairs)
    assert [p.in_pixel for p in pairs] == sorted(p.in_pixel for p in pairs)


def test_eligibility_is_strict_and_buffered():
    cube = uniform_cube()
    m = np.zeros((12, 12), bool)
    m[5, 5] = True
    alpha = np.zeros((12, 12))
    alpha[0, 0] = CFG.mf_background_threshold
    alpha[0, 1] = np.nextafter(CFG.mf_background_threshold, 0)
    elig = background_eligible(candidate_from_mask(m), cube, make_emap(alpha), CFG, buffer=2)
    assert not elig[0, 0] and elig[0, 1]
    assert not elig[3:8, 3:8].any()
    assert elig[2, 2] and elig[8, 8]


def test_pairs_satisfy_invariants(plume_scene):
    _, _, cube, truth, emap = plume_scene
    cand = candidate_from_mask(truth.plume_mask)
    pairs = pair_background(select_in_plume(cand, emap), cand, cube, emap, CFG)
    for p in pairs:
        assert isinstance(p, SpectrumPair)
        assert p.bg_alpha < CFG.mf_background_threshold
        assert p.similarity >= 0.995
        assert p.in_pixel != p.bg_pixel
        assert not truth.plume_mask[p.bg_pixel]


def test_pairing_matches_albedo_class():
    spec = synth.demo_spec(3, n_classes=2, class_layout="rows")
    target = synth.default_target("CH4", spec.grid)
    cube, truth = synth.generate(spec, {"CH4": target})
    emap = MatchedFilter(target, background_clip=3.0).fit(cube).transform(cube)
    cand = candidate_from_mask(truth.plume_mask)
    in_pix = select_in_plume(cand, emap)
    cm = truth.class_map
    assert len({cm[p] for p in in_pix}) == 2  # the plume straddles the class boundary
    pairs = pair_background(in_pix, cand, cube, emap, CFG)
    assert np.mean([cm[p.in_pixel] == cm[p.bg_pixel] for p in pairs]) >= 0.9


def test_insufficient_background_is_unfittable():
    cube = uniform_cube(6, 6)
    m = np.zeros((6, 6), bool)
    m[1:5, 1:5] = True
    cand = candidate_from_mask(m)
    emap = make_emap(np.full((6, 6), 100.0))
    with pytest.raises(UnfittableError) as info:
        pair_background(select_in_plume(cand, emap), cand, cube, emap, CFG)
    assert info.value.diagnostics["n_eligible"] == 0


def test_too_few_similar_pairs_is_unfittable():
    cube = uniform_cube()
    data = cube.data.copy()
    m = np.zeros((12, 12), bool)
    m[5:7, 5:8] = True
    data[m] = data[m][:, ::-1]  # a spectrally unlike plume region
    cube = cube.with_data(data)
    cand = candidate_from_mask(m)
    emap = make_emap(np.where(m, 500.0, 0.0))
    with pytest.raises(UnfittableError, match="pairs"):
        pair_background(select_in_plume(cand, emap), cand, cube, emap, CFG)


# ------------------------------------------------------------------ transmittance

def pair_list(in_pix, bg_pix):
    return [SpectrumPair(a, b, 1.0, 0.0, 0.0) for a, b in zip(in_pix, bg_pix)]


def test_transmittance_identity_and_beer_lambert():
    grid = synth.default_grid(20)
    k = synth.absorption_spectrum("CH4", grid.centers)
    rng = np.random.default_rng(0)
    bg = rng.uniform(0.5, 1.0, (5, 20))
    data = np.zeros((2, 5, 20))
    data[0] = bg
    data[1] = bg * np.exp(-1500.0 * k)
    cube = SpectralCube(data, grid=grid)
    idx = np.arange(20)
    same = transmittance(pair_list([(0, i) for i in range(5)], [(0, i) for i in range(5)]), cube, idx)
    np.testing.assert_allclose(same.values, 1.0)
    bl = transmittance(pair_list([(1, i) for i in range(5)], [(0, i) for i in range(5)]), cube, idx)
    np.testing.assert_allclose(bl.values, np.exp(-1500.0 * k), rtol=1e-12)
    assert bl.n_pairs == 5


def test_transmittance_drops_nonpositive_background():
    grid = synth.default_grid(6)
    data = np.ones((2, 5, 6))
    data[0, :, 2] = 0.0
    cube = SpectralCube(data, grid=grid)
    curve = transmittance(pair_list([(1, i) for i in range(5)], [(0, i) for i in range(5)]),
                          cube, np.arange(6))
    assert curve.band_index.tolist() == [0, 1, 3, 4, 5]
    data[0] = 0.0
    with pytest.raises(NumericError):
        transmittance(pair_list([(1, i) for i in range(5)], [(0, i) for i in range(5)]),
                      SpectralCube(data, grid=grid), np.arange(6))
    with pytest.raises(UnfittableError):
        transmittance(pair_list([(1, 0)], [(0, 0)]), cube, np.arange(6))


def test_transmittance_within_noise_band():
    spec = synth.demo_spec(12, dtype="float64").replace(
        plumes=(synth.PlumeSpec(origin=(32, 8), wind_dir=0.0, stretch=2.0, peak_alpha=1500.0,
                                width=2.5),))
    target = synth.default_target("CH4", spec.grid)
    cube, truth = synth.generate(spec, {"CH4": target})
    emap = MatchedFilter(target, background_clip=3.0).fit(cube).transform(cube)
    cand = candidate_from_mask(truth.plume_mask)
    pairs = pair_background(select_in_plume(cand, emap), cand, cube, emap, CFG)
    idx = np.flatnonzero((cube.wavelengths >= 2100) & (cube.wavelengths <= 2440))
    curve = transmittance(pairs, cube, idx)
    ip = np.array([p.in_pixel for p in pairs])
    # oracle: the true mean optical path over the selected in-plume pixels
    a_true = truth.alpha_field[ip[:, 0], ip[:, 1]].mean()
    expected = np.exp(-a_true * target.k_coeffs[idx])
    # each ratio averages n noisy spectra in numerator and denominator; albedo texture adds
    # a per-pixel multiplicative term
    per_px = np.hypot(spec.noise_sigma / 0.3, spec.texture * 3)
    sigma = per_px * np.sqrt(2.0 / len(pairs)) + 0.01
    assert np.all(np.abs(curve.values - expected) <= 3 * sigma)


# ------------------------------------------------------------------ fitting

def fit_xy(a0, grid=None, cont=None):
    grid = grid or synth.default_grid()
    idx = np.flatnonzero((grid.centers >= 2100) & (grid.centers <= 2440))
    k = synth.absorption_spectrum("CH4", grid.centers)[idx]
    wl = grid.centers[idx]
    cont = np.ones_like(wl) if cont is None else cont(wl)
    return np.column_stack([wl, k]), cont * np.exp(-a0 * k), idx


@pytest.mark.parametrize("a0", [100.0, 1500.0, 8000.0])
def test_exact_curve_recovered(a0):
    X, y, _ = fit_xy(a0)
    f = TransmittanceFitter().fit(X, y)
    assert f.alpha_ == pytest.approx(a0, rel=1e-3)
    assert f.dnorm_ <= 1e-6


def test_constant_curve_zero_alpha():
    X, _, _ = fit_xy(0.0)
    y = np.full(X.shape[0], 0.97)
    f = TransmittanceFitter().fit(X, y)
    assert f.alpha_ == 0.0
    np.testing.assert_allclose(f.continuum(X[:, 0]), 0.97, atol=1e-12)
    assert f.depth_ == 0.01  # the depth floor takes over


def test_fit_optimality_local(plume_scene):
    _, target, cube, truth, emap = plume_scene
    rep = score_candidate(candidate_from_mask(truth.plume_mask), cube, emap, target, CFG)
    w = rep.per_window[0]
    idx = np.searchsorted(cube.wavelengths, w.wavelengths)
    X = np.column_stack([w.wavelengths, target.k_coeffs[idx]])
    f = TransmittanceFitter().fit(X, w.transmittance)
    base = f.objective(f.alpha_, f.coef_, X, w.transmittance)
    assert base == pytest.approx(f.objective_)
    for s in (0.99, 1.01):
        assert f.objective(f.alpha_ * s, f.coef_, X, w.transmittance) >= base
        for j in range(f.coef_.size):
            c = f.coef_.copy()
            c[j] *= s
            assert f.objective(f.alpha_, c, X, w.transmittance) >= base


def test_fit_window_dict_and_errors():
    grid = synth.default_grid()
    X, y, idx = fit_xy(700.0, grid, cont=lambda wl: 0.9 + 1e-4 * (wl - 2200))
    target = synth.default_target("CH4", grid)
    res = fit_window(window_curve(y, grid, idx), target)
    assert res["alpha_fit"] == pytest.approx(700.0, rel=1e-3)
    assert set(res) >= {"alpha_fit", "continuum_coeffs", "dnorm", "residual_curve"}
    with pytest.raises(NumericError):
        fit_window(window_curve(y[:4], grid, idx[:4]), target)
    with pytest.raises(NumericError):
        TransmittanceFitter().fit(np.column_stack([X[:, 0], np.zeros(len(y))]), y)
    with pytest.raises(ConfigError):
        TransmittanceFitter().fit(X[:, :1], y)
    with pytest.raises(NumericError):
        TransmittanceFitter(max_iter=2).fit(X, y)


def test_fitter_estimator_api():
    f = TransmittanceFitter(degree=3, depth_floor=0.05)
    assert f.get_params()["degree"] == 3
    assert clone(f).get_params()["depth_floor"] == 0.05
    with pytest.raises(NotFittedError):
        f.predict(np.zeros((3, 2)))
    X, y, _ = fit_xy(300.0)
    assert f.fit(X, y).score(X, y) > 0.999


def test_combine_dnorm():
    assert combine_dnorm([0.4]) == 0.4
    assert combine_dnorm([0.5, 0.2, 0.3]) == pytest.approx(0.03)
    with pytest.raises(ValueError):
        combine_dnorm([])


# ------------------------------------------------------------------ end-to-end

def test_gain_invariance(plume_scene):
    spec, target, cube, truth, _ = plume_scene
    c64 = cube.with_data(cube.data.astype(np.float64))
    cand = candidate_from_mask(truth.plume_mask)

    def run(c):
        em = MatchedFilter(target, background_clip=3.0).fit(c).transform(c)
        return score_candidate(cand, c, em, target, CFG)

    a, b = run(c64), run(c64.with_data(c64.data * 3.7))
    wa, wb = a.per_window[0], b.per_window[0]
    np.testing.assert_allclose(wb.transmittance, wa.transmittance, rtol=1e-6)
    assert wb.alpha_fit == pytest.approx(wa.alpha_fit, rel=1e-6)
    assert wb.dnorm == pytest.approx(wa.dnorm, rel=1e-6)


def test_background_candidate_alpha_near_zero():
    alphas, plume = [], []
    m = np.zeros((64, 64), bool)
    m[40:50, 40:50] = True
    for s in range(10):
        spec = synth.demo_spec(100 + s)
        target = synth.default_target("CH4", spec.grid)
        cube, truth = synth.generate(spec, {"CH4": target})
        em = MatchedFilter(target, background_clip=3.0).fit(cube).transform(cube)
        alphas.append(score_candidate(candidate_from_mask(m), cube, em, target, CFG).alpha_combined)
        if s < 3:
            plume.append(score_candidate(candidate_from_mask(truth.plume_mask), cube, em,
                                         target, CFG).alpha_combined)
    alphas = np.array(alphas)
    for i, a in enumerate(alphas):
        # spread about zero estimated from the other realizations
        sigma = np.sqrt(np.mean(np.delete(alphas, i) ** 2))
        assert abs(a) < 3 * sigma
    assert np.sqrt(np.mean(alphas ** 2)) < 0.1 * min(plume)


def test_nh3_three_windows_product():
    grid = synth.emit_like_grid()
    spec = synth.demo_spec(4, grid=grid, rows=48, cols=48)
    spec = spec.replace(plumes=tuple(dataclasses.replace(p, gas="NH3") for p in spec.plumes))
    target = synth.default_target("NH3", grid)
    cube, truth = synth.generate(spec, {"NH3": target})
    cfg = default_config("NH3")
    em = MatchedFilter(target, background_clip=3.0).fit(cube).transform(cube)
    rep = score_candidate(candidate_from_mask(truth.plume_mask), cube, em, target, cfg)
    assert len(rep.per_window) == 3
    d = [w.dnorm for w in rep.per_window]
    assert rep.dnorm_combined == pytest.approx(d[0] * d[1] * d[2], rel=1e-12)


def test_report_json_round_trip(plume_scene):
    _, target, cube, truth, emap = plume_scene
    rep = score_candidate(candidate_from_mask(truth.plume_mask, scene_id="s"), cube, emap,
                          target, CFG)
    assert rep.fitted and rep.per_window[0].window == BandWindow(2100, 2440)
    assert rep.pairing_diagnostics["n_pairs"] >= 5
    back = FitReport.from_dict(json.loads(json.dumps(rep.to_dict())))
    assert back.to_dict() == rep.to_dict()
    bad = rep.to_dict()
    bad["schema_version"] = "0.1"
    with pytest.raises(ConfigError):
        FitReport.from_dict(bad)


def test_score_candidate_checks():
    cube = uniform_cube()
    m = np.zeros((12, 12), bool)
    m[5, 5] = True
    cand = candidate_from_mask(m)
    target = synth.default_target("CH4", cube.grid)
    with pytest.raises(ConfigError):
        score_candidate(cand, cube, make_emap(np.zeros((12, 12))), target, default_config("CO"))
    with pytest.raises(ConfigError):
        score_candidate(cand, cube, make_emap(np.zeros((3, 3))), target, CFG)


def test_vetter_reports_unfittable(plume_scene):
    _, target, cube, truth, emap = plume_scene
    vet = PlumeVetter(target, CFG, search_radius=150.0)
    assert clone(vet).get_params()["search_radius"] == 150.0
    with pytest.raises(NotFittedError):
        vet.score_one(candidate_from_mask(truth.plume_mask))
    vet.fit(cube, emap)
    everything = candidate_from_mask(np.ones(truth.plume_mask.shape, bool), candidate_id=7)
    good = candidate_from_mask(truth.plume_mask, candidate_id=3)
    bad_rep, good_rep = vet.transform([everything, good])
    assert bad_rep.status == "unfittable" and bad_rep.dnorm_combined is None
    assert bad_rep.candidate_id == 7 and "eligible" in bad_rep.message
    assert good_rep.fitted and good_rep.dnorm_combined < 0.3

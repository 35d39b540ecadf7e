"""Synthetic radiance scenes with known background statistics and injected plumes.

Random draws come from numpy's PCG64 bit generator seeded with ``spec.seed``
and are taken in this fixed order, each array in raster-scan order
(row, then column, then innermost axis):

1. column gains, shape ``(cols,)``
2. background latent factors, shape ``(rows, cols, n_components)``
3. per-band background texture, shape ``(rows, cols, bands)``
4. sensor noise, shape ``(rows, cols, bands)``

Every draw is made even when its amplitude is zero, so plume and clutter
settings never shift the random stream.

Radiance model per pixel::

    L = clip((mu_class + F z + texture) * (1 + g_col) * C(lambda) * exp(-alpha k) + sigma n, 0)

with ``C`` the clutter transmission (1 outside clutter masks).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from ._validation import check_gas
from .cube_io import SpectralCube, WavelengthGrid
from .errors import ConfigError, CubeIOError
from .signatures import GasTarget

# Gaussian absorption lines (center nm, relative strength, sigma nm) per gas;
# peak k values are set so desk-scale plumes stay in the weak-absorption regime
_LINES = {
    "CH4": (4.0e-5, [(1666, 0.30, 12), (2200, 0.35, 14), (2240, 0.55, 14), (2280, 0.80, 13),
                     (2310, 1.00, 12), (2330, 0.90, 12), (2360, 0.75, 13), (2400, 0.45, 15)]),
    "NH3": (1.2e-6, [(1510, 0.55, 14), (1545, 0.75, 14), (1580, 0.45, 14), (1980, 0.60, 15),
                     (2010, 0.80, 14), (2060, 0.50, 15), (2170, 0.70, 15), (2210, 1.00, 14),
                     (2260, 0.60, 15)]),
    "NO2": (2.0e-7, [(410, 0.70, 12), (435, 0.95, 12), (460, 1.00, 12), (490, 0.80, 12),
                     (520, 0.60, 14), (560, 0.40, 15), (610, 0.25, 18)]),
    "CO": (2.0e-6, [(2300, 0.55, 11), (2325, 0.90, 11), (2345, 1.00, 11), (2370, 0.80, 11),
                    (2395, 0.45, 12)]),
}


def absorption_spectrum(gas, wavelengths):
    """Analytic Gaussian-line absorption coefficient k (per ppm m) at ``wavelengths``."""
    gas = check_gas(gas)
    peak, lines = _LINES[gas]
    wl = np.asarray(wavelengths, dtype=np.float64)
    k = np.zeros_like(wl)
    for center, strength, sigma in lines:
        k += strength * np.exp(-0.5 * ((wl - center) / sigma) ** 2)
    return peak * k


def default_target(gas, grid: WavelengthGrid) -> GasTarget:
    k = absorption_spectrum(gas, grid.centers)
    return GasTarget(gas=gas, grid=grid, unit_absorption=-k, k_coeffs=k)


def write_default_target(path, gas, lo=350.0, hi=2600.0, step=0.05):
    """Write the analytic k(lambda) for ``gas`` as a dense two-column text file."""
    from .signatures import write_spectrum

    wl = np.arange(lo, hi + step / 2, step)
    write_spectrum(path, wl, absorption_spectrum(gas, wl),
                   header=f"{check_gas(gas)} absorption coefficient per ppm m")


def solar_shape(wavelengths):
    """Top-of-atmosphere-like spectral shape: a 5778 K Planck curve scaled to 1 at 2300 nm."""
    wl = np.asarray(wavelengths, dtype=np.float64) * 1e-9
    c2 = 1.4388e-2 / 5778.0

    def planck(x):
        return x ** -5 / np.expm1(c2 / x)

    return planck(wl) / planck(2300e-9)


@dataclass(frozen=True)
class AlbedoClass:
    level: float = 0.3
    slope: float = 0.0
    curvature: float = 0.0


@dataclass(frozen=True)
class PlumeSpec:
    origin: Tuple[float, float]
    wind_dir: float = 0.0
    stretch: float = 2.0
    peak_alpha: float = 2000.0
    gas: str = "CH4"
    width: float = 2.5
    cutoff: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "gas", check_gas(self.gas))
        if self.peak_alpha < 0:
            raise ConfigError("peak_alpha must be non-negative")
        if self.width <= 0 or self.stretch < 1:
            raise ConfigError("plume width must be positive and stretch >= 1")
        if not 0 < self.cutoff < 1:
            raise ConfigError("plume cutoff must lie in (0, 1)")


@dataclass(frozen=True)
class ClutterSpec:
    """Elliptical patch multiplying radiance by ``1 - amplitude * shape(lambda)``.

    ``shape`` is ``flat`` (constant), ``ramp`` (linear in wavelength across
    the grid) or ``broad`` (Gaussian bump, ``center_nm``/``width_nm``); none
    carries narrow absorption lines.
    """

    center: Tuple[float, float]
    radii: Tuple[float, float] = (3.0, 3.0)
    angle: float = 0.0
    shape: str = "broad"
    amplitude: float = 0.05
    center_nm: float = 2300.0
    width_nm: float = 200.0

    def __post_init__(self):
        if self.shape not in ("flat", "ramp", "broad"):
            raise ConfigError(f"unknown clutter shape {self.shape!r}")
        if min(self.radii) <= 0:
            raise ConfigError("clutter radii must be positive")

    def spectrum(self, wavelengths):
        wl = np.asarray(wavelengths, dtype=np.float64)
        if self.shape == "flat":
            return np.ones_like(wl)
        if self.shape == "ramp":
            return (wl - wl[0]) / (wl[-1] - wl[0])
        return np.exp(-0.5 * ((wl - self.center_nm) / self.width_nm) ** 2)

    def mask(self, rows, cols):
        r, c = np.mgrid[0:rows, 0:cols]
        dr, dc = r - self.center[0], c - self.center[1]
        ca, sa = np.cos(self.angle), np.sin(self.angle)
        u = dc * ca + dr * sa
        v = -dc * sa + dr * ca
        return (u / self.radii[1]) ** 2 + (v / self.radii[0]) ** 2 <= 1.0


@dataclass(frozen=True, eq=False)
class SceneSpec:
    rows: int = 64
    cols: int = 64
    grid: WavelengthGrid = None
    classes: Tuple[AlbedoClass, ...] = (AlbedoClass(),)
    class_layout: str = "columns"
    components: Tuple[Tuple[str, float], ...] = (("scale", 0.01), ("slope", 0.005))
    texture: float = 0.001
    covariance: Optional[np.ndarray] = None
    stripe_amplitude: float = 0.0
    clutter: Tuple[ClutterSpec, ...] = ()
    plumes: Tuple[PlumeSpec, ...] = ()
    noise_sigma: float = 0.002
    radiance_scale: float = 1.0
    seed: int = 0
    dtype: str = "float32"
    scene_id: str = "synth"

    def __post_init__(self):
        if self.grid is None:
            object.__setattr__(self, "grid", default_grid())
        if self.rows < 1 or self.cols < 1:
            raise ConfigError("scene dimensions must be positive")
        if not self.classes:
            raise ConfigError("at least one albedo class is required")
        if self.class_layout not in ("columns", "rows"):
            raise ConfigError(f"unknown class layout {self.class_layout!r}")
        for kind, amp in self.components:
            if kind not in ("scale", "slope", "curve"):
                raise ConfigError(f"unknown covariance component {kind!r}")
            if not np.isfinite(amp) or amp < 0:
                raise ConfigError("covariance component amplitudes must be finite and >= 0")
        if self.texture < 0 or self.noise_sigma < 0 or self.stripe_amplitude < 0:
            raise ConfigError("texture, noise_sigma and stripe_amplitude must be >= 0")
        if self.covariance is not None:
            cov = np.asarray(self.covariance, dtype=np.float64)
            nb = len(self.grid)
            if cov.shape != (nb, nb) or not np.allclose(cov, cov.T):
                raise ConfigError("explicit covariance must be a symmetric bands x bands matrix")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise ConfigError("explicit covariance is not positive definite") from exc
            object.__setattr__(self, "covariance", cov)
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def bands(self):
        return len(self.grid)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass(eq=False)
class Truth:
    alpha_fields: Dict[str, np.ndarray]
    plume_masks: List[np.ndarray]
    clutter_masks: List[np.ndarray]
    class_map: np.ndarray
    column_gain: np.ndarray
    class_means: np.ndarray
    class_factors: np.ndarray
    texture_sigma: np.ndarray
    noise_sigma: float

    @property
    def alpha_field(self):
        if not self.alpha_fields:
            return np.zeros_like(self.class_map, dtype=np.float64)
        return self.alpha_fields[sorted(self.alpha_fields)[0]]

    @property
    def plume_mask(self):
        return self.alpha_field > 0

    def true_covariance(self, cls, col, band_set=None):
        idx = slice(None) if band_set is None else np.asarray(band_set)
        F = self.class_factors[cls][idx]
        tex = self.texture_sigma[cls][idx]
        gain = 1.0 + self.column_gain[col]
        cov = gain ** 2 * (F @ F.T + np.diag(tex ** 2))
        return cov + self.noise_sigma ** 2 * np.eye(cov.shape[0])

    def true_mean(self, cls, col, band_set=None):
        idx = slice(None) if band_set is None else np.asarray(band_set)
        return self.class_means[cls][idx] * (1.0 + self.column_gain[col])


def default_grid(n_bands=50, lo=1400.0, hi=2490.0):
    """SWIR grid used for desk-scale CH4 scenes."""
    return WavelengthGrid(np.linspace(lo, hi, n_bands))


def emit_like_grid():
    """285 bands spanning 381-2493 nm at ~7.4 nm spacing."""
    return WavelengthGrid(np.linspace(381.0, 2493.0, 285))


def class_mean(spec: SceneSpec, cls: AlbedoClass):
    wl = spec.grid.centers
    x = (wl - wl.mean()) / (wl[-1] - wl[0] if wl.size > 1 else 1.0)
    refl = cls.level * (1.0 + cls.slope * x + cls.curvature * (x ** 2 - 1.0 / 12.0))
    if np.any(refl <= 0):
        raise ConfigError("albedo class yields non-positive reflectance")
    return spec.radiance_scale * solar_shape(wl) * refl


def _class_factor(spec, mu):
    if spec.covariance is not None:
        return np.linalg.cholesky(spec.covariance)
    wl = spec.grid.centers
    x = (wl - wl.mean()) / (wl[-1] - wl[0] if wl.size > 1 else 1.0)
    basis = {"scale": np.ones_like(x), "slope": x, "curve": x ** 2 - 1.0 / 12.0}
    cols = [amp * mu * basis[kind] for kind, amp in spec.components]
    if not cols:
        return np.zeros((wl.size, 0))
    return np.column_stack(cols)


def class_map(spec: SceneSpec):
    n = len(spec.classes)
    axis_len = spec.cols if spec.class_layout == "columns" else spec.rows
    labels = np.empty(axis_len, dtype=np.int32)
    for i, part in enumerate(np.array_split(np.arange(axis_len), n)):
        labels[part] = i
    if spec.class_layout == "columns":
        return np.broadcast_to(labels[None, :], (spec.rows, spec.cols)).copy()
    return np.broadcast_to(labels[:, None], (spec.rows, spec.cols)).copy()


def plume_field(p: PlumeSpec, rows, cols):
    """Rotated anisotropic Gaussian starting at the source and elongated downwind."""
    r, c = np.mgrid[0:rows, 0:cols].astype(np.float64)
    su, sv = p.width * p.stretch, p.width
    cu, su_dir = np.cos(p.wind_dir), np.sin(p.wind_dir)
    # plume center sits one along-wind sigma downwind of the source
    r0 = p.origin[0] + su * su_dir
    c0 = p.origin[1] + su * cu
    dr, dc = r - r0, c - c0
    u = dc * cu + dr * su_dir
    v = -dc * su_dir + dr * cu
    shape = np.exp(-0.5 * ((u / su) ** 2 + (v / sv) ** 2))
    shape[shape < p.cutoff] = 0.0
    return p.peak_alpha * shape, shape > 0


def generate(spec: SceneSpec, targets: Optional[Dict[str, GasTarget]] = None):
    """Render a scene; returns ``(cube, truth)``."""
    rows, cols, nb = spec.rows, spec.cols, spec.bands
    wl = spec.grid.centers
    targets = dict(targets or {})
    rng = np.random.Generator(np.random.PCG64(int(spec.seed)))

    means = np.stack([class_mean(spec, c) for c in spec.classes])
    factors = [_class_factor(spec, mu) for mu in means]
    n_comp = factors[0].shape[1]
    if any(f.shape[1] != n_comp for f in factors):
        raise ConfigError("classes must share the covariance component count")
    tex_sigma = np.stack([spec.texture * mu for mu in means])
    cmap = class_map(spec)

    gains = spec.stripe_amplitude * rng.standard_normal(cols)
    z = rng.standard_normal((rows, cols, n_comp))
    tex = rng.standard_normal((rows, cols, nb))
    noise = rng.standard_normal((rows, cols, nb))

    F = np.stack(factors)
    background = means[cmap] + np.einsum("rcbk,rck->rcb", F[cmap], z) + tex * tex_sigma[cmap]
    background *= (1.0 + gains)[None, :, None]

    clutter_masks = []
    transmission = np.ones((rows, cols, nb))
    for cl in spec.clutter:
        m = cl.mask(rows, cols)
        clutter_masks.append(m)
        transmission[m] *= 1.0 - cl.amplitude * cl.spectrum(wl)
    if np.any(transmission <= 0):
        raise ConfigError("clutter amplitude drives radiance non-positive")

    alpha_fields: Dict[str, np.ndarray] = {}
    plume_masks = []
    for p in spec.plumes:
        field_, m = plume_field(p, rows, cols)
        plume_masks.append(m)
        alpha_fields[p.gas] = alpha_fields.get(p.gas, np.zeros((rows, cols))) + field_
    optical_depth = np.zeros((rows, cols, nb))
    for gas, a in alpha_fields.items():
        tgt = targets.get(gas) or default_target(gas, spec.grid)
        if len(tgt.grid) != nb:
            raise ConfigError(f"target for {gas} is on a different grid")
        optical_depth += a[:, :, None] * tgt.k_coeffs[None, None, :]

    radiance = background * transmission * np.exp(-optical_depth) + spec.noise_sigma * noise
    radiance = np.clip(radiance, 0.0, None).astype(spec.dtype)

    cube = SpectralCube(radiance, grid=spec.grid, metadata={"scene id": spec.scene_id})
    truth = Truth(alpha_fields=alpha_fields, plume_masks=plume_masks, clutter_masks=clutter_masks,
                  class_map=cmap, column_gain=gains, class_means=means, class_factors=F,
                  texture_sigma=tex_sigma, noise_sigma=float(spec.noise_sigma))
    return cube, truth


def oracle_mf(cube: SpectralCube, truth: Truth, target: GasTarget, band_set=None):
    """Reference alpha by generalized least squares with the generator's true statistics.

    Independent of the matched-filter module: every (class, column) group gets
    its own exact mean and covariance, solved with a dense inverse.
    """
    band_set = np.arange(cube.bands) if band_set is None else np.asarray(band_set)
    X = cube.data[:, :, band_set].astype(np.float64)
    out = np.full((cube.rows, cube.cols), np.nan)
    for col in range(cube.cols):
        for cls in np.unique(truth.class_map[:, col]):
            rows = np.flatnonzero(truth.class_map[:, col] == cls)
            mu = truth.true_mean(cls, col, band_set)
            cov = truth.true_covariance(cls, col, band_set)
            t = target.unit_absorption[band_set] * mu
            w = np.linalg.inv(cov) @ t
            out[rows, col] = (X[rows, col, :] - mu) @ w / (t @ w)
    return out


# ------------------------------------------------------------- text config

def spec_from_dict(raw) -> SceneSpec:
    """Build a SceneSpec from a plain mapping (the YAML scene config)."""
    if not isinstance(raw, dict):
        raise ConfigError("scene config must be a mapping")
    raw = dict(raw)
    kw = {}
    try:
        g = raw.pop("grid", None)
        if isinstance(g, dict):
            if "wavelengths" in g:
                kw["grid"] = WavelengthGrid(np.asarray(g["wavelengths"], float), g.get("fwhm"))
            else:
                kw["grid"] = default_grid(int(g.get("bands", 50)), float(g.get("lo", 1400.0)),
                                          float(g.get("hi", 2490.0)))
        elif g == "emit":
            kw["grid"] = emit_like_grid()
        elif g is not None:
            raise ConfigError("grid must be a mapping or 'emit'")
        if "classes" in raw:
            kw["classes"] = tuple(AlbedoClass(**c) for c in raw.pop("classes"))
        if "components" in raw:
            comps = []
            for c in raw.pop("components") or []:
                if isinstance(c, dict):
                    comps.extend((str(k), float(v)) for k, v in c.items())
                else:
                    kind, amp = c
                    comps.append((str(kind), float(amp)))
            kw["components"] = tuple(comps)
        if "covariance" in raw:
            kw["covariance"] = np.asarray(raw.pop("covariance"), dtype=float)
        if "clutter" in raw:
            kw["clutter"] = tuple(ClutterSpec(**{k: tuple(v) if isinstance(v, list) else v
                                                 for k, v in c.items()}) for c in raw.pop("clutter"))
        if "plumes" in raw:
            kw["plumes"] = tuple(PlumeSpec(**{k: tuple(v) if isinstance(v, list) else v
                                              for k, v in p.items()}) for p in raw.pop("plumes"))
        known = {f.name for f in dataclasses.fields(SceneSpec)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
        kw.update(raw)
        return SceneSpec(**kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid scene config: {exc}") from exc


def load_spec(path) -> SceneSpec:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CubeIOError(f"cannot read scene config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed scene config {path}: {exc}") from exc
    return spec_from_dict(raw)


def demo_spec(seed=0, peak_alpha=2000.0, n_plumes=1, n_clutter=0, clutter_amplitude=0.05,
              n_classes=1, rows=64, cols=64, grid=None, **overrides) -> SceneSpec:
    """Preset desk-scale scene: plumes on the left half, clutter blobs on the right."""
    plumes, clutter = [], []
    for i in range(n_plumes):
        r0 = rows * (i + 1) / (n_plumes + 1)
        plumes.append(PlumeSpec(origin=(r0, cols * 0.12), wind_dir=0.0, stretch=2.0,
                                peak_alpha=peak_alpha, width=2.5))
    for i in range(n_clutter):
        r0 = rows * (i + 1) / (n_clutter + 1)
        clutter.append(ClutterSpec(center=(r0, cols * 0.72), radii=(3.0, 6.0),
                                   amplitude=clutter_amplitude))
    classes = (AlbedoClass(0.3, 0.0),) if n_classes == 1 else tuple(
        AlbedoClass(0.25 + 0.1 * i, slope=(-0.6 if i % 2 else 0.6)) for i in range(n_classes))
    kw = dict(rows=rows, cols=cols, grid=grid or default_grid(), classes=classes,
              plumes=tuple(plumes), clutter=tuple(clutter), seed=seed,
              scene_id=f"synth-{seed:04d}")
    kw.update(overrides)
    return SceneSpec(**kw)


def match_clutter_amplitude(spec: SceneSpec, target: GasTarget, band_set=None, n_iter=3,
                            probe=0.01) -> SceneSpec:
    """Rescale every clutter amplitude so its mean oracle-MF response equals the plume's.

    The reference is the mean oracle alpha over the union of plume masks.
    Clutter responds almost linearly in amplitude, so a few fixed-point
    rescalings converge; the returned spec has the matched amplitudes.
    """
    if not spec.plumes or not spec.clutter:
        raise ConfigError("amplitude matching needs at least one plume and one clutter patch")
    targets = {target.gas: target}
    amps = [probe] * len(spec.clutter)
    for _ in range(n_iter):
        trial = spec.replace(clutter=tuple(dataclasses.replace(c, amplitude=a)
                                           for c, a in zip(spec.clutter, amps)))
        cube, truth = generate(trial, targets)
        ref = oracle_mf(cube, truth, target, band_set)
        want = float(np.mean(ref[truth.plume_mask]))
        for i, m in enumerate(truth.clutter_masks):
            got = float(np.mean(ref[m]))
            if got <= 0:
                raise ConfigError(f"clutter patch {i} has no positive matched-filter response")
            amps[i] *= want / got
    return spec.replace(clutter=tuple(dataclasses.replace(c, amplitude=a)
                                      for c, a in zip(spec.clutter, amps)))

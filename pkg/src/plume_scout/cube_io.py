"""Hyperspectral cube container and an ENVI-style header + raw payload format.

Files come in pairs: ``<name>.hdr`` holds ``key = value`` lines (lists in
braces), ``<name>.dat`` holds the little-endian payload in band-sequential
order. 32-bit floats are the default payload; 64-bit floats are accepted so
in-memory double precision cubes round-trip exactly too.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, CubeIOError

logger = logging.getLogger(__name__)

DEFAULT_NODATA = -9999.0
WAVELENGTH_LIMITS = (300.0, 3000.0)

# ENVI data type codes
_DTYPES = {4: np.dtype("float32"), 5: np.dtype("float64")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}
_REQUIRED = ("samples", "lines", "bands", "data type")
_CORE_KEYS = set(_REQUIRED) | {
    "interleave", "byte order", "header offset", "file type", "wavelength",
    "fwhm", "bbl", "data ignore value", "wavelength units",
}


@dataclass(frozen=True)
class WavelengthGrid:
    """Band-center wavelengths in nm, strictly increasing."""

    centers: np.ndarray
    fwhm: Optional[np.ndarray] = None

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.float64).ravel()
        if centers.size == 0:
            raise ConfigError("wavelength grid is empty")
        if not np.all(np.isfinite(centers)):
            raise ConfigError("wavelength grid has non-finite values")
        if centers.size > 1 and np.any(np.diff(centers) <= 0):
            raise ConfigError("wavelengths must be strictly increasing")
        lo, hi = WAVELENGTH_LIMITS
        if centers.min() <= lo or centers.max() >= hi:
            raise ConfigError(f"wavelengths must lie in ({lo}, {hi}) nm")
        object.__setattr__(self, "centers", centers)
        if self.fwhm is not None:
            fwhm = np.asarray(self.fwhm, dtype=np.float64).ravel()
            if fwhm.shape != centers.shape:
                raise ConfigError("fwhm length differs from wavelength count")
            object.__setattr__(self, "fwhm", fwhm)

    def __len__(self):
        return self.centers.size

    def __eq__(self, other):
        if not isinstance(other, WavelengthGrid):
            return NotImplemented
        same_fwhm = (self.fwhm is None and other.fwhm is None) or (
            self.fwhm is not None and other.fwhm is not None
            and np.array_equal(self.fwhm, other.fwhm)
        )
        return np.array_equal(self.centers, other.centers) and same_fwhm

    __hash__ = None


@dataclass(frozen=True)
class BandWindow:
    """Closed wavelength interval ``[lo, hi]`` in nm."""

    lo: float
    hi: float

    def __post_init__(self):
        lo, hi = float(self.lo), float(self.hi)
        if not lo < hi:
            raise ConfigError(f"band window needs lo < hi, got ({lo}, {hi})")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def contains(self, wavelengths):
        wavelengths = np.asarray(wavelengths, dtype=np.float64)
        return (wavelengths >= self.lo) & (wavelengths <= self.hi)

    def as_list(self):
        return [self.lo, self.hi]


@dataclass(frozen=True, eq=False)
class SpectralCube:
    """Radiance cube indexed ``data[row, col, band]``.

    ``grid`` may be None for single-band rasters (enhancement maps, masks);
    only cubes with a grid are radiance and must be non-negative.
    ``metadata`` carries extra header keys verbatim (e.g. ``scene id``).
    """

    data: np.ndarray
    grid: Optional[WavelengthGrid] = None
    bad_bands: Optional[np.ndarray] = None
    nodata: float = DEFAULT_NODATA
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ConfigError(f"cube data must be 3-D (rows, cols, bands), got {data.shape}")
        if data.dtype not in _DTYPE_CODES:
            data = data.astype(np.float32)
        data = data.view()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        nb = data.shape[2]
        if self.grid is not None and len(self.grid) != nb:
            raise ConfigError(f"grid has {len(self.grid)} bands, data has {nb}")
        bad = np.zeros(nb, dtype=bool) if self.bad_bands is None else np.asarray(self.bad_bands, dtype=bool).ravel()
        if bad.size != nb:
            raise ConfigError("bad band mask length differs from band count")
        bad = bad.copy()
        bad.flags.writeable = False
        object.__setattr__(self, "bad_bands", bad)
        object.__setattr__(self, "nodata", float(self.nodata))
        object.__setattr__(self, "metadata", dict(self.metadata))
        if self.grid is None:
            return
        neg = np.isfinite(data) & (data < 0) & (data != self.nodata)
        if np.any(neg):
            raise ConfigError("cube holds negative radiance values that are not nodata")

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def bands(self):
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    @property
    def wavelengths(self):
        return None if self.grid is None else self.grid.centers

    @property
    def scene_id(self):
        return str(self.metadata.get("scene id", "scene"))

    def valid_mask(self):
        """Pixels with every band finite and none equal to the nodata sentinel."""
        d = self.data
        return np.all(np.isfinite(d), axis=2) & ~np.any(d == self.nodata, axis=2)

    def pixel(self, row, col):
        return self.data[row, col, :]

    def column(self, col):
        return self.data[:, col, :]

    def band_window(self, window: BandWindow):
        return self.data[:, :, select_bands(self, [window])]

    def with_data(self, data, **changes):
        """Copy of this cube with new data (and optionally other fields)."""
        kw = dict(grid=self.grid, bad_bands=self.bad_bands, nodata=self.nodata,
                  metadata=self.metadata)
        kw.update(changes)
        return SpectralCube(np.asarray(data), **kw)

    def __eq__(self, other):
        if not isinstance(other, SpectralCube):
            return NotImplemented
        return (
            self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
            and self.grid == other.grid
            and np.array_equal(self.bad_bands, other.bad_bands)
            and np.float64(self.nodata).tobytes() == np.float64(other.nodata).tobytes()
            and self.metadata == other.metadata
        )

    __hash__ = None


def select_bands(cube_or_grid, windows: Iterable[BandWindow], bad_bands=None, min_bands=3):
    """Sorted indices of good bands whose centers fall inside any window.

    Bounds are inclusive. ``min_bands`` applies to each window separately.
    """
    if isinstance(cube_or_grid, SpectralCube):
        if cube_or_grid.grid is None:
            raise ConfigError("cube has no wavelength grid")
        centers = cube_or_grid.grid.centers
        if bad_bands is None:
            bad_bands = cube_or_grid.bad_bands
    elif isinstance(cube_or_grid, WavelengthGrid):
        centers = cube_or_grid.centers
    else:
        centers = np.asarray(cube_or_grid, dtype=np.float64)
    good = np.ones(centers.size, dtype=bool) if bad_bands is None else ~np.asarray(bad_bands, dtype=bool)
    selected = np.zeros(centers.size, dtype=bool)
    windows = list(windows)
    if not windows:
        raise ConfigError("no band windows given")
    for w in windows:
        hit = w.contains(centers) & good
        if hit.sum() < min_bands:
            raise ConfigError(
                f"window [{w.lo}, {w.hi}] resolves to {int(hit.sum())} bands (< {min_bands})"
            )
        selected |= hit
    return np.flatnonzero(selected)


# ---------------------------------------------------------------- header I/O

def header_path(path):
    p = Path(path)
    return p if p.suffix == ".hdr" else p.with_suffix(".hdr")


def payload_path(path):
    return header_path(path).with_suffix(".dat")


def _format_value(value):
    if isinstance(value, (list, tuple, np.ndarray)):
        return "{" + ", ".join(_format_scalar(v) for v in value) + "}"
    return _format_scalar(value)


def _format_scalar(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def parse_header(text):
    """Parse ``key = value`` lines; brace lists may span several lines."""
    out = {}
    lines = text.splitlines()
    if lines and lines[0].strip().upper() == "ENVI":
        lines = lines[1:]
    buf = ""
    for raw in lines:
        if not buf and not raw.strip():
            continue
        buf = f"{buf} {raw.strip()}" if buf else raw.strip()
        if buf.count("{") > buf.count("}"):
            continue
        if "=" not in buf:
            raise CubeIOError(f"malformed header line: {buf!r}")
        key, value = buf.split("=", 1)
        out[key.strip().lower()] = value.strip()
        buf = ""
    if buf:
        raise CubeIOError("unterminated brace list in header")
    return out


def _parse_list(value, conv=float):
    value = value.strip()
    if not (value.startswith("{") and value.endswith("}")):
        raise CubeIOError(f"expected a brace list, got {value[:40]!r}")
    body = value[1:-1].strip()
    if not body:
        return []
    return [conv(v.strip()) for v in re.split(r",", body)]


def write_cube(cube: SpectralCube, path):
    """Write ``cube`` as a header + BSQ payload pair; returns the header path."""
    hdr, dat = header_path(path), payload_path(path)
    dtype = cube.data.dtype
    header = {
        "samples": cube.cols,
        "lines": cube.rows,
        "bands": cube.bands,
        "header offset": 0,
        "file type": "ENVI Standard",
        "data type": _DTYPE_CODES[dtype],
        "interleave": "bsq",
        "byte order": 0,
        "data ignore value": float(cube.nodata),
    }
    if cube.grid is not None:
        header["wavelength units"] = "Nanometers"
        header["wavelength"] = list(cube.grid.centers)
        if cube.grid.fwhm is not None:
            header["fwhm"] = list(cube.grid.fwhm)
    header["bbl"] = [0 if b else 1 for b in cube.bad_bands]
    for key, value in cube.metadata.items():
        key = str(key).lower()
        if key in _CORE_KEYS:
            raise ConfigError(f"metadata key {key!r} collides with a core header field")
        header[key] = value
    text = "ENVI\n" + "".join(f"{k} = {_format_value(v)}\n" for k, v in header.items())
    payload = np.ascontiguousarray(np.transpose(cube.data, (2, 0, 1))).astype(dtype.newbyteorder("<"), copy=False)
    try:
        hdr.parent.mkdir(parents=True, exist_ok=True)
        dat.write_bytes(payload.tobytes())
        hdr.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CubeIOError(f"cannot write cube to {hdr}: {exc}") from exc
    return hdr


def read_cube(path) -> SpectralCube:
    """Read a cube written by :func:`write_cube` (or a compatible ENVI file)."""
    hdr, dat = header_path(path), payload_path(path)
    try:
        text = hdr.read_text(encoding="utf-8")
        raw = dat.read_bytes()
    except OSError as exc:
        raise CubeIOError(f"cannot read cube {hdr}: {exc}") from exc
    h = parse_header(text)
    missing = [k for k in _REQUIRED if k not in h]
    if missing:
        raise CubeIOError(f"header {hdr} lacks fields: {missing}")
    try:
        cols, rows, bands = int(h["samples"]), int(h["lines"]), int(h["bands"])
        code = int(h["data type"])
        offset = int(h.get("header offset", 0))
        order = int(h.get("byte order", 0))
    except ValueError as exc:
        raise CubeIOError(f"non-integer core header field in {hdr}") from exc
    if code not in _DTYPES:
        raise CubeIOError(f"unsupported data type {code}")
    if min(cols, rows, bands) <= 0:
        raise CubeIOError("non-positive cube dimension")
    dtype = _DTYPES[code].newbyteorder(">" if order == 1 else "<")
    expected = rows * cols * bands * dtype.itemsize
    if len(raw) - offset != expected:
        raise CubeIOError(
            f"payload size mismatch: header implies {expected} bytes, file has {len(raw) - offset}"
        )
    flat = np.frombuffer(raw, dtype=dtype, offset=offset).astype(_DTYPES[code])
    interleave = h.get("interleave", "bsq").strip().lower()
    if interleave == "bsq":
        data = flat.reshape(bands, rows, cols).transpose(1, 2, 0)
    elif interleave == "bil":
        data = flat.reshape(rows, bands, cols).transpose(0, 2, 1)
    elif interleave == "bip":
        data = flat.reshape(rows, cols, bands)
    else:
        raise CubeIOError(f"unknown interleave {interleave!r}")
    data = np.ascontiguousarray(data)

    grid = None
    try:
        if "wavelength" in h:
            wl = _parse_list(h["wavelength"])
            fwhm = _parse_list(h["fwhm"]) if "fwhm" in h else None
            if len(wl) != bands:
                raise CubeIOError(f"header lists {len(wl)} wavelengths for {bands} bands")
            grid = WavelengthGrid(np.array(wl), None if fwhm is None else np.array(fwhm))
        bad = None
        if "bbl" in h:
            bbl = _parse_list(h["bbl"], conv=lambda s: int(float(s)))
            if len(bbl) != bands:
                raise CubeIOError("bad band list length differs from band count")
            bad = np.array([v == 0 for v in bbl])
        nodata = float(h.get("data ignore value", DEFAULT_NODATA))
    except ConfigError as exc:
        raise CubeIOError(f"invalid header {hdr}: {exc}") from exc
    meta = {k: v for k, v in h.items() if k not in _CORE_KEYS}
    try:
        return SpectralCube(data, grid=grid, bad_bands=bad, nodata=nodata, metadata=meta)
    except ConfigError as exc:
        raise CubeIOError(f"invalid cube {hdr}: {exc}") from exc

"""Plume candidates from a per-pixel score map.

A candidate is an 8-connected component of the map thresholded at
``base_threshold``. Its confidence is the highest threshold that still keeps
``min_component_px`` pixels of the component selected, i.e. the
``min_component_px``-th highest value inside it.
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.ndimage
import scipy.special

from ._validation import check_fraction, check_gas, check_positive
from .cube_io import SpectralCube, read_cube, write_cube
from .errors import ConfigError, CubeIOError

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True, eq=False)
class ScoreMap:
    values: np.ndarray
    source: str = "builtin"
    gas: str = "CH4"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ConfigError("score map must be 2-D")
        fin = v[np.isfinite(v)]
        if fin.size and (fin.min() < 0.0 or fin.max() > 1.0):
            raise ConfigError("score map values must lie in [0, 1]")
        if self.source not in ("builtin", "external"):
            raise ConfigError(f"unknown score map source {self.source!r}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "gas", check_gas(self.gas))

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class ProposerParams:
    base_threshold: float = 0.5
    min_component_px: int = 5
    logistic_center: float = 500.0
    logistic_scale: float = 200.0

    def __post_init__(self):
        check_fraction(self.base_threshold, "base_threshold", closed=False)
        if int(self.min_component_px) < 1:
            raise ConfigError("min_component_px must be >= 1")


@dataclass(frozen=True, eq=False)
class PlumeCandidate:
    """Connected pixel set; ``pixels`` is an (n, 2) array of (row, col) in raster order.

    ``outline`` holds closed rings of (col, row) vertices on pixel corners:
    the counter-clockwise exterior first, then any clockwise holes.
    """

    pixels: np.ndarray
    confidence: float
    outline: Tuple[Tuple[Tuple[int, int], ...], ...]
    scene_id: str = "scene"
    gas: str = "CH4"
    candidate_id: int = 0

    @property
    def size_px(self):
        return int(self.pixels.shape[0])

    @property
    def centroid(self):
        c = self.pixels.mean(axis=0)
        return float(c[0]), float(c[1])

    def mask(self, shape):
        m = np.zeros(shape, dtype=bool)
        m[self.pixels[:, 0], self.pixels[:, 1]] = True
        return m

    def sort_key(self):
        r, c = self.centroid
        return (-self.confidence, r, c, tuple(self.pixels[0]))

    def to_feature(self):
        r, c = self.centroid
        return {
            "type": "Feature",
            "geometry": {"type": "Polygon",
                         "coordinates": [[list(v) for v in ring] for ring in self.outline]},
            "properties": {
                "candidate_id": self.candidate_id,
                "confidence": float(self.confidence),
                "size_px": self.size_px,
                "gas": self.gas,
                "scene_id": self.scene_id,
                "centroid": [r, c],
            },
        }


def candidate_from_mask(mask, values=None, *, confidence=None, k=5, scene_id="scene",
                        gas="CH4", candidate_id=0):
    """Wrap a boolean pixel mask as a candidate; confidence from ``values`` if not given."""
    mask = np.asarray(mask, dtype=bool)
    pix = np.argwhere(mask)
    if pix.size == 0:
        raise ConfigError("candidate mask is empty")
    if confidence is None:
        confidence = 1.0 if values is None else _confidence(np.nan_to_num(values), mask, pix, k)
    return PlumeCandidate(pixels=pix, confidence=float(confidence), outline=trace_outline(mask),
                          scene_id=scene_id, gas=check_gas(gas), candidate_id=candidate_id)


def _confidence(values, comp_mask, pix, k):
    vals = values[pix[:, 0], pix[:, 1]]
    if vals.size >= k:
        return float(np.sort(vals)[::-1][k - 1])
    # too small: lower the threshold and let the selection grow through neighbors
    # until it holds k pixels (priority flood keeps the largest feasible threshold)
    rows, cols = values.shape
    seen = comp_mask.copy()
    tau = float(vals.min())
    heap = []

    def push_neighbors(r, c):
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols and not seen[rr, cc]:
                    seen[rr, cc] = True
                    heapq.heappush(heap, (-values[rr, cc], rr, cc))

    for r, c in pix:
        push_neighbors(r, c)
    count = vals.size
    while count < k and heap:
        neg, r, c = heapq.heappop(heap)
        tau = min(tau, -neg)
        count += 1
        push_neighbors(r, c)
    return float(tau)


def extract_candidates(score_map: ScoreMap, params: ProposerParams = ProposerParams(),
                       scene_id="scene") -> List[PlumeCandidate]:
    values = np.nan_to_num(score_map.values, nan=0.0)
    mask = values >= params.base_threshold
    labels, n = scipy.ndimage.label(mask, structure=_EIGHT)
    out = []
    k = int(params.min_component_px)
    for lab in range(1, n + 1):
        comp = labels == lab
        pix = np.argwhere(comp)
        conf = _confidence(values, comp, pix, k)
        out.append(PlumeCandidate(pixels=pix, confidence=conf, outline=trace_outline(comp),
                                  scene_id=scene_id, gas=score_map.gas))
    out.sort(key=PlumeCandidate.sort_key)
    return [PlumeCandidate(pixels=c.pixels, confidence=c.confidence, outline=c.outline,
                           scene_id=c.scene_id, gas=c.gas, candidate_id=i)
            for i, c in enumerate(out)]


def filter_by_size(cands: Sequence[PlumeCandidate], min_px) -> List[PlumeCandidate]:
    """Keep candidates strictly larger than ``min_px`` pixels, order preserved."""
    return [c for c in cands if c.size_px > min_px]


def builtin_proposer(emap, params: ProposerParams = ProposerParams()) -> ScoreMap:
    """Logistic squashing of the enhancement map; the fallback when no ML map is given."""
    scale = check_positive(params.logistic_scale, "logistic_scale")
    alpha = np.asarray(emap.alpha, dtype=np.float64)
    values = scipy.special.expit((alpha - params.logistic_center) / scale)
    values = np.where(np.isfinite(alpha), values, 0.0)
    return ScoreMap(values=values, source="builtin", gas=emap.gas)


def export_score_map(score_map: ScoreMap, path):
    data = np.nan_to_num(score_map.values, nan=0.0).astype(np.float32)
    return write_cube(SpectralCube(data[:, :, None], metadata={"gas": score_map.gas}), path)


def import_mask(path, dims=None, gas="CH4") -> ScoreMap:
    """Read an externally produced single-band probability raster."""
    cube = read_cube(path)
    if cube.bands != 1:
        raise ConfigError(f"score raster {path} has {cube.bands} bands, expected 1")
    if dims is not None and tuple(dims)[:2] != (cube.rows, cube.cols):
        raise ConfigError(f"score raster is {cube.rows}x{cube.cols}, scene is {tuple(dims)[:2]}")
    values = cube.data[:, :, 0].astype(np.float64)
    values = np.where(cube.valid_mask(), values, np.nan)
    return ScoreMap(values=values, source="external", gas=gas)


# ----------------------------------------------------------- outline tracing

def _right(d):
    return (d[1], -d[0])


def _left(d):
    return (-d[1], d[0])


def trace_outline(mask):
    """Rings along pixel edges of a boolean mask.

    Vertices are (col, row) pixel-corner coordinates. Edges keep the pixel
    set on their left, so the exterior is counter-clockwise under the
    shoelace formula and holes are clockwise. Where two pixels touch only at
    a corner the walk turns right, keeping diagonal neighbours in one ring.
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1)
    out_edges = {}
    for r, c in np.argwhere(mask):
        pr, pc = r + 1, c + 1
        if not padded[pr - 1, pc]:
            out_edges.setdefault((c, r), []).append((1, 0))
        if not padded[pr, pc + 1]:
            out_edges.setdefault((c + 1, r), []).append((0, 1))
        if not padded[pr + 1, pc]:
            out_edges.setdefault((c + 1, r + 1), []).append((-1, 0))
        if not padded[pr, pc - 1]:
            out_edges.setdefault((c, r + 1), []).append((0, -1))
    unused = {(v, d) for v, ds in out_edges.items() for d in ds}
    rings = []
    while unused:
        start = min(unused)
        v, d = start
        ring = [v]
        edge = start
        while True:
            unused.discard(edge)
            v, d = edge
            nxt = (v[0] + d[0], v[1] + d[1])
            ring.append(nxt)
            options = out_edges.get(nxt, [])
            chosen = None
            for cand in (_right(d), d, _left(d)):
                if cand in options and ((nxt, cand) in unused or (nxt, cand) == start):
                    chosen = cand
                    break
            if chosen is None or (nxt, chosen) == start:
                break
            edge = (nxt, chosen)
        rings.append(_simplify(ring))
    rings.sort(key=lambda rg: (-_area(rg), rg[0]))
    return tuple(tuple((int(x), int(y)) for x, y in rg) for rg in rings)


def _simplify(ring):
    """Drop collinear vertices; the result is closed (first == last)."""
    pts = ring[:-1]
    n = len(pts)
    keep = []
    for i in range(n):
        a, b, c = pts[i - 1], pts[i], pts[(i + 1) % n]
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if cross != 0:
            keep.append(b)
    # rotate so the ring starts at its smallest vertex
    i0 = keep.index(min(keep))
    keep = keep[i0:] + keep[:i0]
    return keep + [keep[0]]


def _area(ring):
    x = np.array([p[0] for p in ring], dtype=float)
    y = np.array([p[1] for p in ring], dtype=float)
    return 0.5 * float(np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]))


def ring_area(ring):
    """Signed shoelace area of a closed ring."""
    return _area(ring)


def candidates_to_geojson(cands: Sequence[PlumeCandidate]):
    return {"type": "FeatureCollection", "features": [c.to_feature() for c in cands]}


def write_geojson(cands, path):
    try:
        Path(path).write_text(json.dumps(candidates_to_geojson(cands), sort_keys=True, indent=1),
                              encoding="utf-8")
    except OSError as exc:
        raise CubeIOError(f"cannot write {path}: {exc}") from exc

"""Trace-gas plume detection and physics-based vetting for imaging spectrometer scenes."""
from ._version import __version__
from .candidates import (PlumeCandidate, ProposerParams, ScoreMap, builtin_proposer,
                         extract_candidates, filter_by_size, import_mask)
from .cube_io import BandWindow, SpectralCube, WavelengthGrid, read_cube, select_bands, write_cube
from .errors import ConfigError, CubeIOError, NumericError, PlumeScoutError, UnfittableError
from .matched_filter import EnhancementMap, MatchedFilter, apply_mf, column_stats
from .plume_fit import FitReport, PlumeVetter, TransmittanceFitter, score_candidate
from .signatures import GasConfig, GasTarget, default_config, load_config, load_target
from .triage import Digest, RankedDetection, TriageBin, emit_digest, estimate_emission, rank, triage

__all__ = [
    "__version__",
    "BandWindow", "SpectralCube", "WavelengthGrid", "read_cube", "write_cube", "select_bands",
    "GasConfig", "GasTarget", "default_config", "load_config", "load_target",
    "EnhancementMap", "MatchedFilter", "apply_mf", "column_stats",
    "PlumeCandidate", "ProposerParams", "ScoreMap", "builtin_proposer", "extract_candidates",
    "filter_by_size", "import_mask",
    "FitReport", "PlumeVetter", "TransmittanceFitter", "score_candidate",
    "Digest", "RankedDetection", "TriageBin", "emit_digest", "estimate_emission", "rank", "triage",
    "ConfigError", "CubeIOError", "NumericError", "PlumeScoutError", "UnfittableError",
]

"""Input validation helpers shared by the estimators."""
import numpy as np

from .errors import ConfigError

SUPPORTED_GASES = ("CH4", "NH3", "NO2", "CO")


def check_gas(gas):
    key = str(gas).upper()
    if key not in SUPPORTED_GASES:
        raise ConfigError(f"unsupported gas {gas!r}; expected one of {SUPPORTED_GASES}")
    return key


def check_band_indices(band_set, n_bands):
    idx = np.asarray(band_set, dtype=np.intp).ravel()
    if idx.size == 0:
        raise ConfigError("empty band set")
    if idx.min() < 0 or idx.max() >= n_bands:
        raise ConfigError(f"band index out of range for {n_bands} bands")
    if np.any(np.diff(idx) <= 0):
        raise ConfigError("band set must be sorted and duplicate-free")
    return idx


def check_fraction(value, name, *, closed=True):
    value = float(value)
    ok = 0.0 <= value <= 1.0 if closed else 0.0 < value < 1.0
    if not ok:
        raise ConfigError(f"{name}={value} outside {'[0, 1]' if closed else '(0, 1)'}")
    return value


def check_positive(value, name):
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ConfigError(f"{name} must be positive, got {value}")
    return value


def check_is_fitted(estimator, attr):
    if not hasattr(estimator, attr):
        from sklearn.exceptions import NotFittedError

        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call 'fit' first."
        )

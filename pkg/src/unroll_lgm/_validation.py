"""Input checks shared by the estimator classes."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array

from .lgm import Dataset


def check_observations(X, n_features=None, name="X", allow_empty_rows=True):
    """Validate a ``(n_samples, n_features)`` array with ``NaN`` for missing entries.

    Infinite values are rejected; ``NaN`` marks an unobserved entry.  Returns
    a float array.
    """
    X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan", input_name=name)
    if np.isinf(X).any():
        raise ValueError(f"{name} contains infinite values")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"{name} has {X.shape[1]} features, expected {n_features}")
    if not allow_empty_rows and np.isnan(X).all(axis=1).any():
        row = int(np.flatnonzero(np.isnan(X).all(axis=1))[0])
        raise ValueError(f"{name} row {row} has no observed entries")
    return X


def to_dataset(X):
    """Rows of ``X`` become data points."""
    return Dataset.from_array(X)


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_positive_float(value, name, allow_zero=False):
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise ValueError(f"{name} must be a real number, got {value!r}")
    if not np.isfinite(value) or value < 0 or (value == 0 and not allow_zero):
        raise ValueError(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value!r}")
    return float(value)


def check_choice(value, name, choices):
    if value not in choices:
        raise ValueError(f"{name} must be one of {tuple(choices)}, got {value!r}")
    return value

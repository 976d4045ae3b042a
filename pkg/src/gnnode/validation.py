"""Input validation helpers shared by the estimator facades and CLI."""

from __future__ import annotations

import numpy as np

from .data import Trajectory
from .errors import ConfigError, NotFittedStateError, ShapeError


def check_positive(name, value, kind=float, strict=True):
    try:
        v = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {value!r}") from None
    if strict and v <= 0 or not strict and v < 0:
        bound = "positive" if strict else "non-negative"
        raise ConfigError(f"{name} must be {bound}, got {value!r}")
    return v


def check_choice(name, value, options):
    if value not in options:
        raise ConfigError(f"{name} must be one of {sorted(options)}, "
                          f"got {value!r}")
    return value


def check_fraction(name, value):
    v = float(value)
    if not 0.0 <= v <= 1.0:
        raise ConfigError(f"{name} must lie in [0, 1], got {value!r}")
    return v


def check_array(name, x, ndim=None, n_cols=None):
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if n_cols is not None and arr.shape[-1] != n_cols:
        raise ShapeError(f"{name} must have {n_cols} columns, "
                         f"got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} contains non-finite values")
    return arr


def check_trajectories(x, min_runs=1):
    """Accept a Trajectory or an iterable of them; returns a list."""
    if isinstance(x, Trajectory):
        x = [x]
    try:
        runs = list(x)
    except TypeError:
        raise ConfigError(
            "expected a Trajectory or an iterable of trajectories, got "
            f"{type(x).__name__}") from None
    for r in runs:
        if not isinstance(r, Trajectory):
            raise ConfigError("all items must be Trajectory instances, got "
                              f"{type(r).__name__}")
    if len(runs) < min_runs:
        raise ConfigError(f"need at least {min_runs} run(s), got {len(runs)}")
    return runs


def check_is_fitted(estimator, attributes):
    for attr in attributes:
        if getattr(estimator, attr, None) is None:
            raise NotFittedStateError(
                f"{type(estimator).__name__} is not fitted; call fit first")

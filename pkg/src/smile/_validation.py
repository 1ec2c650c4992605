"""Input validation helpers shared by the estimators and kernels."""
from __future__ import annotations

import numbers

import numpy as np


def check_random_state(seed):
    """Turn ``seed`` into a ``np.random.Generator`` (or pass a stream through)."""
    if seed is None or isinstance(seed, (numbers.Integral, np.integer)):
        return np.random.default_rng(seed)
    if isinstance(seed, np.random.Generator) or hasattr(seed, "standard_normal"):
        return seed
    if isinstance(seed, np.random.RandomState):
        return np.random.default_rng(seed.randint(2 ** 63))
    raise ValueError(f"{seed!r} cannot be used to seed a Generator")


def check_positive(name, value, allow_inf=False):
    value = float(value)
    if not value > 0 or (np.isinf(value) and not allow_inf) or np.isnan(value):
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def check_probability(name, value, open_interval=True):
    value = float(value)
    ok = 0.0 < value < 1.0 if open_interval else 0.0 <= value <= 1.0
    if not ok:
        raise ValueError(f"{name} must lie in (0, 1), got {value}")
    return value


def check_position(theta, dim=None):
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 0:
        raise ValueError("position must be at least 1-d")
    if dim is not None and theta.shape[-1] != dim:
        raise ValueError(f"position has dimension {theta.shape[-1]}, expected {dim}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("position has non-finite entries")
    return theta

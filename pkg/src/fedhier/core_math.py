"""Flat parameter-vector helpers and the smooth l1 (log-cosh) penalty.

Parameter vectors are plain 1-D float64 numpy arrays. The penalty

    phi_rho(x) = rho * sum_n log cosh(x_n / rho)

is evaluated through ``log cosh(z) = |z| + log1p(exp(-2|z|)) - log 2`` so that
tiny smoothing levels (rho ~ 6e-5) never overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidInputError

DEFAULT_EPS_ZERO = 1e-3
_LOG2 = math.log(2.0)


@dataclass(frozen=True)
class SmoothL1Config:
    rho: float

    def __post_init__(self):
        if not (self.rho > 0 and math.isfinite(self.rho)):
            raise InvalidInputError(f"rho must be a positive finite number, got {self.rho!r}")


def as_vector(x, name: str = "x") -> np.ndarray:
    """Coerce to a 1-D float64 array and reject NaN/Inf."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        v = v.reshape(-1)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return v


def _rho(cfg) -> float:
    if isinstance(cfg, SmoothL1Config):
        return cfg.rho
    return SmoothL1Config(float(cfg)).rho


def log_cosh(z: np.ndarray) -> np.ndarray:
    a = np.abs(z)
    return a + np.log1p(np.exp(-2.0 * a)) - _LOG2


def log_cosh_penalty(x, cfg) -> float:
    rho = _rho(cfg)
    v = as_vector(x)
    return float(rho * np.sum(log_cosh(v / rho)))


def log_cosh_grad(x, cfg) -> np.ndarray:
    rho = _rho(cfg)
    v = as_vector(x)
    return np.tanh(v / rho)


def affine_combine(a: float, x, b: float, y) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return a * x + b * y


def nonzero_stats(x, eps_zero: float = DEFAULT_EPS_ZERO) -> tuple[int, float]:
    """Return ``(count, ratio)`` of entries with ``|x_n| >= eps_zero``."""
    if not eps_zero > 0:
        raise InvalidInputError("eps_zero must be positive")
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise InvalidInputError("empty vector")
    count = int(np.count_nonzero(np.abs(v) >= eps_zero))
    return count, count / v.size


def sparsity_ratio(x, eps_zero: float = DEFAULT_EPS_ZERO) -> float:
    return nonzero_stats(x, eps_zero)[1]


def sq_norm(x: np.ndarray) -> float:
    return float(np.dot(x, x))

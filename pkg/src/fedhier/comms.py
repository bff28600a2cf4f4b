"""Upload bit accounting and the sparsity-weight schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import DEFAULT_EPS_ZERO, nonzero_stats
from .errors import InvalidInputError

INIT = "INIT"
TINY = "TINY"


@dataclass
class CommsAccount:
    bits_per_nonzero: int = 64
    bits_per_zero: int = 1
    location_bits_per_param: int = 1
    cumulative_bits: int = 0

    def upload_bits(self, model, eps_zero: float = DEFAULT_EPS_ZERO, sparse_coding: bool = True) -> int:
        v = np.asarray(model).reshape(-1)
        d = v.size
        if not sparse_coding:
            return self.bits_per_nonzero * d
        nnz, _ = nonzero_stats(v, eps_zero)
        return (self.bits_per_nonzero * nnz
                + self.bits_per_zero * (d - nnz)
                + self.location_bits_per_param * d)

    def account_upload(self, model, eps_zero: float = DEFAULT_EPS_ZERO, sparse_coding: bool = True) -> int:
        bits = self.upload_bits(model, eps_zero, sparse_coding)
        self.cumulative_bits += bits
        return bits


def account_upload(model, eps_zero, sparse_coding, acct: CommsAccount):
    """Functional form: returns ``(bits, acct)`` with ``acct`` updated."""
    bits = acct.account_upload(model, eps_zero, sparse_coding)
    return bits, acct


@dataclass
class GammaSchedule:
    gamma_init: float = 0.001
    gamma_tiny: float = 1e-5
    sparsity_target: float = 0.2
    switch_round: int = 100
    trigger: str = "either"
    state: str = INIT
    switched_at: int | None = None

    def __post_init__(self):
        if self.trigger not in ("either", "both"):
            raise InvalidInputError(f"gamma trigger must be 'either' or 'both', got {self.trigger!r}")

    def step(self, current_sparsity: float, round: int) -> tuple[float, float]:
        if not 0.0 <= current_sparsity <= 1.0:
            raise InvalidInputError("sparsity must lie in [0, 1]")
        if self.state == INIT:
            low = current_sparsity <= self.sparsity_target
            late = round >= self.switch_round
            if (low or late) if self.trigger == "either" else (low and late):
                self.state = TINY
                self.switched_at = round
        g = self.gamma_init if self.state == INIT else self.gamma_tiny
        return g, g


def gamma_step(sched: GammaSchedule, current_sparsity: float, round: int):
    g1, g2 = sched.step(current_sparsity, round)
    return g1, g2, sched


def threshold_for_transmission(model, eps_zero: float = DEFAULT_EPS_ZERO) -> np.ndarray:
    if not eps_zero > 0:
        raise InvalidInputError("eps_zero must be positive")
    v = np.array(model, dtype=np.float64)
    v[np.abs(v) < eps_zero] = 0.0
    return v

"""Client-side personalized-model subproblem and the closed-form local edge model.

The subproblem is

    H(theta) = loss(theta; batch) + gamma1 * phi_rho(theta) + lambda1/2 * ||theta - center||^2

and is minimized by Nesterov's accelerated gradient method, stopping once
``||grad H||^2 <= nu`` or after ``K`` iterations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core_math import _rho, log_cosh_grad, log_cosh_penalty
from .errors import DimensionError, DivergenceError, InvalidInputError


@dataclass(frozen=True)
class InnerSolveConfig:
    max_iters: int = 5
    nu: float = 1e-6
    eta: float = 0.05

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidInputError("max_iters must be >= 1")
        if not self.nu > 0:
            raise InvalidInputError("nu must be positive")
        if not self.eta > 0:
            raise InvalidInputError("eta must be positive")


@dataclass
class SolveReport:
    theta: np.ndarray
    final_grad_norm_sq: float
    iters_used: int
    converged: bool


def objective_H(theta, prox_center, batch, model, lambda1, gamma1, rho):
    """Value and exact gradient of the personalized subproblem."""
    theta = np.asarray(theta, dtype=np.float64)
    prox_center = np.asarray(prox_center, dtype=np.float64)
    if theta.shape != prox_center.shape:
        raise DimensionError(f"theta {theta.shape} vs prox center {prox_center.shape}")
    loss, grad = model.loss_and_grad(theta, batch)
    diff = theta - prox_center
    value = loss + 0.5 * lambda1 * float(np.dot(diff, diff))
    grad = grad + lambda1 * diff
    if gamma1 != 0.0:
        value += gamma1 * log_cosh_penalty(theta, rho)
        grad = grad + gamma1 * log_cosh_grad(theta, rho)
    return value, grad


def _grad(theta, prox_center, batch, model, lambda1, gamma1, rho, k):
    # gradient only: the penalty value is never needed inside the loop
    loss, grad = model.loss_and_grad(theta, batch)
    grad = grad + lambda1 * (theta - prox_center)
    if gamma1 != 0.0:
        grad += gamma1 * np.tanh(theta / rho)
    if not (math.isfinite(loss) and math.isfinite(float(np.dot(grad, grad)))):
        raise DivergenceError(f"non-finite iterate or gradient at inner iteration {k}")
    return grad


def solve_personalized(prox_center, batch, model, lambda1, gamma1, rho, cfg: InnerSolveConfig,
                       warm_start=None) -> SolveReport:
    """Nesterov AGD from ``warm_start``; returns the last iterate."""
    prox_center = np.asarray(prox_center, dtype=np.float64)
    x = prox_center.copy() if warm_start is None else np.array(warm_start, dtype=np.float64)
    if x.shape != prox_center.shape:
        raise DimensionError(f"warm start {x.shape} vs prox center {prox_center.shape}")

    if gamma1 != 0.0:
        rho = _rho(rho)
    eta = cfg.eta
    t = 1.0
    x_prev = x
    g = _grad(x, prox_center, batch, model, lambda1, gamma1, rho, 0)
    k = 0
    while True:
        gsq = float(np.dot(g, g))
        if gsq <= cfg.nu or k >= cfg.max_iters:
            break
        t_next = (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
        momentum = (t - 1.0) / t_next
        if momentum == 0.0:
            y, gy = x, g
        else:
            y = x + momentum * (x - x_prev)
            gy = _grad(y, prox_center, batch, model, lambda1, gamma1, rho, k)
        x_prev, x = x, y - eta * gy
        t = t_next
        k += 1
        g = _grad(x, prox_center, batch, model, lambda1, gamma1, rho, k)
    return SolveReport(theta=x, final_grad_norm_sq=gsq, iters_used=k, converged=gsq <= cfg.nu)


def closed_form_edge_model(theta, w_edge, lambda1, lambda2) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    w_edge = np.asarray(w_edge, dtype=np.float64)
    if theta.shape != w_edge.shape:
        raise DimensionError(f"theta {theta.shape} vs edge model {w_edge.shape}")
    if not lambda1 + lambda2 > 0:
        raise InvalidInputError("lambda1 + lambda2 must be positive")
    return (lambda1 * theta + lambda2 * w_edge) / (lambda1 + lambda2)

"""Numerical checks of the smoothness/convexity constants and convergence diagnostics.

The quadratic task family 0.5 * mu * ||theta - a||^2 admits an exact inner
minimization, which gives an oracle for the curvature of the tri-level objective
F_{i,j}. Quantities that depend on the unknown optimum of a learned model are
only computed on that synthetic family and are logged, never asserted.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .core_math import log_cosh_grad, log_cosh_penalty, nonzero_stats
from .data import QuadraticTaskSet, minibatch
from .errors import DimensionError, InvalidInputError
from .inner_solver import solve_personalized

NAN = float("nan")


@dataclass
class TheoryConstants:
    L_F: float
    mu_F: float
    lambda_bar: float
    lambda_eff: float
    eta_check: float
    delta_sq_est: float = NAN
    sigma_ell_sq_est: float = NAN
    gamma_ell_sq_est: float = NAN
    d_s: int = -1

    def to_dict(self):
        return asdict(self)


def smoothness_constants(hp, mu: float) -> TheoryConstants:
    if not hp.rho > 0:
        raise InvalidInputError("rho must be positive")
    l1, l2 = hp.lambda1, hp.lambda2
    denom = l1 * mu + l2 * mu + l1 * l2
    return TheoryConstants(
        L_F=l2 + hp.gamma2 / hp.rho,
        mu_F=l1 * l2 * mu / denom if denom else 0.0,
        lambda_bar=l1 * l2 / (l1 + l2),
        lambda_eff=l1 * l2 / math.sqrt(l1 * l1 + l2 * l2),
        eta_check=hp.eta1 * hp.beta * hp.R,
    )


# -- exact envelope for quadratic losses ----------------------------------------------

def _solve_theta(a, w, mu, lam_bar, gamma1, rho, iters=200):
    """Coordinate-wise root of mu(t - a) + gamma1 tanh(t/rho) + lam_bar (t - w) = 0 by bisection."""
    lo = np.minimum(a, w) - gamma1 / (mu + lam_bar) - 1.0
    hi = np.maximum(a, w) + gamma1 / (mu + lam_bar) + 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        f = mu * (mid - a) + gamma1 * np.tanh(mid / rho) + lam_bar * (mid - w)
        pos = f > 0
        hi = np.where(pos, mid, hi)
        lo = np.where(pos, lo, mid)
    return 0.5 * (lo + hi)


def envelope_minimizers(w, target, hp, mu: float = 1.0):
    """Exact (theta_hat, phi_hat) for the loss 0.5*mu*||theta - target||^2."""
    w = np.asarray(w, dtype=np.float64)
    a = np.asarray(target, dtype=np.float64)
    if w.shape != a.shape:
        raise DimensionError(f"w {w.shape} vs target {a.shape}")
    l1, l2 = hp.lambda1, hp.lambda2
    if hp.gamma1 == 0.0:
        # stationarity in (theta, phi): a 2x2 linear system shared by every coordinate
        M = np.array([[mu + l1, -l1], [-l1, l1 + l2]])
        rhs = np.stack([mu * a, l2 * w])
        theta, phi = np.linalg.solve(M, rhs)
    else:
        theta = _solve_theta(a, w, mu, l1 * l2 / (l1 + l2), hp.gamma1, hp.rho)
        phi = (l1 * theta + l2 * w) / (l1 + l2)
    return theta, phi


def envelope_value(w, target, hp, mu: float = 1.0) -> float:
    """F_{i,j}(w) for a quadratic client loss, by exact inner minimization."""
    theta, phi = envelope_minimizers(w, target, hp, mu)
    w = np.asarray(w, dtype=np.float64)
    r = theta - target
    v = 0.5 * mu * float(np.dot(r, r))
    v += 0.5 * hp.lambda1 * float(np.dot(theta - phi, theta - phi))
    v += 0.5 * hp.lambda2 * float(np.dot(phi - w, phi - w))
    if hp.gamma1:
        v += hp.gamma1 * log_cosh_penalty(theta, hp.rho)
    if hp.gamma2:
        v += hp.gamma2 * log_cosh_penalty(w, hp.rho)
    return v


def measure_envelope_curvature(tasks: QuadraticTaskSet, hp, probes: int = 100, seed: int = 0,
                               h: float = 1e-4, spread: float = 1.0) -> tuple[float, float]:
    """Extremes of central second differences of F_{i,j} along random unit directions.

    Half of the probe points have a block of coordinates set to zero so that
    the penalty's high-curvature region near the origin gets exercised.
    """
    rng = np.random.default_rng(seed)
    lo, hi = math.inf, -math.inf
    d = tasks.dim
    for p in range(probes):
        k = int(rng.integers(tasks.num_clients))
        a = tasks.targets[k]
        w = tasks.optimum + spread * rng.standard_normal(d)
        if p % 2:
            w[rng.random(d) < 0.5] = 0.0
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        f0 = envelope_value(w, a, hp, tasks.mu)
        fp = envelope_value(w + h * u, a, hp, tasks.mu)
        fm = envelope_value(w - h * u, a, hp, tasks.mu)
        c = (fp - 2.0 * f0 + fm) / (h * h)
        lo, hi = min(lo, c), max(hi, c)
    return lo, hi


# -- federation-state diagnostics ---------------------------------------------------------

def first_order_residuals(cloud, hp, nu: float | None = None) -> list[dict]:
    """Per-client residuals of the two stationarity identities after the latest round.

    r1 = ||lambda1 (phi - theta) + lambda2 (phi - w_edge)||   (exact by construction)
    r2 = ||grad loss(theta) + gamma1 grad phi(theta) + lambda1 (theta - center)||^2
    """
    nu = hp.nu if nu is None else nu
    out = []
    for c in cloud.clients:
        if c.last is None:
            continue
        last = c.last
        if c.theta.shape != c.phi_local.shape or c.theta.shape != last.w_edge.shape:
            raise DimensionError(f"client {c.index}: inconsistent state dimensions")
        r1 = float(np.linalg.norm(hp.lambda1 * (c.phi_local - c.theta) + hp.lambda2 * (c.phi_local - last.w_edge)))
        _, g = c.model.loss_and_grad(c.theta, last.batch)
        g = g + hp.lambda1 * (c.theta - last.center)
        if hp.gamma1:
            g = g + hp.gamma1 * log_cosh_grad(c.theta, hp.rho)
        r2 = float(np.dot(g, g))
        out.append(dict(client=c.index, r1=r1, r2=r2, converged=last.converged,
                        r2_within_nu=(r2 <= nu) if last.converged else None))
    return out


def estimate_noise_terms(cloud, hp, repeats: int = 4, seed: int = 0, identical_seeds: bool = False,
                         batch_size: int | None = None) -> tuple[float, float, float]:
    """Empirical (delta^2, gamma_ell^2, sigma_ell^2) at the current global model.

    delta^2: spread of personalized solves over independent mini-batches from one prox center.
    gamma_ell^2: mini-batch gradient variance against the full-shard gradient.
    sigma_ell^2: spread of per-client full gradients around their mean.
    """
    if repeats < 2:
        raise InvalidInputError("repeats must be >= 2")
    w = cloud.w
    bs = hp.batch_size if batch_size is None else batch_size
    cfg = hp.inner_config()
    deltas, gvars, full_grads = [], [], []
    for c in cloud.clients:
        center = c.last.center if c.last is not None else w
        _, g_full = c.model.loss_and_grad(w, c.train)
        full_grads.append(g_full)
        thetas, gv = [], []
        for r in range(repeats):
            rng = np.random.default_rng([seed, c.index, 0 if identical_seeds else r])
            batch = minibatch(c.train, bs, rng)
            rep = solve_personalized(center, batch, c.model, hp.lambda1, hp.gamma1, hp.rho, cfg,
                                     warm_start=center)
            thetas.append(rep.theta)
            _, g = c.model.loss_and_grad(w, batch)
            gv.append(float(np.dot(g - g_full, g - g_full)))
        T = np.stack(thetas)
        dev = T - T.mean(axis=0)
        deltas.append(float(np.mean(np.sum(dev * dev, axis=1))))
        gvars.append(float(np.mean(gv)))
    G = np.stack(full_grads)
    dev = G - G.mean(axis=0)
    sigma = float(np.mean(np.sum(dev * dev, axis=1)))
    return float(np.mean(deltas)), float(np.mean(gvars)), sigma


def stationarity_series(log, window: int, column: str = "grad_norm_sq_est") -> dict:
    """Compare the first and final windowed averages of a monitored series."""
    if hasattr(log, "column"):
        values = log.column(column)
    else:
        values = np.asarray(log, dtype=np.float64)
    if window < 1 or window > len(values):
        raise InvalidInputError(f"window {window} does not fit a series of length {len(values)}")
    first = float(np.mean(values[:window]))
    final = float(np.mean(values[-window:]))
    kernel = np.ones(window) / window
    running = np.convolve(values, kernel, mode="valid")
    return dict(
        column=column,
        window=window,
        first_window_avg=first,
        final_window_avg=final,
        ratio=final / first if first != 0 else (1.0 if final == 0 else math.inf),
        decreasing=final < first,
        running_avg=running.tolist(),
    )


def quadratic_family_report(tasks: QuadraticTaskSet, hp, w0=None, delta_sq: float = 0.0,
                            L: float = 1.0) -> dict:
    """Optimum-dependent constants for the synthetic family (logged only).

    Valid for gamma1 = gamma2 = 0, where F(w) = mean_k 0.5 mu_F ||w - a_k||^2.
    """
    k = smoothness_constants(hp, tasks.mu)
    w_star = tasks.optimum
    diffs = w_star - tasks.targets
    grads = k.mu_F * diffs
    sigma_F1 = float(np.mean(np.sum(grads * grads, axis=1)))
    ell_grads = tasks.mu * diffs
    dev = ell_grads - ell_grads.mean(axis=0)
    sigma_ell = float(np.mean(np.sum(dev * dev, axis=1)))
    lam, lam_bar, L_F, mu_F, beta = k.lambda_eff, k.lambda_bar, k.L_F, k.mu_F, hp.beta
    Lg = L + hp.gamma1 / hp.rho
    d_s = nonzero_stats(w_star)[0]
    rep = dict(
        L_F=L_F, mu_F=mu_F, lambda_bar=lam_bar, lambda_eff=lam, eta_check=k.eta_check,
        sigma_F1_sq=sigma_F1, sigma_ell_sq=sigma_ell, delta_sq=delta_sq, d_s=d_s,
        M1=8 * delta_sq * lam_bar ** 2 / mu_F,
        M2=6 * (1 + 64 * L_F / (mu_F * beta)) * sigma_F1 + 128 * L_F * delta_sq * lam_bar ** 2 / (mu_F * beta),
        D1=sigma_F1 / lam ** 2 + hp.gamma2 ** 2 * d_s ** 2 / lam_bar ** 2 + delta_sq,
        G1=3 * beta * lam_bar ** 2 * delta_sq,
        eta_check_bound_strongly_convex=min(1 / mu_F, 1 / (3 * L_F * (3 + 128 * L_F / (mu_F * beta)))),
    )
    if lam ** 2 > 16 * Lg ** 2:
        sigma_F2 = lam ** 2 / (lam ** 2 - 16 * Lg ** 2) * sigma_ell
        rep["sigma_F2_sq"] = sigma_F2
        rep["G2"] = 3 * L_F * (49 * hp.R * sigma_F2 + 16 * delta_sq * lam_bar ** 2) / hp.R
        rep["D2"] = sigma_F2 / lam ** 2 + hp.gamma2 ** 2 * d_s ** 2 / lam_bar ** 2 + delta_sq
    else:
        rep["sigma_F2_sq"] = rep["G2"] = rep["D2"] = NAN
    if w0 is not None:
        w0 = np.asarray(w0, dtype=np.float64)
        rep["Delta0"] = float(np.dot(w0 - w_star, w0 - w_star))
        F0 = float(np.mean([0.5 * mu_F * np.dot(w0 - a, w0 - a) for a in tasks.targets]))
        Fs = float(np.mean([0.5 * mu_F * np.dot(w_star - a, w_star - a) for a in tasks.targets]))
        rep["Delta_F"] = F0 - Fs
    return rep


def penalty_gradient_bounds(log, d: int) -> dict:
    """Check ||grad phi(w)||^2 <= d and <= d_s^2 on every logged round (w thresholded)."""
    pg = log.column("penalty_grad_sq")
    ds = log.column("d_s")
    ok_d = bool(np.all(pg <= d)) if len(pg) else True
    ok_ds = bool(np.all(pg <= ds ** 2)) if len(pg) else True
    return dict(max_penalty_grad_sq=float(pg.max()) if len(pg) else 0.0, bound_d=ok_d, bound_d_s_sq=ok_ds)


def theory_report(result, cfg, noise_repeats: int = 4) -> dict:
    hp = result.hp
    if len(result.log):
        # residuals must use the penalty weights of the round that produced the state
        ex = result.log.records[-1].extras
        hp = replace(hp, gamma1=ex.get("gamma1", hp.gamma1), gamma2=ex.get("gamma2", hp.gamma2))
    if cfg.algorithm == "pfedme":
        hp = replace(hp, gamma1=0.0, gamma2=0.0)
    k = smoothness_constants(hp, mu=getattr(result.cloud.clients[0].model.spec, "l2_reg", 0.0)
                             if result.cloud.clients else 0.0)
    report = dict(constants=k.to_dict(), eta_check_matches=math.isclose(k.eta_check, hp.eta1 * hp.beta * hp.R))
    nnz, _ = nonzero_stats(result.cloud.w, cfg.comms.eps_zero)
    report["constants"]["d_s"] = nnz
    if len(result.log):
        window = max(1, min(50, len(result.log) // 4 or 1))
        report["stationarity"] = {
            "grad_norm_sq": _strip(stationarity_series(result.log, window)),
            "objective": _strip(stationarity_series(result.log, window, "objective_est")),
            "theta_drift": _strip(stationarity_series(result.log, window, "theta_drift")),
        }
        report["penalty_gradient"] = penalty_gradient_bounds(result.log, result.cloud.w.size)
        res = first_order_residuals(result.cloud, hp)
        if res:
            report["first_order"] = dict(
                max_r1=max(r["r1"] for r in res),
                max_r2=max(r["r2"] for r in res),
                converged_clients=sum(bool(r["converged"]) for r in res),
                clients=len(res),
                r2_within_nu_when_converged=all(r["r2_within_nu"] in (None, True) for r in res),
            )
        if noise_repeats >= 2:
            delta, gam, sig = estimate_noise_terms(result.cloud, hp, noise_repeats, seed=cfg.master_seed)
            report["constants"].update(delta_sq_est=delta, gamma_ell_sq_est=gam, sigma_ell_sq_est=sig)
    if result.gamma_schedule is not None:
        report["gamma_schedule"] = dict(state=result.gamma_schedule.state,
                                        switched_at=result.gamma_schedule.switched_at)
    return report


def _strip(summary: dict) -> dict:
    return {k: v for k, v in summary.items() if k != "running_avg"}

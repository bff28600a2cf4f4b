"""Client-edge-cloud training loop for sFedHP and the baseline algorithms.

Topology: a ``CloudState`` owns ``N`` edges, each with ``J`` clients. The
client-cloud baselines (FedAvg, FedProx, pFedMe) run on the same structure with
one client per edge, so "edge i" is simply client i talking to the cloud.

Every aggregation is a sum in ascending index order, and every client draws its
mini-batches from its own generator, so results do not depend on how work is
spread over threads.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .comms import CommsAccount, GammaSchedule, threshold_for_transmission
from .core_math import DEFAULT_EPS_ZERO, log_cosh_grad, log_cosh_penalty, nonzero_stats
from .data import minibatch
from .errors import ConfigError, DivergenceError
from .inner_solver import InnerSolveConfig, closed_form_edge_model, solve_personalized
from .models import Batch

log = logging.getLogger(__name__)

SFEDHP = "sfedhp"
PFEDME = "pfedme"
FEDAVG = "fedavg"
HIERFAVG = "hierfavg"
FEDPROX = "fedprox"
ALGORITHMS = (SFEDHP, PFEDME, FEDAVG, HIERFAVG, FEDPROX)
CLIENT_CLOUD = (PFEDME, FEDAVG, FEDPROX)

CSV_COLUMNS = (
    "round", "global_test_acc", "mean_personal_acc", "objective_est",
    "grad_norm_sq_est", "sparsity_w", "cumulative_bits", "wall_ms",
)


@dataclass(frozen=True)
class HyperParams:
    lambda1: float = 25.0
    lambda2: float = 25.0
    gamma1: float = 0.0
    gamma2: float = 0.0
    rho: float = 6e-5
    beta: float = 1.0
    eta1: float = 0.05
    eta2: float = 0.05  # recorded only; no update rule consumes it
    T: int = 800
    R: int = 20
    K: int = 5
    nu: float = 1e-6
    batch_size: int = 20
    S: int = 2
    N: int = 2
    J: int = 10
    prox_mu: float = 0.001  # FedProx proximal weight

    def validate(self) -> list[str]:
        p = []
        for name in ("lambda1", "lambda2", "rho", "eta1", "eta2", "nu"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                p.append(f"hyperparams.{name} must be a positive number (got {v!r})")
        for name in ("gamma1", "gamma2", "prox_mu"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                p.append(f"hyperparams.{name} must be nonnegative (got {v!r})")
        if not (isinstance(self.beta, (int, float)) and 0 <= self.beta <= 1):
            p.append(f"hyperparams.beta must lie in (0, 1] (got {self.beta!r})")
        for name in ("R", "K", "batch_size", "N", "J", "S"):
            v = getattr(self, name)
            if not (isinstance(v, int) and v >= 1):
                p.append(f"hyperparams.{name} must be an integer >= 1 (got {v!r})")
        if not (isinstance(self.T, int) and self.T >= 0):
            p.append(f"hyperparams.T must be an integer >= 0 (got {self.T!r})")
        if isinstance(self.S, int) and isinstance(self.N, int) and self.S > self.N:
            p.append(f"hyperparams.S ({self.S}) exceeds the edge count N ({self.N})")
        return p

    def check(self):
        problems = self.validate()
        if problems:
            raise ConfigError(problems)
        if self.beta == 0:
            warnings.warn("beta = 0 freezes the global model", stacklevel=2)

    @property
    def lambda_bar(self) -> float:
        return self.lambda1 * self.lambda2 / (self.lambda1 + self.lambda2)

    def inner_config(self, eta: float | None = None) -> InnerSolveConfig:
        return InnerSolveConfig(max_iters=self.K, nu=self.nu, eta=self.eta1 if eta is None else eta)


def check_nonconvex_condition(hp: HyperParams, L: float) -> bool:
    """Warn when lambda2 <= 4L + 4 gamma1/rho (smoothness guarantee for nonconvex losses lapses)."""
    ok = hp.lambda2 > 4.0 * L + 4.0 * hp.gamma1 / hp.rho
    if not ok:
        warnings.warn(
            f"lambda2={hp.lambda2} does not exceed 4L + 4*gamma1/rho = {4 * L + 4 * hp.gamma1 / hp.rho:.4g}",
            stacklevel=2,
        )
    return ok


@dataclass
class LastSolve:
    batch: Batch
    center: np.ndarray
    w_edge: np.ndarray
    converged: bool
    grad_norm_sq: float


@dataclass
class ClientState:
    index: int
    theta: np.ndarray
    phi_local: np.ndarray
    train: Batch
    test: Batch | None
    rng: np.random.Generator
    model: object
    eval_batch: Batch | None = None
    last: LastSolve | None = None


@dataclass
class EdgeState:
    index: int
    w_edge: np.ndarray
    phi_edge: np.ndarray
    clients: list
    client_bits: int = 0


@dataclass
class CloudState:
    w: np.ndarray
    edges: list
    rng: np.random.Generator
    round: int = 0
    last_uploads: list = field(default_factory=list)

    @property
    def clients(self):
        return [c for e in self.edges for c in e.clients]


@dataclass
class RoundOptions:
    inner: InnerSolveConfig
    prox_center: str = "edge"
    faithful_sampling: bool = False
    pool: ThreadPoolExecutor | None = None
    count_client_edge: bool = False
    eps_zero: float = DEFAULT_EPS_ZERO
    acct: CommsAccount | None = None


def client_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, k])


def build_federation(models, shards, hp: HyperParams, w0, seed: int, eval_samples: int = 100,
                     clients_per_edge: int | None = None) -> CloudState:
    """Wire clients to edges in index order.

    ``models`` is one model shared by all clients or a per-client sequence;
    ``shards`` holds objects with ``train``/``test`` batches.
    """
    J = hp.J if clients_per_edge is None else clients_per_edge
    if len(shards) % J:
        raise ConfigError(f"{len(shards)} clients cannot be split into edges of {J}")
    w0 = np.array(w0, dtype=np.float64)
    per_client = isinstance(models, (list, tuple))
    clients = []
    for k, shard in enumerate(shards):
        n_eval = min(eval_samples, len(shard.train))
        clients.append(ClientState(
            index=k,
            theta=w0.copy(),
            phi_local=w0.copy(),
            train=shard.train,
            test=shard.test,
            rng=client_rng(seed, k),
            model=models[k] if per_client else models,
            eval_batch=Batch(shard.train.features[:n_eval], shard.train.labels[:n_eval]),
        ))
    edges = [
        EdgeState(i, w0.copy(), w0.copy(), clients[i * J:(i + 1) * J])
        for i in range(len(clients) // J)
    ]
    return CloudState(w=w0, edges=edges, rng=np.random.default_rng([seed, 0]))


def _pmap(pool, fn, items):
    if pool is None or len(items) < 2:
        return [fn(x) for x in items]
    return list(pool.map(fn, items))


def ordered_mean(vectors) -> np.ndarray:
    acc = np.array(vectors[0], dtype=np.float64)
    for v in vectors[1:]:
        acc = acc + v
    return acc / len(vectors)


def aggregate(w, uploads, beta: float) -> np.ndarray:
    """(1 - beta) * w + beta/S * sum(uploads), summed in the given order."""
    total = np.array(uploads[0], dtype=np.float64)
    for u in uploads[1:]:
        total = total + u
    return (1.0 - beta) * w + (beta / len(uploads)) * total


def _check_finite(v, what):
    if not np.all(np.isfinite(v)):
        raise DivergenceError(f"non-finite values in {what}")


# -- sFedHP ----------------------------------------------------------------------

def _client_step(client: ClientState, center, w_edge, hp: HyperParams, cfg: InnerSolveConfig):
    batch = minibatch(client.train, hp.batch_size, client.rng)
    rep = solve_personalized(center, batch, client.model, hp.lambda1, hp.gamma1, hp.rho, cfg,
                             warm_start=client.theta)
    client.theta = rep.theta
    client.phi_local = closed_form_edge_model(rep.theta, w_edge, hp.lambda1, hp.lambda2)
    client.last = LastSolve(batch, center, w_edge, rep.converged, rep.final_grad_norm_sq)
    return client.phi_local


def edge_update(edge: EdgeState, w_global, hp: HyperParams, opts: RoundOptions) -> np.ndarray:
    """Run ``R`` edge rounds starting from the global model; returns the edge model."""
    w = np.array(w_global, dtype=np.float64)
    edge.phi_edge = w.copy()
    for c in edge.clients:
        c.phi_local = w.copy()
    for r in range(hp.R):
        phi_edge = edge.phi_edge

        def work(c, w=w, phi_edge=phi_edge):
            center = phi_edge if opts.prox_center == "edge" else c.phi_local
            return _client_step(c, center, w, hp, opts.inner)

        try:
            phis = _pmap(opts.pool, work, edge.clients)
        except DivergenceError as exc:
            raise DivergenceError(f"edge {edge.index}, edge round {r}: {exc}") from exc
        if opts.count_client_edge and opts.acct is not None:
            for p in phis:
                edge.client_bits += opts.acct.upload_bits(p, opts.eps_zero, True)
        edge.phi_edge = ordered_mean(phis)
        step = hp.lambda2 * (w - edge.phi_edge)
        if hp.gamma2 != 0.0:
            step = step + hp.gamma2 * log_cosh_grad(w, hp.rho)
        w = w - hp.eta1 * step
        if not np.all(np.isfinite(w)):
            raise DivergenceError(f"edge {edge.index} diverged at edge round {r}")
    edge.w_edge = w
    return w


def _sample(cloud: CloudState, S: int) -> list[int]:
    N = len(cloud.edges)
    if S > N:
        raise ConfigError(f"cannot sample S={S} of N={N} edges")
    return sorted(int(i) for i in cloud.rng.choice(N, size=S, replace=False))


def _run_edges(cloud, chosen, fn, opts):
    # parallelize across edges when several are active, else across the clients of the one edge
    if len(chosen) > 1:
        inner = dataclasses.replace(opts, pool=None)
        return _pmap(opts.pool, lambda i: fn(cloud.edges[i], inner), chosen)
    return [fn(cloud.edges[i], opts) for i in chosen]


def cloud_round(cloud: CloudState, hp: HyperParams, opts: RoundOptions) -> CloudState:
    """One sFedHP global round over ``hp.S`` sampled edges."""
    S = hp.S
    if opts.faithful_sampling:
        everyone = list(range(len(cloud.edges)))
        results = dict(zip(everyone, _run_edges(
            cloud, everyone, lambda e, o: edge_update(e, cloud.w, hp, o), opts)))
        chosen = _sample(cloud, S)
        uploads = [results[i] for i in chosen]
    else:
        chosen = _sample(cloud, S)
        uploads = _run_edges(cloud, chosen, lambda e, o: edge_update(e, cloud.w, hp, o), opts)
    return _finish_round(cloud, hp, chosen, uploads)


def _finish_round(cloud, hp, chosen, uploads):
    w = aggregate(cloud.w, uploads, hp.beta)
    _check_finite(w, f"global model after round {cloud.round}")
    cloud.last_uploads = list(zip(chosen, uploads))
    cloud.w = w
    cloud.round += 1
    return cloud


# -- baselines --------------------------------------------------------------------

def _local_sgd(client: ClientState, w_start, hp: HyperParams, steps_per_batch: int, batches: int,
               prox_anchor=None, prox_mu=0.0):
    w = np.array(w_start, dtype=np.float64)
    for _ in range(batches):
        batch = minibatch(client.train, hp.batch_size, client.rng)
        for _ in range(steps_per_batch):
            _, g = client.model.loss_and_grad(w, batch)
            if prox_anchor is not None and prox_mu != 0.0:
                g = g + prox_mu * (w - prox_anchor)
            w = w - hp.eta1 * g
    if not np.all(np.isfinite(w)):
        raise DivergenceError(f"client {client.index} local training diverged")
    client.theta = w
    return w


def _fedavg_edge(edge, w_global, hp, opts, prox_mu=0.0):
    client = edge.clients[0]
    return _local_sgd(client, w_global, hp, hp.K, hp.R, prox_anchor=w_global, prox_mu=prox_mu)


def _hierfavg_edge(edge: EdgeState, w_global, hp, opts):
    w = np.array(w_global, dtype=np.float64)
    for _ in range(hp.R):
        locals_ = _pmap(opts.pool, lambda c, w=w: _local_sgd(c, w, hp, hp.K, 1), edge.clients)
        w = ordered_mean(locals_)
    edge.w_edge = w
    return w


def _pfedme_client(edge: EdgeState, w_global, hp, opts):
    """Client-cloud pFedMe: the personalized solve and local update run on the client itself."""
    client = edge.clients[0]
    lam1, lam2 = hp.lambda1, hp.lambda2
    w_local = np.array(w_global, dtype=np.float64)
    phi = w_local.copy()
    client.phi_local = w_local.copy()
    for r in range(hp.R):
        center = phi if opts.prox_center == "edge" else client.phi_local
        batch = minibatch(client.train, hp.batch_size, client.rng)
        rep = solve_personalized(center, batch, client.model, lam1, 0.0, hp.rho, opts.inner,
                                 warm_start=client.theta)
        client.theta = rep.theta
        phi = (lam1 * rep.theta + lam2 * w_local) / (lam1 + lam2)
        client.phi_local = phi
        client.last = LastSolve(batch, center, w_local, rep.converged, rep.final_grad_norm_sq)
        w_local = w_local - hp.eta1 * (lam2 * (w_local - phi))
        if not np.all(np.isfinite(w_local)):
            raise DivergenceError(f"client {client.index} diverged at local round {r}")
    edge.phi_edge = phi
    edge.w_edge = w_local
    return w_local


def baseline_round(variant: str, cloud: CloudState, hp: HyperParams, opts: RoundOptions) -> CloudState:
    if variant in CLIENT_CLOUD:
        if any(len(e.clients) != 1 for e in cloud.edges):
            raise ConfigError(f"{variant} runs client-cloud: every edge slot must hold exactly one client")
    elif variant != HIERFAVG:
        raise ConfigError(f"unknown baseline {variant!r}")

    if variant == FEDAVG:
        fn = lambda e, o: _fedavg_edge(e, cloud.w, hp, o)
    elif variant == FEDPROX:
        fn = lambda e, o: _fedavg_edge(e, cloud.w, hp, o, prox_mu=hp.prox_mu)
    elif variant == PFEDME:
        fn = lambda e, o: _pfedme_client(e, cloud.w, hp, o)
    else:
        fn = lambda e, o: _hierfavg_edge(e, cloud.w, hp, o)

    chosen = _sample(cloud, hp.S)
    uploads = _run_edges(cloud, chosen, fn, opts)
    return _finish_round(cloud, hp, chosen, uploads)


def run_round(variant: str, cloud: CloudState, hp: HyperParams, opts: RoundOptions) -> CloudState:
    if variant == SFEDHP:
        return cloud_round(cloud, hp, opts)
    return baseline_round(variant, cloud, hp, opts)


# -- metrics ------------------------------------------------------------------------

@dataclass
class MetricsRecord:
    round: int
    global_test_acc: float
    mean_personal_acc: float
    objective_est: float
    grad_norm_sq_est: float
    sparsity_w: float
    cumulative_bits: int
    wall_ms: float = 0.0
    extras: dict = field(default_factory=dict)

    def row(self) -> list[str]:
        out = []
        for name in CSV_COLUMNS:
            v = getattr(self, name)
            out.append(str(v) if isinstance(v, (int, np.integer)) else repr(float(v)))
        return out


@dataclass
class MetricsLog:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, rec: MetricsRecord):
        if self.records and rec.round <= self.records[-1].round:
            raise ValueError("rounds must strictly increase")
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        if name in CSV_COLUMNS:
            return np.array([getattr(r, name) for r in self.records], dtype=np.float64)
        return np.array([r.extras.get(name, np.nan) for r in self.records], dtype=np.float64)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            f.write(",".join(CSV_COLUMNS) + "\n")
            for r in self.records:
                f.write(",".join(r.row()) + "\n")

    @classmethod
    def from_csv(cls, path) -> "MetricsLog":
        import csv

        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
                raise ValueError(f"{path}: unexpected metrics schema {reader.fieldnames}")
            recs = [
                MetricsRecord(
                    round=int(row["round"]),
                    global_test_acc=float(row["global_test_acc"]),
                    mean_personal_acc=float(row["mean_personal_acc"]),
                    objective_est=float(row["objective_est"]),
                    grad_norm_sq_est=float(row["grad_norm_sq_est"]),
                    sparsity_w=float(row["sparsity_w"]),
                    cumulative_bits=int(row["cumulative_bits"]),
                    wall_ms=float(row["wall_ms"]),
                )
                for row in reader
            ]
        return cls(recs)


def global_objective_estimate(cloud: CloudState, hp: HyperParams, steps: int = 5):
    """Estimate F(w) and grad F(w) through each client's inner problem.

    Collapsing the two proximal terms gives a single pull of strength
    lambda1*lambda2/(lambda1+lambda2) towards w; a few accelerated steps on each
    client's evaluation subset approximate the inner minimizer theta. Then
    grad F_ij(w) = lambda_bar (w - theta) + gamma2 grad phi(w).
    """
    w = cloud.w
    lam = hp.lambda_bar
    cfg = InnerSolveConfig(max_iters=max(1, steps), nu=1e-300, eta=hp.eta1)
    values, grads = [], []
    for c in cloud.clients:
        rep = solve_personalized(w, c.eval_batch, c.model, lam, hp.gamma1, hp.rho, cfg, warm_start=w)
        theta = rep.theta
        loss, _ = c.model.loss_and_grad(theta, c.eval_batch)
        diff = theta - w
        v = loss + 0.5 * lam * float(np.dot(diff, diff))
        if hp.gamma1:
            v += hp.gamma1 * log_cosh_penalty(theta, hp.rho)
        values.append(v)
        grads.append(lam * (w - theta))
    obj = float(np.mean(values))
    grad = ordered_mean(grads)
    if hp.gamma2:
        obj += hp.gamma2 * log_cosh_penalty(w, hp.rho)
        grad = grad + hp.gamma2 * log_cosh_grad(w, hp.rho)
    return obj, float(np.dot(grad, grad))


def evaluate(cloud: CloudState, hp: HyperParams, global_test: Batch | None, eps_zero: float,
             objective_steps: int = 5) -> dict:
    clients = cloud.clients
    model = clients[0].model
    g_acc = model.accuracy(cloud.w, global_test) if global_test is not None and len(global_test) else float("nan")
    accs = [c.model.accuracy(c.theta, c.test) for c in clients if c.test is not None and len(c.test)]
    p_acc = float(np.mean(accs)) if accs else float("nan")
    obj, gn = global_objective_estimate(cloud, hp, objective_steps)
    nnz, ratio = nonzero_stats(cloud.w, eps_zero)
    sent = threshold_for_transmission(cloud.w, eps_zero)
    pg = log_cosh_grad(sent, hp.rho)
    drift = float(np.mean([float(np.dot(c.theta - cloud.w, c.theta - cloud.w)) for c in clients]))
    return dict(
        global_test_acc=g_acc, mean_personal_acc=p_acc, objective_est=obj, grad_norm_sq_est=gn,
        sparsity_w=ratio, d_s=nnz, penalty_grad_sq=float(np.dot(pg, pg)), theta_drift=drift,
    )


# -- orchestration ----------------------------------------------------------------

def default_eval_every(T: int) -> int:
    return 1 if T <= 200 else 5


@dataclass
class TrainingResult:
    log: MetricsLog
    cloud: CloudState
    hp: HyperParams
    acct: CommsAccount
    gamma_schedule: GammaSchedule | None
    round_bits: list


def run_training(cfg, dataset=None, on_round=None) -> TrainingResult:
    """Run ``cfg.hyperparams.T`` rounds of ``cfg.algorithm``; deterministic in ``cfg.master_seed``."""
    from .config import build_run  # local import: config depends on this module

    setup = build_run(cfg, dataset)
    cloud, hp, model = setup.cloud, setup.hp, setup.model
    acct = setup.acct
    sched = setup.gamma_schedule
    eps = cfg.comms.eps_zero
    every = cfg.eval_every or default_eval_every(hp.T)
    log_ = MetricsLog()
    round_bits = []

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    opts = RoundOptions(
        inner=hp.inner_config(cfg.inner_eta),
        prox_center=cfg.prox_center,
        faithful_sampling=cfg.faithful_sampling,
        pool=pool,
        count_client_edge=cfg.comms.count_client_edge,
        eps_zero=eps,
        acct=acct,
    )
    try:
        for t in range(hp.T):
            t0 = time.perf_counter()
            round_hp = hp
            if sched is not None:
                g1, g2 = sched.step(nonzero_stats(cloud.w, eps)[1], t)
                round_hp = dataclasses.replace(hp, gamma1=g1, gamma2=g2)
            try:
                run_round(cfg.algorithm, cloud, round_hp, opts)
            except DivergenceError as exc:
                raise DivergenceError(f"global round {t}: {exc}") from exc
            bits = 0
            for _, up in cloud.last_uploads:
                bits += acct.account_upload(up, eps, cfg.comms.sparse_coding)
            if cfg.comms.count_client_edge:
                extra = sum(e.client_bits for e in cloud.edges)
                for e in cloud.edges:
                    e.client_bits = 0
                acct.cumulative_bits += extra
                bits += extra
            round_bits.append(bits)
            if cfg.comms.threshold_state:
                cloud.w = threshold_for_transmission(cloud.w, eps)

            done = t + 1
            if done % every == 0 or done == hp.T:
                m = evaluate(cloud, round_hp, setup.global_test, eps, cfg.objective_steps)
                wall = (time.perf_counter() - t0) * 1000.0 if cfg.record_wall_time else 0.0
                rec = MetricsRecord(
                    round=done,
                    global_test_acc=m["global_test_acc"],
                    mean_personal_acc=m["mean_personal_acc"],
                    objective_est=m["objective_est"],
                    grad_norm_sq_est=m["grad_norm_sq_est"],
                    sparsity_w=m["sparsity_w"],
                    cumulative_bits=acct.cumulative_bits,
                    wall_ms=wall,
                    extras=dict(
                        gamma1=round_hp.gamma1, gamma2=round_hp.gamma2, d_s=m["d_s"],
                        penalty_grad_sq=m["penalty_grad_sq"], theta_drift=m["theta_drift"],
                        round_bits=bits,
                    ),
                )
                log_.append(rec)
                log.info("round %d acc=%.4f obj=%.4g sparsity=%.3f", done, rec.global_test_acc,
                         rec.objective_est, rec.sparsity_w)
                if on_round is not None:
                    on_round(rec, cloud)
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainingResult(log_, cloud, hp, acct, sched, round_bits)

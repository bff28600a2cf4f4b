import dataclasses
from types import SimpleNamespace

import numpy as np
import pytest

from fedhier.config import build_run
from fedhier.errors import ConfigError, DivergenceError
from fedhier.federation import (CSV_COLUMNS, HyperParams, MetricsLog, MetricsRecord, RoundOptions,
                                _sample, aggregate, build_federation, check_nonconvex_condition,
                                cloud_round, edge_update, run_round, run_training)
from fedhier.inner_solver import InnerSolveConfig
from fedhier.models import MLR, Batch, ModelSpec, NeuralModel, QuadraticModel
from conftest import tiny_config, tiny_mlr_config
from oracles import sfedhp_quadratic_edge_oracle


def stub_shards(n, rows=4, dim=2):
    b = Batch(np.zeros((rows, dim)), np.zeros(rows))
    return [SimpleNamespace(train=b, test=b) for _ in range(n)]


def exact_inner():
    return RoundOptions(inner=InnerSolveConfig(max_iters=5000, nu=1e-28, eta=0.03))


def test_zero_lambda2_keeps_global_model():
    hp = HyperParams(lambda2=0.0, R=3, J=2, N=1, S=1, batch_size=2)
    cloud = build_federation(QuadraticModel(np.ones(2)), stub_shards(2), hp, np.array([0.3, -0.1]), 0)
    w = edge_update(cloud.edges[0], cloud.w, hp, exact_inner())
    assert np.array_equal(w, [0.3, -0.1])


def test_single_edge_round_matches_straight_line_oracle():
    a, w0 = np.array([1.0, -2.0, 0.5]), np.array([0.2, 0.1, -0.3])
    hp = HyperParams(lambda1=4.0, lambda2=6.0, eta1=0.05, R=1, J=1, N=1, S=1, batch_size=2)
    cloud = build_federation(QuadraticModel(a), stub_shards(1, dim=3), hp, w0, 0)
    opts = exact_inner()
    w = edge_update(cloud.edges[0], cloud.w, hp, opts)
    theta, phi, w_next = sfedhp_quadratic_edge_oracle(a, w0, 4.0, 6.0, 0.05)
    c = cloud.clients[0]
    assert np.allclose(c.theta, theta, atol=1e-12)
    assert np.allclose(c.phi_local, phi, atol=1e-12)
    assert np.allclose(w, w_next, atol=1e-12)


def test_symmetric_clients_produce_identical_phis():
    spec = ModelSpec(MLR, 3, (), 2)
    b = Batch([[0.5, -1.0, 2.0]], [1])
    shards = [SimpleNamespace(train=b, test=b) for _ in range(3)]
    hp = HyperParams(lambda1=5.0, lambda2=5.0, R=2, J=3, N=1, S=1, batch_size=1)
    cloud = build_federation(NeuralModel(spec), shards, hp, np.zeros(8), 0)
    edge = cloud.edges[0]
    edge_update(edge, cloud.w, hp, RoundOptions(inner=hp.inner_config()))
    phis = [c.phi_local for c in edge.clients]
    assert all(np.array_equal(phis[0], p) for p in phis)
    assert np.array_equal(edge.phi_edge, phis[0]) or np.allclose(edge.phi_edge, phis[0], rtol=1e-15)


def test_first_order_identity_after_edge_rounds():
    cfg = tiny_config(T=2)
    setup = build_run(cfg)
    opts = RoundOptions(inner=setup.hp.inner_config())
    cloud_round(setup.cloud, setup.hp, opts)
    hp = setup.hp
    for c in setup.cloud.clients:
        if c.last is None:
            continue
        r = hp.lambda1 * (c.phi_local - c.theta) + hp.lambda2 * (c.phi_local - c.last.w_edge)
        assert np.max(np.abs(r)) < 1e-12


def test_aggregation_rules():
    w, u, v = np.array([1.0, 1.0]), np.array([3.0, 0.0]), np.array([5.0, 2.0])
    assert np.array_equal(aggregate(w, [u], 1.0), u)
    assert np.array_equal(aggregate(w, [u, v], 0.0), w)
    assert np.array_equal(aggregate(w, [u, v], 1.0), (u + v) / 2)
    assert np.allclose(aggregate(w, [u, v], 0.25), 0.75 * w + 0.25 * (u + v) / 2)


def test_beta_zero_warns_and_freezes():
    with pytest.warns(UserWarning, match="beta"):
        HyperParams(beta=0.0).check()


def test_sampling_is_unbiased():
    hp = HyperParams(N=5, J=1, S=2)
    cloud = build_federation(QuadraticModel(None), stub_shards(5), hp, np.zeros(3), seed=9)
    outs = np.random.default_rng(0).standard_normal((5, 3)) + 2.0
    acc = np.zeros(3)
    n = 10_000
    for _ in range(n):
        acc += aggregate(cloud.w, [outs[i] for i in _sample(cloud, 2)], 1.0)
    full = outs.mean(axis=0)
    assert np.linalg.norm(acc / n - full) / np.linalg.norm(full) < 1e-2
    # a finer check with many more draws against the 1e-3 relative target
    rng = np.random.default_rng(1)
    draws = np.array([np.sort(rng.choice(5, 2, replace=False)) for _ in range(200_000)])
    est = outs[draws].mean(axis=1).mean(axis=0)
    assert np.linalg.norm(est - full) / np.linalg.norm(full) < 1e-3


def test_sampling_sorted_without_replacement():
    hp = HyperParams(N=6, J=1, S=4)
    cloud = build_federation(QuadraticModel(None), stub_shards(6), hp, np.zeros(1), seed=2)
    for _ in range(50):
        s = _sample(cloud, 4)
        assert s == sorted(set(s)) and len(s) == 4
    with pytest.raises(ConfigError):
        _sample(cloud, 7)


def test_zero_rounds_keeps_w():
    cfg = tiny_config(T=0)
    res = run_training(cfg)
    w0 = build_run(cfg).cloud.w
    assert len(res.log) == 0 and np.array_equal(res.cloud.w, w0)


@pytest.mark.parametrize("algo", ["sfedhp", "pfedme", "fedavg", "hierfavg", "fedprox"])
def test_runs_are_bit_identical(algo):
    a = run_training(tiny_config(algo, T=3))
    b = run_training(tiny_config(algo, T=3))
    assert [r.row() for r in a.log.records] == [r.row() for r in b.log.records]
    assert np.array_equal(a.cloud.w, b.cloud.w)


def test_worker_count_does_not_change_results():
    base = tiny_config(T=3)
    base.hyperparams = dataclasses.replace(base.hyperparams, S=2)
    par = tiny_config(T=3)
    par.hyperparams = base.hyperparams
    par.workers = 4
    a, b = run_training(base), run_training(par)
    assert [r.row() for r in a.log.records] == [r.row() for r in b.log.records]


def test_pfedme_matches_degenerate_sfedhp():
    pf = tiny_config("pfedme", T=6)
    sf = tiny_config("sfedhp", T=6)
    # client-cloud view: every client is its own edge, S*J of them report each round
    sf.hyperparams = dataclasses.replace(sf.hyperparams, N=4, J=1, S=2)
    sf.partition = pf.partition
    a, b = build_run(pf), build_run(sf)
    assert a.hp == b.hp
    for _ in range(6):
        opts = RoundOptions(inner=a.hp.inner_config())
        run_round("pfedme", a.cloud, a.hp, opts)
        run_round("sfedhp", b.cloud, b.hp, opts)
        assert np.array_equal(a.cloud.w, b.cloud.w)


def test_fedprox_zero_weight_equals_fedavg():
    a = run_training(tiny_config("fedavg", T=3))
    b = run_training(tiny_config("fedprox", T=3, prox_mu=0.0))
    assert np.array_equal(a.cloud.w, b.cloud.w)


def test_fedavg_single_client_is_centralized_gd():
    spec = ModelSpec(MLR, 4, (), 3)
    rng = np.random.default_rng(0)
    data = Batch(rng.standard_normal((12, 4)), rng.integers(0, 3, 12))
    hp = HyperParams(N=1, J=1, S=1, R=3, K=2, batch_size=12, eta1=0.1)
    model = NeuralModel(spec)
    cloud = build_federation(model, [SimpleNamespace(train=data, test=data)], hp, np.zeros(15), 0)
    w = np.zeros(15)
    opts = RoundOptions(inner=hp.inner_config())
    for _ in range(4):
        run_round("fedavg", cloud, hp, opts)
        for _ in range(hp.R * hp.K):
            w = w - 0.1 * model.loss_and_grad(w, data)[1]
        assert np.allclose(cloud.w, w, rtol=1e-12, atol=1e-14)


def test_client_cloud_topology_enforced():
    setup = build_run(tiny_config("sfedhp"))
    with pytest.raises(ConfigError, match="client-cloud"):
        run_round("fedavg", setup.cloud, setup.hp, RoundOptions(inner=setup.hp.inner_config()))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_round_and_edge():
    cfg = tiny_config(T=3, eta1=50.0, lambda1=1e4, lambda2=1e4)
    with pytest.raises(DivergenceError, match=r"global round \d+: edge \d+, edge round \d+"):
        run_training(cfg)


def test_hyperparam_validation_lists_all():
    problems = HyperParams(lambda1=-1.0, eta1=0.0, S=5, N=2, T=-1).validate()
    assert len(problems) == 4
    with pytest.raises(ConfigError):
        HyperParams(K=0).check()


def test_nonconvex_condition_warning():
    with pytest.warns(UserWarning):
        assert not check_nonconvex_condition(HyperParams(lambda2=25.0, gamma1=0.001, rho=6e-5), 1.0)
    assert check_nonconvex_condition(HyperParams(lambda2=25.0), 1.0)


def test_metrics_log_contract(tmp_path):
    log = MetricsLog()
    log.append(MetricsRecord(1, 0.5, 0.6, 1.0, 2.0, 1.0, 100))
    with pytest.raises(ValueError):
        log.append(MetricsRecord(1, 0.5, 0.6, 1.0, 2.0, 1.0, 100))
    log.append(MetricsRecord(3, 0.1 + 0.2, 0.6, 1.0, 2.0, 1.0, 200))
    log.to_csv(tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
    back = MetricsLog.from_csv(tmp_path / "m.csv")
    assert [r.row() for r in back.records] == [r.row() for r in log.records]
    (tmp_path / "bad.csv").write_text("round,acc\n1,0.5\n")
    with pytest.raises(ValueError, match="schema"):
        MetricsLog.from_csv(tmp_path / "bad.csv")


def test_logged_values_are_sane():
    res = run_training(tiny_config(T=4))
    for r in res.log.records:
        assert 0 <= r.global_test_acc <= 1 and 0 <= r.mean_personal_acc <= 1
        assert 0 <= r.sparsity_w <= 1 and r.objective_est > 0
    assert sum(res.round_bits) == res.log.records[-1].cumulative_bits == res.acct.cumulative_bits


def test_mlr_objective_trend():
    res = run_training(tiny_mlr_config(T=30))
    obj = res.log.column("objective_est")
    assert obj[-5:].mean() < obj[:5].mean()

import json

import numpy as np
import pytest

from fedhier.cli import compare_runs, main, read_model, run_experiment
from fedhier.config import PRESETS, ExperimentConfig, effective_hyperparams, get_preset
from fedhier.errors import ConfigError
from fedhier.federation import CSV_COLUMNS
from conftest import tiny_config


def write_cfg(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(cfg.to_json())
    return path


def test_config_json_roundtrip(tmp_path):
    cfg = tiny_config()
    back = ExperimentConfig.from_json(write_cfg(tmp_path, cfg))
    assert back.to_dict() == cfg.to_dict() and back.digest() == cfg.digest()


def test_digest_ignores_seed_and_output():
    a, b = tiny_config(), tiny_config()
    b.master_seed, b.output_dir = 9, "elsewhere"
    assert a.digest() == b.digest()
    b.hyperparams = b.hyperparams.__class__(**{**b.hyperparams.__dict__, "lambda1": 3.0})
    assert a.digest() != b.digest()


def test_validation_lists_every_problem():
    raw = {"algorithm": "sgd", "prox_center": "nowhere", "hyperparams": {"lambda1": -1, "K": 0},
           "bogus": 1, "partition": {"num_clients": 3, "labels_per_client": 2, "train_per_class": 5,
                                     "test_per_class": 5}}
    with pytest.raises(ConfigError) as e:
        ExperimentConfig.from_dict(raw)
    text = str(e.value)
    for needle in ("algorithm", "prox_center", "lambda1", "hyperparams.K", "unknown key bogus"):
        assert needle in text


def test_all_presets_validate():
    for name in PRESETS:
        cfg = get_preset(name)
        assert cfg.validate() == [], name
    with pytest.raises(ConfigError):
        get_preset("nope")


def test_setting1_preset_hyperparameters():
    cfg = get_preset("mnist-sfedhp-setting1")
    hp = cfg.hyperparams
    assert (hp.N, hp.J, hp.T, cfg.partition.num_clients) == (4, 5, 800, 20)
    assert cfg.model.preset == "paper-count"


def test_client_cloud_scaling():
    hp = effective_hyperparams(get_preset("mnist-fedavg-setting1"))
    assert (hp.N, hp.J, hp.S) == (20, 1, 20)
    assert effective_hyperparams(get_preset("mnist-hierfavg-setting1")).N == 4


def test_preset_merge(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"preset": "synthetic-smoke", "hyperparams": {"T": 2}}))
    cfg = ExperimentConfig.from_json(path)
    assert cfg.hyperparams.T == 2 and cfg.hyperparams.R == get_preset("synthetic-smoke").hyperparams.R


def test_run_writes_all_artifacts(tmp_path):
    cfg = tiny_config(T=2)
    cfg.save_client_models = True
    out = tmp_path / "run"
    assert main(["run", "--config", str(write_cfg(tmp_path, cfg)), "--out", str(out)]) == 0
    names = {p.name for p in out.iterdir()}
    assert {"config.resolved.json", "metrics.csv", "theory_report.json", "final_models"} <= names
    w = read_model(out / "final_models" / "global")
    assert w.dtype == np.float64 and w.size == json.loads((out / "final_models" / "global.json").read_text())["shape"][0]
    assert (out / "final_models" / "client_000.f64").exists()
    resolved = ExperimentConfig.from_json(out / "config.resolved.json")
    assert resolved.output_dir == str(out)
    json.loads((out / "theory_report.json").read_text())  # strict JSON, no NaN tokens


def test_zero_rounds_header_only(tmp_path):
    out = tmp_path / "r0"
    assert main(["--config", str(write_cfg(tmp_path, tiny_config(T=0))), "--out", str(out)]) == 0
    assert (out / "metrics.csv").read_text() == ",".join(CSV_COLUMNS) + "\n"


def test_malformed_config_leaves_nothing(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"algorithm": "sfedhp", "hyperparams": {"T": "many"}')
    out = tmp_path / "never"
    assert main(["run", "--config", str(bad), "--out", str(out)]) != 0
    bad.write_text(json.dumps({"hyperparams": {"lambda1": 0}, "workers": 0}))
    assert main(["run", "--config", str(bad), "--out", str(out)]) != 0
    err = capsys.readouterr().err
    assert "lambda1" in err and "workers" in err
    assert not out.exists() and [p.name for p in tmp_path.iterdir()] == ["bad.json"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path, capsys):
    cfg = tiny_config(T=3, eta1=50.0, lambda1=1e4, lambda2=1e4)
    out = tmp_path / "div"
    assert main(["run", "--config", str(write_cfg(tmp_path, cfg)), "--out", str(out)]) == 4
    assert "global round" in capsys.readouterr().err
    assert not out.exists()


def test_missing_dataset_exit_code(tmp_path, monkeypatch):
    monkeypatch.delenv("FEDHIER_DATA_DIR", raising=False)
    cfg = tiny_config(T=1)
    cfg.dataset.name, cfg.dataset.root = "mnist", str(tmp_path)
    assert main(["run", "--config", str(write_cfg(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == 3


def test_flag_overrides(tmp_path):
    out = tmp_path / "o"
    args = ["run", "--config", str(write_cfg(tmp_path, tiny_config(T=5))), "--out", str(out), "--rounds", "1",
            "--seed", "4", "--algo", "hierfavg", "--prox-center", "client", "--gamma-trigger", "both",
            "--faithful-sampling", "--workers", "2"]
    assert main(args) == 0
    cfg = json.loads((out / "config.resolved.json").read_text())
    assert cfg["hyperparams"]["T"] == 1 and cfg["master_seed"] == 4 and cfg["partition"]["seed"] == 4
    assert cfg["algorithm"] == "hierfavg" and cfg["prox_center"] == "client" and cfg["workers"] == 2
    assert cfg["gamma_schedule"]["trigger"] == "both" and cfg["faithful_sampling"]


def test_refuses_to_clobber_foreign_directory(tmp_path):
    out = tmp_path / "keep"
    out.mkdir()
    (out / "precious.txt").write_text("x")
    cfg = tiny_config(T=1)
    cfg.output_dir = str(out)
    with pytest.raises(ConfigError):
        run_experiment(cfg)
    assert (out / "precious.txt").exists()


def _runs(tmp_path, seeds, algo="sfedhp"):
    dirs = []
    for s in seeds:
        cfg = tiny_config(algo, T=2)
        cfg.master_seed = s
        cfg.output_dir = str(tmp_path / f"{algo}-{s}")
        dirs.append(str(run_experiment(cfg)))
    return dirs


def test_compare_same_run_twice(tmp_path):
    (d,) = _runs(tmp_path, [0])
    rows, summary = compare_runs([d, d])
    assert rows[1]["diff_vs_first"] == 0.0 and summary[0]["n"] == 2 and summary[0]["std"] == 0.0


def test_compare_groups_seeds(tmp_path, capsys):
    dirs = _runs(tmp_path, [0, 1, 2])
    rows, summary = compare_runs(dirs, "objective_est")
    assert len(summary) == 1 and summary[0]["n"] == 3
    finals = [r["final"] for r in rows]
    assert summary[0]["mean"] == pytest.approx(np.mean(finals))
    assert summary[0]["std"] == pytest.approx(np.std(finals, ddof=1))
    assert all(r["best"] <= r["final"] for r in rows)
    csv_path = tmp_path / "cmp.csv"
    assert main(["compare", *dirs, "--metric", "objective_est", "--csv", str(csv_path)]) == 0
    assert "mean" in capsys.readouterr().out and csv_path.read_text().startswith("run,")


def test_compare_rejects_incompatible(tmp_path):
    (d,) = _runs(tmp_path, [0])
    other = tmp_path / "other"
    other.mkdir()
    (other / "metrics.csv").write_text("round,accuracy\n1,0.5\n")
    with pytest.raises(ConfigError, match="schema"):
        compare_runs([d, str(other)])
    assert main(["compare", d, str(other)]) == 2
    with pytest.raises(ConfigError):
        compare_runs([d])


def test_presets_listing(capsys):
    assert main(["presets"]) == 0
    assert "mnist-sfedhp-setting1" in capsys.readouterr().out

"""Experiment configuration: JSON schema, validation, named presets and run setup."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .comms import CommsAccount, GammaSchedule
from .core_math import DEFAULT_EPS_ZERO
from .data import LabeledDataset, PartitionSpec, load_mnist_like, partition_noniid, synthetic_digits
from .errors import ConfigError
from .federation import ALGORITHMS, CLIENT_CLOUD, HyperParams, build_federation
from .models import MLP, MLR, Batch, ModelSpec, NeuralModel, init_params, preset

SCHEMA_VERSION = 1
DATASETS = ("mnist", "fmnist", "synthetic")


@dataclass
class ModelConfig:
    preset: str | None = "paper-count"
    kind: str | None = None
    hidden_dims: list | None = None
    l2_reg: float | None = None

    def spec(self, input_dim: int, num_classes: int) -> ModelSpec:
        if self.preset:
            base = preset(self.preset)
        else:
            base = ModelSpec(self.kind or MLP, input_dim, tuple(self.hidden_dims or ()), num_classes)
        return ModelSpec(
            base.kind, input_dim,
            tuple(self.hidden_dims) if self.hidden_dims is not None else base.hidden_dims,
            num_classes,
            self.l2_reg if self.l2_reg is not None else base.l2_reg,
        )


@dataclass
class DatasetConfig:
    name: str = "mnist"
    root: str | None = None
    synthetic_per_class: int = 1000
    synthetic_seed: int = 0


@dataclass
class GammaScheduleConfig:
    enabled: bool = False
    gamma_init: float = 0.001
    gamma_tiny: float = 1e-5
    sparsity_target: float = 0.2
    switch_round: int = 100
    trigger: str = "either"

    def build(self) -> GammaSchedule | None:
        if not self.enabled:
            return None
        return GammaSchedule(self.gamma_init, self.gamma_tiny, self.sparsity_target,
                             self.switch_round, self.trigger)


@dataclass
class CommsConfig:
    bits_per_nonzero: int = 64
    bits_per_zero: int = 1
    location_bits_per_param: int = 1
    eps_zero: float = DEFAULT_EPS_ZERO
    sparse_coding: bool = False
    count_client_edge: bool = False
    threshold_state: bool = False


@dataclass
class ExperimentConfig:
    algorithm: str = "sfedhp"
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionSpec = field(default_factory=lambda: PartitionSpec(20, 2, 200, 800, 0))
    hyperparams: HyperParams = field(default_factory=HyperParams)
    inner_eta: float | None = None
    gamma_schedule: GammaScheduleConfig = field(default_factory=GammaScheduleConfig)
    comms: CommsConfig = field(default_factory=CommsConfig)
    master_seed: int = 0
    output_dir: str = "runs/default"
    eval_every: int | None = None
    eval_samples: int = 100
    objective_steps: int = 5
    workers: int = 1
    faithful_sampling: bool = False
    prox_center: str = "edge"
    save_client_models: bool = False
    record_wall_time: bool = False
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        """Hash of everything except seed and output location; groups seeds of one config."""
        d = self.to_dict()
        d.pop("master_seed")
        d.pop("output_dir")
        d["partition"].pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> list[str]:
        p = []
        if self.algorithm not in ALGORITHMS:
            p.append(f"algorithm must be one of {ALGORITHMS} (got {self.algorithm!r})")
        if self.dataset.name not in DATASETS:
            p.append(f"dataset.name must be one of {DATASETS} (got {self.dataset.name!r})")
        p += self.hyperparams.validate()
        p += self.partition.validate()
        hp = self.hyperparams
        if isinstance(hp.N, int) and isinstance(hp.J, int) and self.partition.num_clients != hp.N * hp.J:
            p.append(f"partition.num_clients ({self.partition.num_clients}) must equal N*J ({hp.N * hp.J})")
        if self.prox_center not in ("edge", "client"):
            p.append(f"prox_center must be 'edge' or 'client' (got {self.prox_center!r})")
        if self.gamma_schedule.trigger not in ("either", "both"):
            p.append(f"gamma_schedule.trigger must be 'either' or 'both' (got {self.gamma_schedule.trigger!r})")
        if not self.comms.eps_zero > 0:
            p.append("comms.eps_zero must be positive")
        if self.schema_version != SCHEMA_VERSION:
            p.append(f"schema_version {self.schema_version!r} is not supported (expected {SCHEMA_VERSION})")
        if self.workers < 1:
            p.append("workers must be >= 1")
        if self.eval_every is not None and self.eval_every < 1:
            p.append("eval_every must be >= 1")
        if self.eval_samples < 1:
            p.append("eval_samples must be >= 1")
        if self.inner_eta is not None and not self.inner_eta > 0:
            p.append("inner_eta must be positive")
        if self.model.preset is None and self.model.kind not in (MLR, MLP):
            p.append("model.kind must be MLR or MLP when no preset is given")
        elif self.model.preset is not None:
            try:
                preset(self.model.preset)
            except ValueError as exc:
                p.append(f"model.preset: {exc}")
        return p

    def check(self):
        problems = self.validate()
        if problems:
            raise ConfigError(problems)
        return self

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        problems = []
        cfg = _build(cls, raw, "", problems)
        try:
            problems += cfg.validate()
        except TypeError as exc:  # wrongly typed values that slipped past _build
            problems.append(str(exc))
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        if "preset" in raw:
            base = get_preset(raw.pop("preset")).to_dict()
            raw = _merge(base, raw)
        return cls.from_dict(raw)

    def load_dataset(self) -> LabeledDataset:
        if self.dataset.name == "synthetic":
            return synthetic_digits(self.dataset.synthetic_per_class, seed=self.dataset.synthetic_seed)
        return load_mnist_like(self.dataset.name, self.dataset.root)


_NESTED = {
    "model": ModelConfig,
    "dataset": DatasetConfig,
    "partition": PartitionSpec,
    "hyperparams": HyperParams,
    "gamma_schedule": GammaScheduleConfig,
    "comms": CommsConfig,
}


def _build(cls, raw, prefix, problems):
    if not isinstance(raw, dict):
        problems.append(f"{prefix or 'config'} must be an object")
        return cls()
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in names:
            problems.append(f"unknown key {prefix}{key}")
            continue
        if cls is ExperimentConfig and key in _NESTED:
            kwargs[key] = _build(_NESTED[key], value, f"{key}.", problems)
            continue
        default = names[key].default
        if isinstance(default, bool) and not isinstance(value, bool):
            problems.append(f"{prefix}{key} must be true or false")
            continue
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float) and value.is_integer():
            value = int(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{prefix or 'config'}: {exc}")
        return cls()


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


# -- presets ----------------------------------------------------------------------

def _setting1(algorithm: str, dataset: str = "mnist") -> ExperimentConfig:
    hp = HyperParams(lambda1=20.0, lambda2=20.0, T=800, R=20, K=5, batch_size=20, N=4, J=5, S=4, beta=1.0)
    return ExperimentConfig(
        algorithm=algorithm,
        model=ModelConfig("paper-count"),
        dataset=DatasetConfig(dataset),
        partition=PartitionSpec(20, 2, 200, 800, 0),
        hyperparams=hp,
        output_dir=f"runs/{dataset}-{algorithm}-setting1",
    )


def _fig_split(algorithm="sfedhp", model="paper-count") -> ExperimentConfig:
    hp = HyperParams(lambda1=25.0, lambda2=25.0, T=800, R=20, K=5, batch_size=20, N=2, J=10, S=1)
    return ExperimentConfig(
        algorithm=algorithm,
        model=ModelConfig(model),
        dataset=DatasetConfig("mnist"),
        partition=PartitionSpec(20, 2, 300, 100, 0, size_jitter=0.25),
        hyperparams=hp,
    )


def _build_presets():
    p = {}
    for algo in ("sfedhp", "hierfavg", "fedavg", "fedprox", "pfedme"):
        p[f"mnist-{algo}-setting1"] = lambda a=algo: _setting1(a)
        p[f"fmnist-{algo}-setting1"] = lambda a=algo: _setting1(a, "fmnist")

    def mlr():
        c = _fig_split(model="mlr")
        c.hyperparams = dataclasses.replace(c.hyperparams, T=200)
        c.output_dir = "runs/mnist-mlr-strongcvx"
        return c

    def sparse():
        c = _fig_split()
        c.hyperparams = dataclasses.replace(c.hyperparams, rho=6e-5, T=300)
        c.gamma_schedule = GammaScheduleConfig(enabled=True)
        c.comms = CommsConfig(sparse_coding=True)
        c.output_dir = "runs/mnist-sparse-fig6"
        return c

    def dense():
        c = _fig_split()
        c.hyperparams = dataclasses.replace(c.hyperparams, T=300)
        c.output_dir = "runs/mnist-dense-fig6"
        return c

    def smoke():
        hp = HyperParams(lambda1=20.0, lambda2=20.0, T=20, R=5, K=5, batch_size=20, N=2, J=5, S=2)
        return ExperimentConfig(
            algorithm="sfedhp",
            model=ModelConfig(None, MLP, [32]),
            dataset=DatasetConfig("synthetic", synthetic_per_class=300),
            partition=PartitionSpec(10, 2, 60, 40, 0),
            hyperparams=hp,
            output_dir="runs/synthetic-smoke",
        )

    p["mnist-mlr-strongcvx"] = mlr
    p["mnist-sparse-fig6"] = sparse
    p["mnist-dense-fig6"] = dense
    p["synthetic-smoke"] = smoke
    return p


PRESETS = _build_presets()


def get_preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}") from None


# -- run setup ----------------------------------------------------------------------

@dataclass
class RunSetup:
    cloud: object
    hp: HyperParams
    model: NeuralModel
    acct: CommsAccount
    gamma_schedule: GammaSchedule | None
    global_test: Batch
    shards: list


def effective_hyperparams(cfg: ExperimentConfig) -> HyperParams:
    """Client-cloud algorithms see every client as its own edge; S*J clients report per round."""
    hp = cfg.hyperparams
    if cfg.algorithm in CLIENT_CLOUD:
        return dataclasses.replace(hp, N=hp.N * hp.J, J=1, S=hp.S * hp.J)
    return hp


def build_run(cfg: ExperimentConfig, dataset: LabeledDataset | None = None) -> RunSetup:
    cfg.check()
    data = dataset if dataset is not None else cfg.load_dataset()
    spec = cfg.model.spec(data.input_dim, data.num_classes)
    model = NeuralModel(spec)
    shards = partition_noniid(data, cfg.partition)
    hp = effective_hyperparams(cfg)
    hp.check()
    w0 = init_params(spec, np.random.default_rng([cfg.master_seed, 2]))
    cloud = build_federation(model, shards, hp, w0, cfg.master_seed, cfg.eval_samples)
    tests = [s.test for s in shards if len(s.test)]
    global_test = Batch(
        np.concatenate([b.features for b in tests]) if tests else np.zeros((0, data.input_dim)),
        np.concatenate([b.labels for b in tests]) if tests else np.zeros(0, dtype=np.int64),
    )
    acct = CommsAccount(cfg.comms.bits_per_nonzero, cfg.comms.bits_per_zero, cfg.comms.location_bits_per_param)
    return RunSetup(cloud, hp, model, acct, cfg.gamma_schedule.build(), global_test, shards)

"""Experiment configuration, the end-to-end driver, test-time evaluation and
metrics files.

A run directory holds ``metrics.csv`` (one row per round, written as the run
progresses), ``config.json`` (the resolved configuration) and
``summary.json`` (final and best accuracy).
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ClientData, Dataset, PartitionSpec, load_dataset, partition, synth_blobs
from .errors import ConfigurationError, NonFiniteError
from .federation import LocalSetup, RoundConfig, ServerState, run_round
from .numerics import NetworkConfig, OptimizerConfig, ParameterSet, forward, init_params
from .protonet import PrototypeSet, SslHyperparams, build_prototypes, class_probabilities

log = logging.getLogger(__name__)

CSV_HEADER = ["round", "test_acc", "labeled_loss", "unlabeled_loss", "cum_flops", "cum_bytes", "seconds"]

_DATA_TAG, _TEST_TAG, _PARTITION_TAG, _INIT_TAG = 101, 102, 103, 104


@dataclass
class DataConfig:
    """Synthetic blobs by default; set ``train_manifest`` to load from disk."""

    n_classes: int = 4
    dim: int = 16
    separation: float = 4.0
    cluster_std: float = 1.0
    nuisance_std: float = 4.0
    test_size: int = 2000
    train_manifest: str | None = None
    test_manifest: str | None = None


@dataclass
class NetworkSection:
    hidden_dims: list[int] = field(default_factory=lambda: [64])
    embedding_dim: int = 16
    use_batch_norm: bool = True


@dataclass
class PartitionSection:
    n_clients: int = 20
    labeled_per_class: int = 2
    unlabeled_per_client: int = 100
    distribution: str = "dirichlet"
    alpha: float = 0.5


@dataclass
class RoundSection:
    active_per_round: int = 5
    helper_count: int = 5
    helper_update_interval: int = 1
    local_epochs: int = 5
    total_rounds: int = 60
    noise_sigma: float = 0.0
    client_mode: str = "protofssl"
    aggregation: str = "fedavg"
    workers: int = 1


@dataclass
class SslSection:
    temperature: float = 0.5
    unlabeled_weight: float = 0.3
    n_support: int = 1
    n_query_labeled: int = 1
    n_query_unlabeled: int = 100
    metric: str = "sqeuclidean"


@dataclass
class OptimizerSection:
    learning_rate: float = 3e-3
    rms_decay: float = 0.9
    rms_epsilon: float = 1e-7
    l2_coefficient: float = 1e-4
    prox_mu: float = 0.0


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    eval_every: int = 1
    record_wall_clock: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkSection = field(default_factory=NetworkSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    rounds: RoundSection = field(default_factory=RoundSection)
    ssl: SslSection = field(default_factory=SslSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        cfg = cls()
        apply_overrides(cfg, _flatten(raw))
        return cfg

    def validate(self):
        """Build every component config once so bad values fail early."""
        self.round_config()
        self.local_setup(self.data.dim)
        self.partition_spec()
        if self.eval_every < 1:
            raise ConfigurationError("eval_every: must be >= 1")
        if self.data.n_classes < 2 or self.data.dim < 1 or self.data.test_size < 1:
            raise ConfigurationError("data: need n_classes >= 2, dim >= 1, test_size >= 1")
        need = self.ssl.n_support + self.ssl.n_query_labeled
        if self.partition.labeled_per_class < need:
            raise ConfigurationError(
                f"partition.labeled_per_class: {self.partition.labeled_per_class} < "
                f"n_support + n_query_labeled = {need}")
        return self

    def round_config(self) -> RoundConfig:
        return RoundConfig(total_clients=self.partition.n_clients, **dataclasses.asdict(self.rounds))

    def local_setup(self, input_dim: int) -> LocalSetup:
        net = NetworkConfig(input_dim=input_dim, **dataclasses.asdict(self.network))
        return LocalSetup(net, OptimizerConfig(**dataclasses.asdict(self.optimizer)),
                          SslHyperparams(**dataclasses.asdict(self.ssl)), self.rounds.local_epochs)

    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(seed=_subseed(self.seed, _PARTITION_TAG), **dataclasses.asdict(self.partition))


def _subseed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def _flatten(raw: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in raw.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(value, current, key):
    if isinstance(value, str) and not isinstance(current, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError as exc:
            if current is None:
                return value
            raise ConfigurationError(f"{key}: cannot parse {value!r}") from exc
    if current is None or value is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigurationError(f"{key}: expected a list, got {value!r}")
        return value
    if isinstance(current, str) and not isinstance(value, str):
        raise ConfigurationError(f"{key}: expected a string, got {value!r}")
    return value


def apply_overrides(cfg: ExperimentConfig, flat: dict) -> ExperimentConfig:
    """Set dotted keys such as ``rounds.helper_count`` on ``cfg`` in place."""
    for key, value in flat.items():
        parts = key.split(".")
        target = cfg
        for part in parts[:-1]:
            if not dataclasses.is_dataclass(target) or not hasattr(target, part):
                raise ConfigurationError(f"{key}: unknown configuration key")
            target = getattr(target, part)
        leaf = parts[-1]
        names = {f.name for f in dataclasses.fields(target)} if dataclasses.is_dataclass(target) else set()
        if leaf not in names or dataclasses.is_dataclass(getattr(target, leaf)):
            raise ConfigurationError(f"{key}: unknown configuration key")
        setattr(target, leaf, _coerce(value, getattr(target, leaf), key))
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"{path}: cannot read config ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: config must be a JSON object")
    return ExperimentConfig.from_dict(raw)


@dataclass
class RoundRecord:
    round: int
    test_acc: float | None
    labeled_loss: float
    unlabeled_loss: float
    cum_flops: float
    cum_bytes: float
    seconds: float

    def to_row(self) -> list[str]:
        acc = "" if self.test_acc is None else repr(float(self.test_acc))
        return [str(self.round), acc, repr(float(self.labeled_loss)), repr(float(self.unlabeled_loss)),
                repr(float(self.cum_flops)), repr(float(self.cum_bytes)), repr(float(self.seconds))]

    @classmethod
    def from_row(cls, row: dict) -> "RoundRecord":
        return cls(int(row["round"]), float(row["test_acc"]) if row["test_acc"] else None,
                   float(row["labeled_loss"]), float(row["unlabeled_loss"]),
                   float(row["cum_flops"]), float(row["cum_bytes"]), float(row["seconds"]))


def read_metrics(path) -> list[RoundRecord]:
    with open(path, newline="") as fh:
        return [RoundRecord.from_row(row) for row in csv.DictReader(fh)]


def global_prototypes(prototype_store) -> PrototypeSet:
    """Class-wise mean of stored prototypes weighted by each owner's labeled count."""
    stores = [prototype_store[c] for c in sorted(prototype_store)]
    if not stores:
        raise ValueError("prototype store is empty")
    n_classes = stores[0].n_classes
    vectors, counts = {}, {}
    for k in range(n_classes):
        rows = [(p.vectors[k], p.counts.get(k, 1)) for p in stores if k in p.vectors]
        if not rows:
            continue
        w = np.array([c for _, c in rows], dtype=np.float64)
        vectors[k] = (np.stack([v for v, _ in rows]) * (w / w.sum())[:, None]).sum(axis=0)
        counts[k] = int(w.sum())
    return PrototypeSet(-1, 0, n_classes, vectors, counts)


def evaluate(params: ParameterSet, prototype_store, test: Dataset, network: NetworkConfig,
             metric: str = "sqeuclidean") -> float:
    """Accuracy of nearest-global-prototype classification on ``test``."""
    protos = global_prototypes(prototype_store)
    missing = sorted(set(range(test.n_classes)) - protos.class_present)
    if missing:
        log.warning("no stored prototype for classes %s; their test samples count as errors", missing)
    emb = forward(params, network, test.features, training=False)
    params.cache = None
    probs = class_probabilities(emb, protos, metric)
    pred = probs.argmax(axis=1)
    return float(np.mean(pred == test.labels))


def prototype_scale(prototype_store) -> float:
    """Root-mean-square coordinate over every stored prototype."""
    rows = [v for c in sorted(prototype_store) for _, v in sorted(prototype_store[c].vectors.items())]
    return float(np.sqrt(np.mean(np.square(np.stack(rows))))) if rows else 0.0


@dataclass
class Environment:
    """Everything a run needs that is derived deterministically from the config."""

    clients: list[ClientData]
    client_datasets: list
    test: Dataset
    setup: LocalSetup
    round_cfg: RoundConfig
    init_params: ParameterSet


def build_environment(cfg: ExperimentConfig) -> Environment:
    d = cfg.data
    if d.train_manifest:
        train = load_dataset(d.train_manifest)
        if not d.test_manifest:
            raise ConfigurationError("data.test_manifest: required when data.train_manifest is set")
        test = load_dataset(d.test_manifest)
    else:
        p = cfg.partition
        per_class = p.n_clients * (p.labeled_per_class + p.unlabeled_per_client)
        n_train = d.n_classes * (per_class + per_class // 5 + 10)
        full = synth_blobs(d.n_classes, n_train + d.test_size, d.dim, d.separation,
                           seed=_subseed(cfg.seed, _DATA_TAG), cluster_std=d.cluster_std,
                           nuisance_std=d.nuisance_std)
        train = Dataset(full.features[:n_train], full.labels[:n_train], d.n_classes)
        test = Dataset(full.features[n_train:], full.labels[n_train:], d.n_classes)
    setup = cfg.local_setup(train.dim)
    parts = partition(train, cfg.partition_spec())
    params = init_params(setup.network, seed=_subseed(cfg.seed, _INIT_TAG))
    return Environment([c.training_view() for c in parts], parts, test, setup,
                       cfg.round_config(), params)


def _bootstrap_store(env: Environment, params: ParameterSet) -> dict:
    store = {}
    for c in env.clients:
        classes = [k for k in sorted(c.labeled) if len(c.labeled[k])]
        x = np.concatenate([c.labeled[k] for k in classes])
        y = np.concatenate([[k] * len(c.labeled[k]) for k in classes])
        emb = forward(params, env.setup.network, x, training=False)
        params.cache = None
        if not np.all(np.isfinite(emb)):
            raise NonFiniteError("non-finite embeddings before the first round", round=0)
        store[c.client_id] = build_prototypes(emb, y, c.n_classes, owner_id=c.client_id, round=0)
    return store


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> list[RoundRecord]:
    """Run all rounds; when ``write`` is set, stream records into ``cfg.out_dir``."""
    cfg.validate()
    env = build_environment(cfg)
    server = ServerState(global_params=env.init_params.copy(), seed=cfg.seed)
    out = Path(cfg.out_dir)
    writer = fh = None
    if write:
        out.mkdir(parents=True, exist_ok=True)
        resolved = cfg.to_dict()
        resolved.pop("out_dir")
        (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)

    records = []
    start = time.perf_counter()

    def emit(rec):
        records.append(rec)
        if writer:
            writer.writerow(rec.to_row())
            fh.flush()

    metric = cfg.ssl.metric
    try:
        acc0 = evaluate(server.global_params, _bootstrap_store(env, server.global_params), env.test,
                        env.setup.network, metric)
        emit(RoundRecord(0, acc0, 0.0, 0.0, 0.0, 0.0, 0.0))
        cum_flops = cum_bytes = 0.0
        for r in range(1, env.round_cfg.total_rounds + 1):
            res = run_round(server, env.clients, env.round_cfg, env.setup)
            cum_flops += res.flops
            cum_bytes += res.bytes
            due = r % cfg.eval_every == 0 or r == env.round_cfg.total_rounds
            acc = evaluate(server.global_params, server.prototype_store, env.test,
                           env.setup.network, metric) if due else None
            secs = time.perf_counter() - start if cfg.record_wall_clock else 0.0
            emit(RoundRecord(r, acc, res.labeled_loss, res.unlabeled_loss, cum_flops, cum_bytes, secs))
            log.info("round %d acc=%s labeled=%.4f unlabeled=%.4f", r, acc, res.labeled_loss,
                     res.unlabeled_loss)
    finally:
        if fh:
            fh.close()

    if write:
        evaluated = [r for r in records if r.test_acc is not None]
        best = max(evaluated, key=lambda r: (r.test_acc, -r.round))
        summary = {"final_round": records[-1].round, "final_acc": evaluated[-1].test_acc,
                   "best_round": best.round, "best_acc": best.test_acc,
                   "prototype_rms": prototype_scale(server.prototype_store)}
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return records


def final_accuracy(records) -> float:
    return [r.test_acc for r in records if r.test_acc is not None][-1]

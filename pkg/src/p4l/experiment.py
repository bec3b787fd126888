"""Experiment configuration, population setup, baselines and the HE benchmark."""
from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import logging
import random
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import he
from .adversary import AttackConfig, ByzantinePopulation, make_byzantine_population
from .envelope import make_address
from .learning import (
    TASKS,
    Architecture,
    ModelParams,
    PeerDataset,
    Task,
    TrainConfig,
    centralized_baseline,
    evaluate,
    fl_baseline,
    init_model,
    local_train,
    make_task,
    partition_data,
)
from .peer import Learner, Peer, ProtocolConfig
from .sim import MetricsTable, SimConfig, peer_weights, py_stream, run_simulation, stream

logger = logging.getLogger(__name__)

PARTITIONS = ("iid", "label_skew", "size_skew")
BASELINES = ("centralized", "fl", "alone")
_SECTIONS = {"sim": SimConfig, "train": TrainConfig, "protocol": ProtocolConfig, "attack": AttackConfig}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "blobs"
    partition: str = "label_skew"
    classes_per_peer: int = 6
    samples_per_peer: int = 50
    acceptance_metric: str | None = None  # None: the task's default
    validation_fraction: float = 0.0  # share of each shard held out for the acceptance test
    encryption_enabled: bool = True
    baselines: tuple[str, ...] = ("centralized", "fl", "alone")
    fl_rounds: int = 50
    fl_participants: int | None = None
    seeds: tuple[int, ...] = (0,)
    output: str = "results"
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task id {self.task!r}; choose from {sorted(TASKS)}")
        if self.partition not in PARTITIONS:
            raise ConfigError(f"unknown partition {self.partition!r}")
        unknown = set(self.baselines) - set(BASELINES)
        if unknown:
            raise ConfigError(f"unknown baselines {sorted(unknown)}")
        if self.acceptance_metric not in (None, "accuracy", "auc", "loss"):
            raise ConfigError(f"unknown acceptance metric {self.acceptance_metric!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    # ------------------------------------------------------------ flat form

    def to_flat(self) -> dict:
        flat = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name in _SECTIONS:
                flat.update(dataclasses.asdict(v))
            else:
                flat[f.name] = list(v) if isinstance(v, tuple) else v
        flat.pop("seed", None)
        return flat

    @property
    def config_hash(self) -> str:
        flat = self.to_flat()
        flat.pop("seeds")
        flat.pop("output")
        blob = json.dumps(flat, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @classmethod
    def from_flat(cls, flat: dict) -> "ExperimentConfig":
        top = {f.name for f in dataclasses.fields(cls)} - set(_SECTIONS)
        sections: dict[str, dict] = {k: {} for k in _SECTIONS}
        owners = {f.name: name for name, kls in _SECTIONS.items() for f in dataclasses.fields(kls)}
        kwargs: dict[str, Any] = {}
        for key, value in flat.items():
            if key in top:
                kwargs[key] = tuple(value) if key in ("seeds", "baselines") else value
            elif key in owners and key != "seed":
                sections[owners[key]][key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            for name, kls in _SECTIONS.items():
                kwargs[name] = kls(**sections[name])
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        flat = self.to_flat()
        flat.update(overrides)
        return ExperimentConfig.from_flat(flat)

    def sim_for(self, seed: int) -> SimConfig:
        return replace(self.sim, seed=seed)

    @property
    def metric(self) -> str:
        if self.acceptance_metric is not None:
            return self.acceptance_metric
        return "auc" if self.task == "imbalanced" else "accuracy"


def load_config(path: str | Path, overrides: dict | None = None) -> list[ExperimentConfig]:
    """Read a JSON config; a ``grid`` key maps config keys to value lists."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return expand_grid(raw, overrides)


def expand_grid(raw: dict, overrides: dict | None = None) -> list[ExperimentConfig]:
    raw = dict(raw)
    grid = raw.pop("grid", {}) or {}
    raw.update(overrides or {})
    keys = sorted(grid)
    cells = []
    for values in itertools.product(*(grid[k] for k in keys)):
        flat = dict(raw, **dict(zip(keys, values)))
        cells.append(ExperimentConfig.from_flat(flat))
    return cells


# --------------------------------------------------------------------------
# population


@dataclass
class Prepared:
    task: Task
    shards: list[PeerDataset]
    initial: ModelParams
    byzantine: ByzantinePopulation
    selection_weights: np.ndarray


def task_size_for(experiment: ExperimentConfig, num_peers: int) -> dict:
    need = experiment.samples_per_peer * num_peers
    if experiment.task == "blobs":
        # label-skew draws classes unevenly, so keep slack in every class pool
        return {"n_train": max(12000, 3 * need)}
    return {"n_train": max(20000, need)}


def prepare(experiment: ExperimentConfig, sim: SimConfig) -> Prepared:
    """Data, shards, Byzantine subset and selection weights for one seed."""
    seed = sim.seed
    task = make_task(experiment.task, stream(seed, "task"), **task_size_for(experiment, sim.num_peers))
    shards = partition_data(
        task.train, sim.num_peers, experiment.partition, stream(seed, "partition"),
        classes_per_peer=experiment.classes_per_peer,
        samples_per_peer=experiment.samples_per_peer,
        power_law_a=sim.power_law_a,
    )
    adv_rng = stream(seed, "adversary")
    byz = make_byzantine_population(
        sim.num_peers, experiment.attack.byzantine_fraction, experiment.attack, adv_rng
    )
    if byz.poisons_data:
        shards = [byz.poison_dataset(s, adv_rng) if byz.is_byzantine(i) else s
                  for i, s in enumerate(shards)]
    initial = init_model(task.arch, stream(seed, "init"), task.task_id)
    weights = peer_weights(sim, stream(seed, "selection"))
    return Prepared(task, shards, initial, byz, weights)


def build_peers(experiment: ExperimentConfig, sim: SimConfig, prepared: Prepared) -> list[Peer]:
    """Peers with keys, the shared initial model and the training/evaluation hooks."""
    seed = sim.seed
    crypto = py_stream(seed, "crypto")
    peer_seeds = np.random.SeedSequence(seed, spawn_key=(7,)).spawn(sim.num_peers)
    cfg, test, arch = experiment.train, prepared.task.test, prepared.task.arch
    byz = prepared.byzantine
    peers = []
    for i in range(sim.num_peers):
        nav, train_seq, adv_seq = peer_seeds[i].spawn(3)
        train_rng = np.random.default_rng(train_seq)
        crypto_rng = random.Random(crypto.getrandbits(64))
        keypair = he.keygen(sim.key_bits, crypto_rng, unsafe=True) if experiment.encryption_enabled else None
        shard, val = prepared.shards[i], None
        if experiment.validation_fraction > 0 and shard.k >= 2:
            order = np.random.default_rng(adv_seq.spawn(1)[0]).permutation(shard.k)
            cut = max(1, int(round(experiment.validation_fraction * shard.k)))
            shard, val = shard.subset(order[cut:]), shard.subset(order[:cut])
        learner = Learner(prepared.initial.copy(), shard, experiment.metric, validation=val)
        noisy = None
        if byz.poisons_weights and byz.is_byzantine(i):
            noisy = np.random.default_rng(adv_seq)
        learner.contribution_hook = _contribution_hook(learner, cfg, train_rng, byz, arch, noisy)

        def after(peer, msg, outcome, now):
            peer.history.append({**evaluate(peer.learner.model, test), "outcome": outcome})

        peers.append(Peer(
            make_address(i), he.generate_signing_key(crypto_rng), learner, experiment.protocol,
            keypair=keypair, rng=np.random.default_rng(nav), crypto_rng=crypto_rng,
            on_aggregate=after,
        ))
    return peers


def _contribution_hook(learner: Learner, cfg: TrainConfig, train_rng, byz: ByzantinePopulation,
                       arch: Architecture, noisy_rng=None):
    """Train locally right before contributing; Byzantine peers then swap in KDE noise."""
    def hook(weights):
        model = local_train(learner.model.with_weights(weights), learner.dataset, cfg, train_rng)
        if noisy_rng is not None:
            model = model.with_weights(byz.contribution(model.weights, arch, noisy_rng))
        learner.model = model
        return model.weights
    return hook


def tiny_learner(index: int) -> Learner:
    """A 2-feature logistic model on a few samples, for protocol-level scenarios."""
    rng = np.random.default_rng(index)
    X = rng.normal(size=(8, 2))
    y = (X[:, 0] > 0).astype(np.int64)
    arch = Architecture((2, 1))
    return Learner(init_model(arch, rng, "tiny"), PeerDataset(X, y, 2), "accuracy")


# --------------------------------------------------------------------------
# baselines


def train_alone(experiment: ExperimentConfig, sim: SimConfig, prepared: Prepared) -> list[dict]:
    """Each honest peer trains only on its own shard, for as many local epochs as a P4L peer at mrt."""
    cfg = replace(experiment.train, epochs=experiment.train.epochs * sim.mrt)
    peer_seeds = np.random.SeedSequence(sim.seed, spawn_key=(11,)).spawn(sim.num_peers)
    out = []
    for i, (shard, seq) in enumerate(zip(prepared.shards, peer_seeds)):
        if prepared.byzantine.is_byzantine(i):
            continue
        model = local_train(prepared.initial, shard, cfg, np.random.default_rng(seq))
        out.append(evaluate(model, prepared.task.test))
    return out


def run_baselines(experiment: ExperimentConfig, sim: SimConfig, prepared: Prepared) -> MetricsTable:
    table = MetricsTable()
    test = prepared.task.test
    if "alone" in experiment.baselines:
        res = train_alone(experiment, sim, prepared)
        for m in ("loss", "accuracy", "auc"):
            table.add("alone", sim.mrt, m, [r[m] for r in res])
    if "centralized" in experiment.baselines:
        union = _union(prepared.shards, prepared.task.train.n_classes)
        _, metrics, epochs = centralized_baseline(
            union, test, prepared.initial, experiment.train, stream(sim.seed, "centralized")
        )
        for m in ("loss", "accuracy", "auc"):
            table.add("centralized", epochs, m, [metrics[m]])
    if "fl" in experiment.baselines:
        k = experiment.fl_participants or max(1, sim.num_peers // 10)
        fl_cfg = replace(experiment.train, epochs=5)
        _, history = fl_baseline(
            prepared.shards, prepared.initial, fl_cfg, experiment.fl_rounds, k,
            stream(sim.seed, "fl"), selection_weights=prepared.selection_weights, test=test,
        )
        for h in history:
            for m in ("loss", "accuracy", "auc"):
                table.add("fl", h["round"], m, [h[m]])
    return table


def _union(shards: Sequence[PeerDataset], n_classes: int) -> PeerDataset:
    X = np.concatenate([s.X for s in shards if s.k])
    y = np.concatenate([s.y for s in shards if s.k])
    return PeerDataset(X, y, n_classes)


# --------------------------------------------------------------------------
# experiment driver


def run_cell(experiment: ExperimentConfig, seed: int, trace=None) -> MetricsTable:
    sim = experiment.sim_for(seed)
    prepared = prepare(experiment, sim)
    table = run_simulation(sim, experiment, prepared, trace=trace)
    table.extend(run_baselines(experiment, sim, prepared))
    return table.tag(
        config_hash=experiment.config_hash, seed=seed,
        attack_kind=experiment.attack.attack_kind,
        byzantine_fraction=experiment.attack.byzantine_fraction,
    )


def summarize(tables: Sequence[MetricsTable]) -> str:
    """Mean and std across seeds of each per-seed mean."""
    groups: dict[tuple, list[float]] = {}
    for t in tables:
        for r in t.rows:
            if r["mean"] is None:
                continue
            key = (r["config_hash"], r["series"], r["attack_kind"], r["byzantine_fraction"],
                   r["round"], r["metric_name"])
            groups.setdefault(key, []).append(r["mean"])
    lines = ["config_hash,series,attack_kind,byzantine_fraction,round,metric_name,mean,std,n_seeds"]
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k[:4]) + (k[4], k[5])):
        vals = np.array(groups[key])
        lines.append(",".join(str(x) for x in key) + f",{float(vals.mean())!r},{float(vals.std())!r},{vals.size}")
    return "\n".join(lines) + "\n"


def run_experiment(configs: ExperimentConfig | Sequence[ExperimentConfig], output: str | Path | None = None,
                   trace_dir: str | Path | None = None) -> list[MetricsTable]:
    """Run every cell and seed; writes ``metrics.csv`` and ``summary.csv``."""
    from .sim import Trace

    if isinstance(configs, ExperimentConfig):
        configs = [configs]
    out = Path(output or configs[0].output)
    out.mkdir(parents=True, exist_ok=True)
    tables = []
    for cfg in configs:
        for seed in cfg.seeds:
            trace = Trace(cfg.protocol) if trace_dir is not None else None
            logger.info("cell %s seed %d", cfg.config_hash, seed)
            tables.append(run_cell(cfg, seed, trace))
            if trace is not None:
                Path(trace_dir).mkdir(parents=True, exist_ok=True)
                trace.write(Path(trace_dir) / f"trace_{cfg.config_hash}_{seed}.jsonl")
    csv = tables[0].to_csv()
    for t in tables[1:]:
        csv += t.to_csv().split("\n", 1)[1]
    (out / "metrics.csv").write_text(csv)
    (out / "summary.csv").write_text(summarize(tables))
    return tables


# --------------------------------------------------------------------------
# HE micro-benchmark


def _linear_fit(x, y) -> dict:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return {"slope": float(slope), "intercept": float(intercept), "r2": r2}


def bench_he(param_counts: Sequence[int], key_bits: int = 2048, seed: int = 0) -> dict:
    """Wall time of packed encrypt, one homomorphic add and decrypt per parameter count."""
    counts = list(param_counts)
    if not counts or any(c <= 0 for c in counts):
        raise ValueError("parameter counts must be positive")
    if counts != sorted(counts):
        raise ValueError("parameter counts must be sorted ascending")
    rng = py_stream(seed, "bench")
    keys = he.keygen(key_bits, rng, unsafe=True)
    pk, codec = keys.public_key, he.FixedPointCodec()
    wrng = np.random.default_rng(seed)
    rows = []
    for count in counts:
        w = wrng.normal(0.0, 0.1, size=count)
        slots = he.encode_weights(w, codec, pk.n)
        t0 = time.perf_counter()
        a = he.encrypt_packed(pk, slots, codec, rng)
        t1 = time.perf_counter()
        b = he.encrypt_packed(pk, slots, codec, rng)
        t2 = time.perf_counter()
        s = he.homomorphic_add(pk, a, b)
        t3 = time.perf_counter()
        he.decrypt_packed(keys.secret_key, s)
        t4 = time.perf_counter()
        rows.append({"params": count, "ciphertexts": len(a.ciphertexts),
                     "encrypt_s": t1 - t0, "add_s": t3 - t2, "decrypt_s": t4 - t3})
    fits = {}
    if len(rows) >= 2:
        for op in ("encrypt", "add", "decrypt"):
            fits[op] = _linear_fit([r["params"] for r in rows], [r[f"{op}_s"] for r in rows])
    return {"key_bits": key_bits, "rows": rows, "fits": fits}

"""Deterministic discrete-event simulation of a P4L peer network.

Time is an integer number of milliseconds.  All randomness comes from named
streams derived from one seed, so a (seed, config) pair always produces the
same event trace.
"""
from __future__ import annotations

import heapq
import itertools
import json
import logging
import random
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import envelope as env_mod
from .envelope import FinalAggregateMessage, SynergyEnvelope, make_address
from .peer import Beacon, Peer, ProtocolConfig, Send, SetTimer

logger = logging.getLogger(__name__)

TRACE_SCHEMA = 1


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose under a master seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),)))


def py_stream(seed: int, name: str) -> random.Random:
    return random.Random(int(stream(seed, name).integers(0, 2**63)))


# --------------------------------------------------------------------------
# sampling laws


def power_law_sample(rng: np.random.Generator, a: float) -> float:
    """Inverse-CDF draw from f(x) = a x^(a-1) on [0, 1]."""
    if a <= 0:
        raise ValueError("power-law exponent must be positive")
    return float(rng.random() ** (1.0 / a))


@dataclass(frozen=True)
class SimConfig:
    num_peers: int = 200
    seed: int = 0
    per_hop_drop_prob: float = 0.0
    latency_min: int = 10
    latency_max: int = 50
    processing_delay: int = 20
    peer_sampling: str = "power_law"  # or "uniform"
    power_law_a: float = 2.0
    synergy_size_law: str = "power_law"  # or "fixed"
    synergy_size: int = 5
    synergy_size_min: int = 3
    synergy_size_max: int = 10
    rounds: int = 200
    mrt: int = 50
    mrr: float = 0.5
    initiators_per_round: int | None = None
    departure_rate: float = 0.0  # probability a peer departs during a round
    departure_duration: int = 5000
    forced_departure_prob: float = 0.0  # receiver of a mid-chain envelope departs
    discovery_lag: int = 2000
    neighborhood_degree: int | None = None
    key_bits: int = 512
    round_gap: int = 100

    def __post_init__(self):
        if self.num_peers < 1:
            raise ValueError("num_peers must be positive")
        if not 0.0 <= self.per_hop_drop_prob <= 1.0:
            raise ValueError("per_hop_drop_prob must lie in [0, 1]")
        if not 0.0 < self.mrr <= 1.0:
            raise ValueError("mrr must lie in (0, 1]")
        if self.peer_sampling not in ("uniform", "power_law"):
            raise ValueError(f"unknown peer_sampling {self.peer_sampling!r}")
        if self.synergy_size_law not in ("fixed", "power_law"):
            raise ValueError(f"unknown synergy_size_law {self.synergy_size_law!r}")
        if not 3 <= self.synergy_size_min <= self.synergy_size_max:
            raise ValueError("synergy sizes must satisfy 3 <= min <= max")
        if self.synergy_size < 3:
            raise ValueError("synergy_size must be at least 3")
        if self.latency_min < 0 or self.latency_max < self.latency_min:
            raise ValueError("bad latency range")

    @property
    def min_synergy_size_needed(self) -> int:
        return self.synergy_size if self.synergy_size_law == "fixed" else self.synergy_size_min

    @property
    def initiators(self) -> int:
        if self.initiators_per_round is not None:
            return self.initiators_per_round
        return max(1, self.num_peers // 10)


def draw_synergy_size(config: SimConfig, rng: np.random.Generator) -> int:
    """Total synergy size (initiator included)."""
    if config.synergy_size_law == "fixed":
        return config.synergy_size
    lo, hi = config.synergy_size_min, config.synergy_size_max
    x = power_law_sample(rng, config.power_law_a)
    return min(hi, lo + int(x * (hi - lo + 1)))


def peer_weights(config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-peer selection weights, drawn once per experiment."""
    if config.peer_sampling == "uniform":
        return np.full(config.num_peers, 1.0 / config.num_peers)
    w = np.array([power_law_sample(rng, config.power_law_a) for _ in range(config.num_peers)])
    return w / w.sum()


def select_participants(
    config: SimConfig,
    rng: np.random.Generator,
    round_index: int,
    weights: np.ndarray | None = None,
    count: int | None = None,
) -> list[int]:
    """Peers that initiate synergies in this round (distinct, sorted)."""
    n = config.num_peers
    count = min(n, count if count is not None else config.initiators)
    if n == 1:
        return [0]
    p = None if config.peer_sampling == "uniform" or weights is None else weights
    return sorted(int(i) for i in rng.choice(n, size=count, replace=False, p=p))


# --------------------------------------------------------------------------
# churn


@dataclass
class ChurnSchedule:
    intervals: dict[bytes, list[tuple[int, int]]] = field(default_factory=dict)
    on_receive: dict[bytes, int] = field(default_factory=dict)  # depart for this long on first envelope

    def depart(self, addr: bytes, start: int, end: int) -> None:
        self.intervals.setdefault(addr, []).append((start, end))

    def departed(self, addr: bytes, t: int, lag: int = 0) -> bool:
        return any(s + lag <= t < e for s, e in self.intervals.get(addr, ()))

    @property
    def empty(self) -> bool:
        return not self.intervals and not self.on_receive


def inject_churn(
    config: SimConfig,
    rng: np.random.Generator,
    addresses: Sequence[bytes],
    start: int,
    span: int,
    schedule: ChurnSchedule | None = None,
) -> ChurnSchedule:
    """Random unavailability intervals within ``[start, start + span)``."""
    schedule = schedule if schedule is not None else ChurnSchedule()
    if config.departure_rate <= 0:
        return schedule
    for addr in addresses:
        if rng.random() < config.departure_rate:
            t = start + int(rng.integers(0, max(1, span)))
            schedule.depart(addr, t, t + config.departure_duration)
    return schedule


# --------------------------------------------------------------------------
# event queue and network


class EventQueue:
    """Min-heap ordered by (time, insertion sequence)."""

    def __init__(self):
        self._heap: list = []
        self._seq = itertools.count()

    def push(self, time: int, kind: str, payload: Any) -> None:
        heapq.heappush(self._heap, (time, next(self._seq), kind, payload))

    def pop(self):
        time, _, kind, payload = heapq.heappop(self._heap)
        return time, kind, payload

    def __len__(self) -> int:
        return len(self._heap)


class Trace:
    """Protocol event log, serialisable as JSON lines."""

    def __init__(self, protocol: ProtocolConfig, enabled: bool = True):
        self.enabled = enabled
        self.records: list[dict] = []
        self.header = {
            "event": "header",
            "schema": TRACE_SCHEMA,
            "hop_timeout": protocol.hop_timeout,
            "max_retries": protocol.max_retries,
            "min_synergy_size": protocol.min_synergy_size,
        }

    def add(self, record: dict) -> None:
        if self.enabled:
            self.records.append(record)

    def lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True) for r in [self.header, *self.records]]

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(line + "\n")


class SimNetwork:
    """Delivers messages between peers with latency, loss and churn."""

    def __init__(
        self,
        config: SimConfig,
        protocol: ProtocolConfig,
        rng: np.random.Generator,
        churn: ChurnSchedule | None = None,
        adjacency: dict[bytes, Sequence[bytes]] | None = None,
        trace: Trace | None = None,
    ):
        self.config = config
        self.protocol = protocol
        self.rng = rng
        self.churn = churn if churn is not None else ChurnSchedule()
        self.adjacency = adjacency
        self.trace = trace if trace is not None else Trace(protocol, enabled=False)
        self.peers: dict[bytes, Peer] = {}
        self.order: list[bytes] = []
        self.queue = EventQueue()
        self.now = 0
        self.stats = {"sent": 0, "lost": 0, "delivered": 0, "initiated": 0, "completed": 0, "failed": 0}
        self.status: dict[bytes, str] = {}
        self._forced_hops: set[bytes] = set()

    def add_peer(self, peer: Peer) -> None:
        peer.sink = self._sink
        self.peers[peer.address] = peer
        self.order.append(peer.address)

    def _sink(self, event: str, peer: bytes, synergy: bytes | None, **fields) -> None:
        rec = {"t": self.now, "peer": peer.hex(), "event": event}
        if synergy is not None:
            rec["synergy"] = synergy.hex()
        rec.update(fields)
        self.trace.add(rec)
        if event == "initiate":
            self.stats["initiated"] += 1
            self.status[synergy] = "in_flight"
        elif event in ("complete", "fail"):
            self.stats["completed" if event == "complete" else "failed"] += 1
            self.status[synergy] = event

    def available(self, addr: bytes, t: int) -> bool:
        return not self.churn.departed(addr, t)

    def neighbors(self, addr: bytes, t: int) -> list[bytes]:
        pool = self.adjacency.get(addr, ()) if self.adjacency is not None else self.order
        if not self.churn.intervals:
            return [a for a in pool if a != addr]
        lag = self.config.discovery_lag
        return [a for a in pool if a != addr and not self.churn.departed(a, t, lag)]

    # -------------------------------------------------------------- dispatch

    def execute(self, src: bytes, actions: Iterable, t: int) -> None:
        for act in actions:
            if isinstance(act, Send):
                self.send(src, act.dst, act.message, t)
            elif isinstance(act, SetTimer):
                self.queue.push(act.at, "timer", src)

    def send(self, src: bytes, dst: bytes, message, t: int) -> None:
        depart = t + self.config.processing_delay
        self.stats["sent"] += 1
        if not self.available(src, depart) or self.rng.random() < self.config.per_hop_drop_prob:
            self.stats["lost"] += 1
            return
        latency = int(self.rng.integers(self.config.latency_min, self.config.latency_max + 1))
        self.queue.push(depart + latency, "deliver", (src, dst, message))

    def initiate(self, addr: bytes, budget: int, t: int) -> None:
        self.queue.push(t, "initiate", (addr, budget))

    def _deliver(self, src: bytes, dst: bytes, message, t: int) -> None:
        if isinstance(message, SynergyEnvelope) and not env_mod.is_terminal(message):
            self._maybe_depart_on_receive(dst, t)
        if dst not in self.peers or not self.available(dst, t):
            self.stats["lost"] += 1
            return
        self.stats["delivered"] += 1
        peer = self.peers[dst]
        if isinstance(message, SynergyEnvelope):
            actions = peer.on_envelope(message, src, t, self.neighbors(dst, t))
        elif isinstance(message, Beacon):
            actions = peer.on_beacon(message, t)
        elif isinstance(message, FinalAggregateMessage):
            peer.on_final_aggregate(message, t)
            actions = []
        else:
            raise TypeError(f"unknown message type {type(message).__name__}")
        self.execute(dst, actions, t)

    def _maybe_depart_on_receive(self, dst: bytes, t: int) -> None:
        duration = self.churn.on_receive.pop(dst, None)
        if duration is None and self.config.forced_departure_prob > 0:
            if self.rng.random() < self.config.forced_departure_prob:
                duration = self.config.departure_duration
        if duration is not None and self.available(dst, t):
            # leaves just as the envelope arrives, so it never contributes
            self.churn.depart(dst, t, t + duration)
            self.trace.add({"t": t, "peer": dst.hex(), "event": "depart", "until": t + duration})

    def step(self) -> None:
        t, kind, payload = self.queue.pop()
        self.now = max(self.now, t)
        if kind == "deliver":
            self._deliver(*payload, t)
        elif kind == "timer":
            peer = self.peers[payload]
            self.execute(payload, peer.on_timer(t, self.neighbors(payload, t)), t)
        elif kind == "initiate":
            addr, budget = payload
            if self.available(addr, t):
                peer = self.peers[addr]
                self.execute(addr, peer.on_discover(self.neighbors(addr, t), t, budget), t)

    def run(self, until: int | None = None) -> None:
        while self.queue and (until is None or self.queue._heap[0][0] <= until):
            self.step()

    def conservation_ok(self) -> bool:
        s = self.stats
        in_flight = sum(1 for v in self.status.values() if v == "in_flight")
        return s["completed"] + s["failed"] + in_flight == s["initiated"]


# --------------------------------------------------------------------------
# metrics


METRIC_COLUMNS = (
    "config_hash", "seed", "series", "attack_kind", "byzantine_fraction",
    "round", "metric_name", "mean", "std", "n_peers",
)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class MetricsTable:
    rows: list[dict] = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def add(self, series: str, round_: int, metric: str, values: Sequence[float], **extra) -> None:
        vals = np.array([v for v in values if v is not None], dtype=np.float64)
        self.rows.append({
            "series": series,
            "round": round_,
            "metric_name": metric,
            "mean": float(vals.mean()) if vals.size else None,
            "std": float(vals.std()) if vals.size else None,
            "n_peers": int(vals.size),
            **extra,
        })

    def extend(self, other: "MetricsTable") -> None:
        self.rows.extend(other.rows)

    def tag(self, **columns) -> "MetricsTable":
        for r in self.rows:
            for k, v in columns.items():
                r.setdefault(k, v)
        return self

    def value(self, series: str, metric: str, round_: int | None = None):
        rows = [r for r in self.rows if r["series"] == series and r["metric_name"] == metric]
        if round_ is not None:
            rows = [r for r in rows if r["round"] == round_]
        return rows[-1]["mean"] if rows else None

    def to_csv(self) -> str:
        lines = [",".join(METRIC_COLUMNS)]
        for r in self.rows:
            lines.append(",".join(_fmt(r.get(c)) for c in METRIC_COLUMNS))
        return "\n".join(lines) + "\n"


def participation_metrics(peers: Sequence[Peer], max_round: int, table: MetricsTable, series: str = "p4l") -> None:
    """Mean metric after N participations over peers with at least N participations."""
    for n in range(1, max_round + 1):
        eligible = [p.history[n - 1] for p in peers if len(p.history) >= n]
        if not eligible:
            break
        for metric in ("loss", "accuracy", "auc"):
            table.add(series, n, metric, [h[metric] for h in eligible])


# --------------------------------------------------------------------------
# full learning simulation


def run_simulation(sim_config: SimConfig, experiment, prepared=None, trace: Trace | None = None) -> MetricsTable:
    """Run P4L rounds until mrr of the peers reach mrt participations or the round budget ends.

    ``experiment`` supplies the task, training, protocol and attack settings
    (see :class:`p4l.experiment.ExperimentConfig`).
    """
    from .experiment import build_peers, prepare

    cfg = sim_config
    if cfg.min_synergy_size_needed > cfg.num_peers:
        raise ValueError("minimum synergy size exceeds the number of peers")
    prepared = prepared if prepared is not None else prepare(experiment, cfg)
    protocol = experiment.protocol
    trace = trace if trace is not None else Trace(protocol, enabled=False)
    net = SimNetwork(cfg, protocol, stream(cfg.seed, "network"), trace=trace)
    peers = build_peers(experiment, cfg, prepared)
    for p in peers:
        net.add_peer(p)
    addr_index = {p.address: i for i, p in enumerate(peers)}
    weights = prepared.selection_weights
    for p in peers:
        p.neighbor_weight = lambda a, _w=weights: float(_w[addr_index[a]])
    sched = stream(cfg.seed, "schedule")
    churn_rng = stream(cfg.seed, "churn")
    target = int(np.ceil(cfg.mrr * cfg.num_peers))
    rounds_run = 0
    for r in range(cfg.rounds):
        t0 = net.now + cfg.round_gap
        initiators = select_participants(cfg, sched, r, weights)
        span = protocol.hop_timeout * cfg.synergy_size_max
        inject_churn(cfg, churn_rng, net.order, t0, span, net.churn)
        for j, idx in enumerate(initiators):
            size = draw_synergy_size(cfg, sched)
            net.initiate(peers[idx].address, size - 1, t0 + j)
        net.run()
        rounds_run = r + 1
        if sum(1 for p in peers if p.participations >= cfg.mrt) >= target:
            break
    table = MetricsTable()
    # Byzantine peers' own models are not what the experiment measures
    honest = [p for i, p in enumerate(peers) if not prepared.byzantine.is_byzantine(i)]
    participation_metrics(honest, cfg.mrt, table)
    for key in ("initiated", "completed", "failed"):
        table.add("protocol", rounds_run, f"synergies_{key}", [float(net.stats[key])])
    table.stats = dict(net.stats, rounds=rounds_run,
                       reached_mrt=sum(1 for p in peers if p.participations >= cfg.mrt))
    table.peers = peers  # type: ignore[attr-defined]
    return table


# --------------------------------------------------------------------------
# scripted churn scenarios


SCENARIOS = ("early_return", "second_peer_fails", "initiator_departs")


def scripted_scenario(name: str, key_bits: int = 512):
    """Small hand-wired networks exercising the churn fallback paths.

    Returns ``(trace, network)``; the trace is deterministic.
    """
    from .experiment import tiny_learner
    from .he import generate_signing_key, keygen

    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}")
    protocol = ProtocolConfig(hop_timeout=1000, max_retries=2)
    cfg = SimConfig(num_peers=7, latency_min=10, latency_max=10, processing_delay=20,
                    discovery_lag=10**9)
    labels = "ABCDEFG"
    addrs = {c: make_address(c) for c in labels}
    A, B, C, D, E, F, G = (addrs[c] for c in labels)
    churn = ChurnSchedule()
    if name == "early_return":
        adjacency = {A: [B], B: [C], C: [D], D: [E, F, G]}
        budget = 5
        for x in (E, F, G):
            churn.on_receive[x] = 10**7
    elif name == "second_peer_fails":
        adjacency = {A: [B], B: [C, D, E]}
        budget = 4
        for x in (C, D, E):
            churn.on_receive[x] = 10**7
    else:
        adjacency = {A: [B], B: [C], C: [D], D: [E]}
        budget = 4
        churn.depart(A, 50, 10**7)
    trace = Trace(protocol)
    net = SimNetwork(cfg, protocol, np.random.default_rng(0), churn=churn, adjacency=adjacency, trace=trace)
    for i, c in enumerate(labels):
        crypto = random.Random(1000 + i)
        peer = Peer(
            addrs[c], generate_signing_key(crypto), tiny_learner(i), protocol,
            keypair=keygen(key_bits, crypto, unsafe=True), rng=np.random.default_rng(i),
            crypto_rng=crypto,
        )
        net.add_peer(peer)
    net.initiate(A, budget, 0)
    net.run()
    return trace, net


def protocol_stress(
    num_synergies: int = 1000,
    num_peers: int = 60,
    drop_prob: float = 0.1,
    forced_departure_prob: float = 0.05,
    seed: int = 0,
    key_bits: int = 512,
    protocol: ProtocolConfig | None = None,
):
    """Many concurrent synergies of tiny models under loss and forced departures.

    Returns ``(trace, network)``.
    """
    from .experiment import tiny_learner
    from .he import generate_signing_key, keygen

    protocol = protocol or ProtocolConfig()
    cfg = SimConfig(num_peers=num_peers, seed=seed, per_hop_drop_prob=drop_prob,
                    forced_departure_prob=forced_departure_prob, key_bits=key_bits,
                    initiators_per_round=max(1, num_peers // 6))
    trace = Trace(protocol)
    net = SimNetwork(cfg, protocol, stream(seed, "network"), trace=trace)
    crypto = py_stream(seed, "crypto")
    for i in range(num_peers):
        rng = random.Random(crypto.getrandbits(64))
        net.add_peer(Peer(make_address(i), generate_signing_key(rng), tiny_learner(i), protocol,
                          keypair=keygen(key_bits, rng, unsafe=True),
                          rng=np.random.default_rng([seed, i]), crypto_rng=rng))
    sched = stream(seed, "schedule")
    r = 0
    while net.stats["initiated"] < num_synergies:
        t0 = net.now + cfg.round_gap
        budget = num_synergies - net.stats["initiated"]
        chosen = [i for i in select_participants(cfg, sched, r)
                  if net.available(net.order[i], t0)][:budget]
        for j, idx in enumerate(chosen):
            net.initiate(net.order[idx], draw_synergy_size(cfg, sched) - 1, t0)
        net.run()
        r += 1
    return trace, net

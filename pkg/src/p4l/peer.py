"""Per-peer protocol state machine.

A :class:`Peer` consumes events (discovery, envelope, beacon, timer, final
aggregate) in order and returns the actions it wants performed: messages to
send and timers to arm.  It never talks to a network directly, which keeps it
deterministic and easy to drive from the simulator or from scripted tests.
"""
from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import envelope as env_mod
from .envelope import FinalAggregateMessage, SynergyEnvelope
from .he import FixedPointCodec, KeyPair, PublicKey, SigningKey
from .learning import ModelParams, PeerDataset, clip_weights, evaluate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProtocolConfig:
    hop_timeout: int = 1000  # t_p, milliseconds
    max_retries: int = 2  # R
    freshness_window: int = 60_000
    min_synergy_size: int = 3

    def __post_init__(self):
        if self.hop_timeout <= 0:
            raise ValueError("hop_timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    def initiator_deadline(self, start: int, budget: int) -> int:
        return start + self.hop_timeout * (budget - 1)


@dataclass(frozen=True)
class Beacon:
    synergy_id: bytes
    sender: bytes


@dataclass(frozen=True)
class Send:
    dst: bytes
    message: object


@dataclass(frozen=True)
class SetTimer:
    at: int


@dataclass
class SynergyBookkeeping:
    synergy_id: bytes
    envelope: SynergyEnvelope
    forwarded_to: bytes | None = None
    tried: list[bytes] = field(default_factory=list)
    beacon_deadline: int | None = None
    retries_used: int = 0
    returning: bool = False
    initiator_deadline: int | None = None
    budget: int = 0
    done: bool = False

    @property
    def is_initiator(self) -> bool:
        return self.initiator_deadline is not None

    @property
    def idle(self) -> bool:
        return self.beacon_deadline is None and (not self.is_initiator or self.done)


class Learner:
    """A peer's model and local shard, plus the metric used to accept aggregates."""

    def __init__(
        self,
        model: ModelParams,
        dataset: PeerDataset,
        metric: str = "accuracy",
        contribution_hook: Callable[[np.ndarray], np.ndarray] | None = None,
        validation: PeerDataset | None = None,
    ):
        self.model = model
        self.dataset = dataset
        self.metric = metric
        self.contribution_hook = contribution_hook
        # held-out local samples for the acceptance test; None: use the training shard
        self.validation = validation

    def contribution(self) -> np.ndarray:
        w = self.model.weights
        if self.contribution_hook is not None:
            w = self.contribution_hook(w)
        return clip_weights(w)

    def local_metric(self) -> float | None:
        """Metric on local data (the held-out split when there is one).

        AUC falls back to -loss when the data holds a single class.
        """
        data = self.validation if self.validation is not None else self.dataset
        if data.k == 0:
            return None
        m = evaluate(self.model, data)
        if self.metric == "auc":
            return m["auc"] if m["auc"] is not None else -m["loss"]
        return m[self.metric] if self.metric != "loss" else -m["loss"]


EventSink = Callable[..., None]


def _hex(b: bytes | None) -> str | None:
    return b.hex() if b is not None else None


class Peer:
    def __init__(
        self,
        address: bytes,
        signing_key: SigningKey,
        learner: Learner,
        config: ProtocolConfig = ProtocolConfig(),
        keypair: KeyPair | None = None,
        codec: FixedPointCodec | None = None,
        rng: np.random.Generator | None = None,
        crypto_rng: random.Random | None = None,
        sink: EventSink | None = None,
        neighbor_weight: Callable[[bytes], float] | None = None,
        on_aggregate: Callable[["Peer", FinalAggregateMessage, str, int], None] | None = None,
    ):
        self.address = address
        self.signing_key = signing_key
        self.learner = learner
        self.config = config
        self.keypair = keypair
        self.codec = codec or FixedPointCodec()
        self.rng = rng if rng is not None else np.random.default_rng()
        self.crypto_rng = crypto_rng
        self.sink = sink
        self.neighbor_weight = neighbor_weight
        self.on_aggregate = on_aggregate
        self.books: dict[bytes, SynergyBookkeeping] = {}
        # synergies I contributed to: id -> (initiator pk, initiator verify key)
        self.joined: dict[bytes, tuple[PublicKey | None, bytes]] = {}
        self.applied: set[bytes] = set()
        self.participations = 0
        self.history: list[dict] = []

    # ------------------------------------------------------------------ utils

    def _emit(self, event: str, synergy: bytes | None = None, **fields) -> None:
        if self.sink is not None:
            self.sink(event, self.address, synergy, **fields)

    def _choose(self, candidates: list[bytes]) -> bytes | None:
        if not candidates:
            return None
        if self.neighbor_weight is None:
            return candidates[int(self.rng.integers(len(candidates)))]
        w = np.array([self.neighbor_weight(c) for c in candidates], dtype=np.float64)
        if w.sum() <= 0:
            return candidates[int(self.rng.integers(len(candidates)))]
        return candidates[int(self.rng.choice(len(candidates), p=w / w.sum()))]

    def _cleanup(self, rec: SynergyBookkeeping) -> None:
        if rec.idle:
            self.books.pop(rec.synergy_id, None)

    def _forward(
        self, rec: SynergyBookkeeping, neighbors: Sequence[bytes], now: int, exclude: bytes | None = None
    ) -> list | None:
        taken = set(rec.envelope.participants) | set(rec.tried)
        candidates = [a for a in neighbors if a not in taken and a != exclude and a != self.address]
        target = self._choose(candidates)
        if target is None:
            return None
        if rec.tried:
            rec.envelope = env_mod.resign(rec.envelope, self.signing_key, now)
        rec.tried.append(target)
        rec.forwarded_to = target
        rec.beacon_deadline = now + self.config.hop_timeout
        self._emit("forward", rec.synergy_id, to=target.hex(), attempt=len(rec.tried))
        return [Send(target, rec.envelope), SetTimer(rec.beacon_deadline)]

    def _return(self, rec: SynergyBookkeeping, now: int, fallback: bool) -> list:
        if rec.returning:
            rec.envelope = env_mod.resign(rec.envelope, self.signing_key, now)
        elif not rec.envelope.terminal:
            rec.envelope = env_mod.to_terminal(rec.envelope, self.signing_key, now)
        rec.returning = True
        initiator = rec.envelope.initiator
        rec.forwarded_to = initiator
        rec.beacon_deadline = now + self.config.hop_timeout
        self._emit(
            "return", rec.synergy_id, to=initiator.hex(), n=len(rec.envelope.participants),
            fallback=fallback,
        )
        return [Send(initiator, rec.envelope), SetTimer(rec.beacon_deadline)]

    # --------------------------------------------------------------- handlers

    def on_discover(self, neighbors: Sequence[bytes], now: int, budget: int) -> list:
        """Start a synergy with ``budget`` further participants (S)."""
        neighbors = [a for a in neighbors if a != self.address]
        if not neighbors:
            return []
        envelope = env_mod.create_initial_envelope(
            self.keypair, self.signing_key, self.learner.contribution(), budget, now,
            self.address, self.codec, self.crypto_rng,
        )
        sid = envelope.synergy_id
        deadline = self.config.initiator_deadline(now, budget)
        rec = SynergyBookkeeping(sid, envelope, initiator_deadline=deadline, budget=budget)
        self.books[sid] = rec
        self.joined[sid] = (envelope.initiator_pk, envelope.initiator_verify_key)
        self._emit("initiate", sid, budget=budget, deadline=deadline)
        actions = self._forward(rec, neighbors, now) or []
        return actions + [SetTimer(deadline)]

    def on_envelope(
        self, envelope: SynergyEnvelope, sender: bytes, now: int, neighbors: Sequence[bytes]
    ) -> list:
        sid = envelope.synergy_id
        if not env_mod.verify(envelope):
            self._emit("drop", sid, reason="bad_signature")
            return []
        if envelope.timestamp > now or now - envelope.timestamp > self.config.freshness_window:
            self._emit("drop", sid, reason="stale")
            return []
        if env_mod.is_terminal(envelope):
            return self._on_terminal(envelope, sender, now)
        if self.address in envelope.participants or sid in self.joined:
            self._emit("drop", sid, reason="duplicate")
            return []
        try:
            new = env_mod.accumulate_and_forward(
                envelope, self.learner.contribution(), self.address, self.signing_key, now,
                self.crypto_rng,
            )
        except env_mod.EnvelopeError as exc:
            self._emit("drop", sid, reason=type(exc).__name__)
            return []
        self.joined[sid] = (envelope.initiator_pk, envelope.initiator_verify_key)
        self._emit("accumulate", sid, n=len(new.participants), remaining=new.remaining)
        rec = SynergyBookkeeping(sid, new)
        self.books[sid] = rec
        if env_mod.is_terminal(new):
            actions = self._return(rec, now, fallback=False)
        else:
            actions = self._forward(rec, neighbors, now, exclude=sender)
            if actions is None:
                actions = self._give_up_forwarding(rec, now)
        return actions + [Send(sender, Beacon(sid, self.address))]

    def _on_terminal(self, envelope: SynergyEnvelope, sender: bytes, now: int) -> list:
        sid = envelope.synergy_id
        rec = self.books.get(sid)
        if rec is None or not rec.is_initiator or rec.done or envelope.initiator != self.address:
            self._emit("drop", sid, reason="unexpected_terminal")
            return []
        actions: list = [Send(sender, Beacon(sid, self.address))]
        rec.done = True
        rec.beacon_deadline = None
        try:
            msg = env_mod.finalize_aggregate(
                envelope, self.keypair, self.signing_key, now, self.config.min_synergy_size
            )
        except env_mod.EnvelopeError as exc:
            self._emit("fail", sid, reason=type(exc).__name__, n=len(envelope.participants))
            self._cleanup(rec)
            return actions
        pk, vk = self.joined[sid]
        proof_ok = env_mod.verify_final_aggregate(msg, pk, vk, self.config.min_synergy_size)
        self._emit("complete", sid, n=msg.participant_count, proof_ok=proof_ok,
                   participants=[p.hex() for p in msg.participants])
        self._cleanup(rec)
        for p in msg.participants:
            if p != self.address:
                actions.append(Send(p, msg))
        self.on_final_aggregate(msg, now)
        return actions

    def on_beacon(self, beacon: Beacon, now: int) -> list:
        rec = self.books.get(beacon.synergy_id)
        if rec is None or rec.beacon_deadline is None or beacon.sender != rec.forwarded_to:
            return []
        rec.beacon_deadline = None
        self._emit("beacon", beacon.synergy_id, frm=beacon.sender.hex())
        self._cleanup(rec)
        return []

    def _give_up_forwarding(self, rec: SynergyBookkeeping, now: int) -> list:
        rec.beacon_deadline = None
        if rec.is_initiator:
            self._emit("hop_exhausted", rec.synergy_id)
            return []
        n = len(rec.envelope.participants)
        if n > 2:
            return self._return(rec, now, fallback=True)
        self._emit("hop_fail", rec.synergy_id, n=n)
        self._cleanup(rec)
        return []

    def on_timer(self, now: int, neighbors: Sequence[bytes]) -> list:
        actions: list = []
        for sid in list(self.books):
            rec = self.books[sid]
            if rec.is_initiator and not rec.done and now >= rec.initiator_deadline:
                rec.done = True
                rec.beacon_deadline = None
                self._emit("fail", sid, reason="deadline")
                self._cleanup(rec)
                continue
            if rec.beacon_deadline is None or now < rec.beacon_deadline:
                continue
            can_retry = rec.retries_used < self.config.max_retries
            if rec.returning:
                if can_retry:
                    rec.retries_used += 1
                    actions += self._return(rec, now, fallback=False)
                else:
                    rec.beacon_deadline = None
                    self._emit("return_giveup", sid)
                    self._cleanup(rec)
                continue
            sent = self._forward(rec, neighbors, now) if can_retry else None
            if sent is not None:
                rec.retries_used += 1
                actions += sent
            else:
                actions += self._give_up_forwarding(rec, now)
        return actions

    def on_final_aggregate(self, msg: FinalAggregateMessage, now: int) -> str:
        """Verify, then keep the aggregate only if the local metric does not drop."""
        sid = msg.synergy_id
        info = self.joined.get(sid)
        if info is None or self.address not in msg.participants:
            return "ignored"
        if sid in self.applied:
            return "duplicate"
        pk, vk = info
        if not env_mod.verify_final_aggregate(msg, pk, vk, self.config.min_synergy_size):
            self._emit("aggregate", sid, outcome="invalid", suspect=msg.participants[0].hex())
            return "invalid"
        self.applied.add(sid)
        learner = self.learner
        before = learner.local_metric()
        previous = learner.model
        learner.model = previous.with_weights(np.asarray(msg.aggregate))
        after = learner.local_metric()
        accepted = before is None or after >= before
        if not accepted:
            learner.model = previous
        self.participations += 1
        outcome = "accepted" if accepted else "rejected"
        self._emit("aggregate", sid, outcome=outcome, before=before, after=after,
                   n=msg.participant_count)
        if self.on_aggregate is not None:
            self.on_aggregate(self, msg, outcome, now)
        return outcome

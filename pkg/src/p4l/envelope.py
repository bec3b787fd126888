"""Synergy messages: the signed envelope passed along the chain and the final
aggregate broadcast by the initiator.

Envelopes are immutable; every transformation returns a new, re-signed value.
The byte layout produced by :func:`canonical_bytes` is what gets signed and is
the wire format (see ``docs/wire_format.md``).
"""
from __future__ import annotations

import hashlib
import random
import struct
from dataclasses import dataclass, replace
from typing import Sequence, Union

import numpy as np

from . import he
from .he import FixedPointCodec, KeyPair, PackedCiphertext, PublicKey

MAGIC = b"P4L"
WIRE_VERSION = 1
KIND_ENVELOPE = 1
KIND_TERMINAL = 2
KIND_FINAL = 3
ACC_PACKED = 1
ACC_PLAIN = 2
ADDRESS_LEN = 16


class EnvelopeError(Exception):
    pass


class SignatureError(EnvelopeError):
    pass


class DuplicateParticipantError(EnvelopeError):
    pass


class SynergyExhaustedError(EnvelopeError):
    pass


class SynergyTooSmallError(EnvelopeError):
    pass


def make_address(label: int | str | bytes) -> bytes:
    """Deterministic 16-byte peer address derived from a label."""
    if isinstance(label, int):
        label = label.to_bytes(8, "big")
    elif isinstance(label, str):
        label = label.encode()
    return hashlib.blake2b(label, digest_size=ADDRESS_LEN).digest()


def synergy_id_for(initiator_pk: PublicKey | None, verify_key: bytes, origin_time: int) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(initiator_pk.to_bytes() if initiator_pk is not None else b"")
    h.update(verify_key)
    h.update(struct.pack(">Q", origin_time))
    return h.digest()


@dataclass(frozen=True)
class PlaintextSum:
    """Unencrypted running sum, used when a simulation disables encryption."""

    values: tuple[float, ...]

    @property
    def weight_count(self) -> int:
        return len(self.values)


Accumulator = Union[PackedCiphertext, PlaintextSum]


@dataclass(frozen=True)
class SynergyEnvelope:
    synergy_id: bytes
    initiator_pk: PublicKey | None
    initiator_verify_key: bytes
    accumulated: Accumulator
    remaining: int
    participants: tuple[bytes, ...]
    timestamp: int
    sender_verify_key: bytes
    signature: bytes = b""
    terminal: bool = False

    @property
    def initiator(self) -> bytes:
        return self.participants[0]

    @property
    def encrypted(self) -> bool:
        return isinstance(self.accumulated, PackedCiphertext)


@dataclass(frozen=True)
class FinalAggregateMessage:
    synergy_id: bytes
    aggregate: tuple[float, ...]
    plaintext_sum: tuple[int, ...]
    accumulated: Accumulator
    proof: he.DecryptionProof | None
    participants: tuple[bytes, ...]
    timestamp: int
    sender_verify_key: bytes
    signature: bytes = b""

    @property
    def participant_count(self) -> int:
        return len(self.participants)


# --------------------------------------------------------------------------
# canonical encoding


def _u32(x: int) -> bytes:
    return struct.pack(">I", x)


def _blob(data: bytes) -> bytes:
    return _u32(len(data)) + data


def _encode_accumulator(acc: Accumulator) -> bytes:
    if isinstance(acc, PackedCiphertext):
        return bytes([ACC_PACKED]) + _blob(he.serialize_packed(acc))
    payload = struct.pack(f">{len(acc.values)}d", *acc.values)
    return bytes([ACC_PLAIN]) + _u32(len(acc.values)) + payload


def _encode_int_list(values: Sequence[int]) -> bytes:
    parts = [_u32(len(values))]
    for v in values:
        parts.append(_blob(v.to_bytes((v.bit_length() + 7) // 8, "big")))
    return b"".join(parts)


def _encode_addresses(addrs: Sequence[bytes]) -> bytes:
    for a in addrs:
        if len(a) != ADDRESS_LEN:
            raise EnvelopeError(f"peer address must be {ADDRESS_LEN} bytes")
    return _u32(len(addrs)) + b"".join(addrs)


def canonical_bytes(msg: SynergyEnvelope | FinalAggregateMessage, include_signature: bool = False) -> bytes:
    """Deterministic encoding; signatures cover exactly the bytes without the signature."""
    if isinstance(msg, FinalAggregateMessage):
        parts = [
            MAGIC,
            bytes([WIRE_VERSION, KIND_FINAL]),
            msg.synergy_id,
            _u32(len(msg.aggregate)),
            struct.pack(f">{len(msg.aggregate)}d", *msg.aggregate),
            _encode_int_list(msg.plaintext_sum),
            _encode_accumulator(msg.accumulated),
            _encode_int_list(msg.proof.randomness if msg.proof is not None else ()),
            bytes([msg.proof is not None]),
            _encode_addresses(msg.participants),
            struct.pack(">Q", msg.timestamp),
            _blob(msg.sender_verify_key),
        ]
    else:
        kind = KIND_TERMINAL if msg.terminal else KIND_ENVELOPE
        parts = [MAGIC, bytes([WIRE_VERSION, kind]), msg.synergy_id]
        if not msg.terminal:
            pk = msg.initiator_pk.to_bytes() if msg.initiator_pk is not None else b""
            parts += [_blob(pk), _u32(msg.remaining)]
        parts += [
            _blob(msg.initiator_verify_key),
            _encode_accumulator(msg.accumulated),
            _encode_addresses(msg.participants),
            struct.pack(">Q", msg.timestamp),
            _blob(msg.sender_verify_key),
        ]
    if include_signature:
        parts.append(_blob(msg.signature))
    return b"".join(parts)


def encode(msg: SynergyEnvelope | FinalAggregateMessage) -> bytes:
    return canonical_bytes(msg, include_signature=True)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise EnvelopeError("truncated message")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def int_list(self) -> tuple[int, ...]:
        return tuple(int.from_bytes(self.blob(), "big") for _ in range(self.u32()))

    def addresses(self) -> tuple[bytes, ...]:
        return tuple(self.take(ADDRESS_LEN) for _ in range(self.u32()))

    def accumulator(self) -> Accumulator:
        tag = self.take(1)[0]
        if tag == ACC_PACKED:
            raw = self.blob()
            try:
                packed, end = he.deserialize_packed(raw)
            except ValueError as exc:
                raise EnvelopeError(str(exc)) from exc
            if end != len(raw):
                raise EnvelopeError("trailing bytes in ciphertext block")
            return packed
        if tag == ACC_PLAIN:
            count = self.u32()
            return PlaintextSum(struct.unpack(f">{count}d", self.take(8 * count)))
        raise EnvelopeError(f"unknown accumulator tag {tag}")


def decode(data: bytes) -> SynergyEnvelope | FinalAggregateMessage:
    r = _Reader(data)
    if r.take(3) != MAGIC:
        raise EnvelopeError("bad magic")
    version, kind = r.take(2)
    if version != WIRE_VERSION:
        raise EnvelopeError(f"unsupported wire version {version}")
    synergy_id = r.take(16)
    if kind == KIND_FINAL:
        count = r.u32()
        aggregate = struct.unpack(f">{count}d", r.take(8 * count))
        plaintext_sum = r.int_list()
        accumulated = r.accumulator()
        randomness = r.int_list()
        has_proof = r.take(1)[0]
        msg = FinalAggregateMessage(
            synergy_id=synergy_id,
            aggregate=aggregate,
            plaintext_sum=plaintext_sum,
            accumulated=accumulated,
            proof=he.DecryptionProof(randomness) if has_proof else None,
            participants=r.addresses(),
            timestamp=r.u64(),
            sender_verify_key=r.blob(),
            signature=r.blob(),
        )
    elif kind in (KIND_ENVELOPE, KIND_TERMINAL):
        terminal = kind == KIND_TERMINAL
        pk, remaining = None, 0
        if not terminal:
            raw_pk = r.blob()
            pk = PublicKey.from_bytes(raw_pk) if raw_pk else None
            remaining = r.u32()
        msg = SynergyEnvelope(
            synergy_id=synergy_id,
            initiator_pk=pk,
            initiator_verify_key=r.blob(),
            accumulated=r.accumulator(),
            remaining=remaining,
            participants=r.addresses(),
            timestamp=r.u64(),
            sender_verify_key=r.blob(),
            signature=r.blob(),
            terminal=terminal,
        )
    else:
        raise EnvelopeError(f"unknown message kind {kind}")
    if r.pos != len(data):
        raise EnvelopeError("trailing bytes after message")
    return msg


# --------------------------------------------------------------------------
# signing helpers


def _signed(msg, signing_key: he.SigningKey):
    msg = replace(msg, sender_verify_key=he.verify_key_bytes(signing_key), signature=b"")
    return replace(msg, signature=he.sign_message(signing_key, canonical_bytes(msg)))


def verify(msg: SynergyEnvelope | FinalAggregateMessage, verify_key: bytes | None = None) -> bool:
    """Check the signature against ``verify_key`` (defaults to the embedded sender key)."""
    key = verify_key if verify_key is not None else msg.sender_verify_key
    if verify_key is not None and verify_key != msg.sender_verify_key:
        return False
    return he.verify_signature(key, canonical_bytes(msg), msg.signature)


def resign(envelope: SynergyEnvelope, signing_key: he.SigningKey, now: int) -> SynergyEnvelope:
    """Refresh the timestamp and signature (used for retries)."""
    return _signed(replace(envelope, timestamp=now), signing_key)


def to_terminal(envelope: SynergyEnvelope, signing_key: he.SigningKey, now: int) -> SynergyEnvelope:
    """Reduce an envelope to the form sent back to the initiator."""
    return _signed(
        replace(envelope, terminal=True, initiator_pk=None, remaining=0, timestamp=now),
        signing_key,
    )


# --------------------------------------------------------------------------
# protocol transformations


def _contribution(
    weights: np.ndarray,
    pk: PublicKey | None,
    codec: FixedPointCodec,
    rng: random.Random | None,
    encrypted: bool,
) -> Accumulator:
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if not encrypted:
        return PlaintextSum(tuple(float(w) for w in weights))
    return he.encrypt_packed(pk, he.encode_weights(weights, codec, pk.n), codec, rng)


def create_initial_envelope(
    keypair: KeyPair | None,
    signing_key: he.SigningKey,
    local_weights: np.ndarray,
    synergy_budget: int,
    now: int,
    address: bytes,
    codec: FixedPointCodec | None = None,
    rng: random.Random | None = None,
) -> SynergyEnvelope:
    """Start a synergy.  ``keypair=None`` runs the same protocol without encryption."""
    if synergy_budget < 2:
        raise SynergyTooSmallError(
            f"synergy too small: budget {synergy_budget} leaves fewer than 3 peers"
        )
    codec = codec or FixedPointCodec()
    pk = keypair.public_key if keypair is not None else None
    acc = _contribution(local_weights, pk, codec, rng, keypair is not None)
    vk = he.verify_key_bytes(signing_key)
    env = SynergyEnvelope(
        synergy_id=synergy_id_for(pk, vk, now),
        initiator_pk=pk,
        initiator_verify_key=vk,
        accumulated=acc,
        remaining=synergy_budget,
        participants=(address,),
        timestamp=now,
        sender_verify_key=vk,
    )
    return _signed(env, signing_key)


def accumulate_and_forward(
    envelope: SynergyEnvelope,
    my_weights: np.ndarray,
    my_address: bytes,
    my_signing_key: he.SigningKey,
    now: int,
    rng: random.Random | None = None,
) -> SynergyEnvelope:
    """Add my weights to the running sum, decrement the budget, append myself, re-sign.

    The result is in terminal form when the budget reaches zero.
    """
    if not verify(envelope):
        raise SignatureError("envelope signature does not verify")
    if envelope.terminal:
        raise SynergyExhaustedError("terminal envelopes cannot be extended")
    if my_address in envelope.participants:
        raise DuplicateParticipantError("peer already contributed to this synergy")
    if envelope.remaining < 1:
        raise SynergyExhaustedError("no remaining synergy slots")
    acc = envelope.accumulated
    if isinstance(acc, PackedCiphertext):
        mine = _contribution(my_weights, envelope.initiator_pk, acc.codec, rng, True)
        if mine.weight_count != acc.weight_count:
            raise EnvelopeError("weight count differs from the synergy's model")
        new_acc: Accumulator = he.homomorphic_add(envelope.initiator_pk, acc, mine)
    else:
        w = np.asarray(my_weights, dtype=np.float64).ravel()
        if w.size != acc.weight_count:
            raise EnvelopeError("weight count differs from the synergy's model")
        new_acc = PlaintextSum(tuple((np.asarray(acc.values) + w).tolist()))
    remaining = envelope.remaining - 1
    nxt = replace(
        envelope,
        accumulated=new_acc,
        remaining=remaining,
        participants=envelope.participants + (my_address,),
        timestamp=now,
    )
    if remaining == 0:
        return to_terminal(nxt, my_signing_key, now)
    return _signed(nxt, my_signing_key)


def is_terminal(envelope: SynergyEnvelope) -> bool:
    return envelope.terminal or envelope.remaining == 0


def finalize_aggregate(
    envelope: SynergyEnvelope,
    keypair: KeyPair | None,
    signing_key: he.SigningKey,
    now: int,
    min_synergy_size: int = 3,
) -> FinalAggregateMessage:
    """Decrypt the sum, divide by N, and attach a proof of correct decryption."""
    if not verify(envelope):
        raise SignatureError("envelope signature does not verify")
    n_peers = len(envelope.participants)
    if n_peers < min_synergy_size:
        raise SynergyTooSmallError(
            f"synergy below minimum size: {n_peers} < {min_synergy_size}"
        )
    acc = envelope.accumulated
    if isinstance(acc, PackedCiphertext):
        if keypair is None:
            raise EnvelopeError("encrypted synergy needs the initiator key pair")
        sk = keypair.secret_key
        res = he.decrypt_packed(sk, acc)
        proof = he.prove_decryption(sk, acc, res)
        aggregate = he.decode_weights(res, acc.codec, sk.public_key.n, divisor=n_peers)
        plaintext_sum: tuple[int, ...] = tuple(res)
    else:
        aggregate = np.asarray(acc.values) / n_peers
        proof = None
        plaintext_sum = ()
    msg = FinalAggregateMessage(
        synergy_id=envelope.synergy_id,
        aggregate=tuple(float(x) for x in aggregate),
        plaintext_sum=plaintext_sum,
        accumulated=acc,
        proof=proof,
        participants=envelope.participants,
        timestamp=now,
        sender_verify_key=he.verify_key_bytes(signing_key),
    )
    return _signed(msg, signing_key)


def verify_final_aggregate(
    msg: FinalAggregateMessage,
    initiator_pk: PublicKey | None,
    initiator_verify_key: bytes,
    min_synergy_size: int = 3,
) -> bool:
    """Signature, decryption proof, and consistency of Res/N with the broadcast aggregate."""
    if not verify(msg, initiator_verify_key):
        return False
    n_peers = msg.participant_count
    if n_peers < min_synergy_size or len(set(msg.participants)) != n_peers:
        return False
    acc = msg.accumulated
    if isinstance(acc, PackedCiphertext):
        if initiator_pk is None or msg.proof is None:
            return False
        if not he.verify_decryption(initiator_pk, acc, msg.plaintext_sum, msg.proof):
            return False
        expected = he.decode_weights(msg.plaintext_sum, acc.codec, initiator_pk.n, divisor=n_peers)
    else:
        expected = np.asarray(acc.values) / n_peers
    return len(expected) == len(msg.aggregate) and bool(
        np.array_equal(expected, np.asarray(msg.aggregate))
    )

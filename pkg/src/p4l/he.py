"""Paillier encryption with fixed-point slot packing and verifiable decryption.

Model weights are scaled to integers, several of them are packed into one
Paillier plaintext, and the resulting ciphertexts can be summed by anyone
holding the public key.  The key owner can prove that a decryption is correct
by publishing the encryption randomness recovered with the secret key.

Signed values use the usual lower-half/upper-half convention of Z_n.  Inside a
packed plaintext each slot is a signed digit in balanced base 2**slot_bits, so
sums of packed plaintexts never carry between slots as long as every slot sum
stays below 2**(slot_bits - 1) in magnitude.
"""
from __future__ import annotations

import math
import random
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import gmpy2
import numpy as np
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

DEFAULT_KEYSIZE = 2048
SAFE_KEYSIZES = (2048, 3072)
MIN_UNSAFE_KEYSIZE = 512
DEFAULT_SCALE = 10**10
DEFAULT_SLOT_BITS = 96
_KEYGEN_ATTEMPTS = 64


class HEError(Exception):
    """Base class for encryption-layer failures."""


class KeyGenerationError(HEError):
    pass


class SlotOverflowError(HEError, ValueError):
    """A value does not fit into its fixed-point slot."""


class KeyMismatchError(HEError, ValueError):
    pass


class DecryptionError(HEError):
    pass


class ProofError(HEError):
    pass


# --------------------------------------------------------------------------
# keys


@dataclass(frozen=True)
class PublicKey:
    n: int

    @property
    def g(self) -> int:
        return self.n + 1

    @cached_property
    def nsquare(self) -> int:
        return self.n * self.n

    @property
    def bits(self) -> int:
        return self.n.bit_length()

    def to_bytes(self) -> bytes:
        return self.n.to_bytes((self.n.bit_length() + 7) // 8, "big")

    @classmethod
    def from_bytes(cls, data: bytes) -> "PublicKey":
        return cls(int.from_bytes(data, "big"))

    def __repr__(self) -> str:
        return f"<PublicKey {self.bits} bits {hex(self.n)[2:12]}>"


@dataclass(frozen=True)
class SecretKey:
    public_key: PublicKey
    p: int
    q: int

    def __post_init__(self):
        if self.p * self.q != self.public_key.n:
            raise KeyMismatchError("p * q does not match the public modulus")

    @cached_property
    def phi(self) -> int:
        return (self.p - 1) * (self.q - 1)

    @cached_property
    def lam(self) -> int:
        return math.lcm(self.p - 1, self.q - 1)

    @cached_property
    def _crt(self):
        # Decryption constants for g = n + 1, computed mod p^2 and q^2.
        p, q, n = self.p, self.q, self.public_key.n
        psq, qsq = p * p, q * q
        hp = int(gmpy2.invert(_l_func(int(gmpy2.powmod(n + 1, p - 1, psq)), p), p))
        hq = int(gmpy2.invert(_l_func(int(gmpy2.powmod(n + 1, q - 1, qsq)), q), q))
        p_inv_q = int(gmpy2.invert(p, q))
        return psq, qsq, hp, hq, p_inv_q

    @cached_property
    def _n_root_exponent(self) -> int:
        return int(gmpy2.invert(self.public_key.n, self.phi))

    def raw_decrypt(self, ciphertext: int) -> int:
        p, q = self.p, self.q
        psq, qsq, hp, hq, p_inv_q = self._crt
        mp = _l_func(int(gmpy2.powmod(ciphertext % psq, p - 1, psq)), p) * hp % p
        mq = _l_func(int(gmpy2.powmod(ciphertext % qsq, q - 1, qsq)), q) * hq % q
        return mp + ((mq - mp) * p_inv_q % q) * p

    def recover_randomness(self, ciphertext: int, plaintext: int) -> int:
        """Return r with (1 + m*n) * r^n = c (mod n^2)."""
        n = self.public_key.n
        nsq = self.public_key.nsquare
        r_to_n = ciphertext * (1 - plaintext * n) % nsq
        return int(gmpy2.powmod(r_to_n % n, self._n_root_exponent, n))


@dataclass(frozen=True)
class KeyPair:
    public_key: PublicKey
    secret_key: SecretKey

    @property
    def modulus_bits(self) -> int:
        return self.public_key.bits


def _l_func(x: int, p: int) -> int:
    return (x - 1) // p


def _random_prime(bits: int, rng: random.Random) -> int:
    candidate = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
    return int(gmpy2.next_prime(candidate))


def keygen(
    modulus_bits: int = DEFAULT_KEYSIZE,
    rng: random.Random | None = None,
    unsafe: bool = False,
) -> KeyPair:
    """Generate a Paillier key pair with g = n + 1.

    ``modulus_bits`` must be 2048 or 3072 unless ``unsafe`` is set, in which
    case any size from 512 bits up is accepted (simulation and tests only).
    Passing a seeded ``rng`` makes the result reproducible.
    """
    if modulus_bits < MIN_UNSAFE_KEYSIZE:
        raise ValueError(f"modulus too small: {modulus_bits} < {MIN_UNSAFE_KEYSIZE} bits")
    if modulus_bits not in SAFE_KEYSIZES and not unsafe:
        raise ValueError(
            f"modulus of {modulus_bits} bits needs unsafe=True (allowed: {SAFE_KEYSIZES})"
        )
    rng = rng if rng is not None else random.SystemRandom()
    half = modulus_bits // 2
    for _ in range(_KEYGEN_ATTEMPTS):
        p = _random_prime(half, rng)
        q = _random_prime(modulus_bits - half, rng)
        n = p * q
        if p == q or n.bit_length() != modulus_bits:
            continue
        if math.gcd(n, (p - 1) * (q - 1)) != 1:
            continue
        pk = PublicKey(n)
        return KeyPair(pk, SecretKey(pk, p, q))
    raise KeyGenerationError(f"no valid {modulus_bits}-bit modulus after {_KEYGEN_ATTEMPTS} tries")


def raw_encrypt(pk: PublicKey, plaintext: int, r: int) -> int:
    nsq = pk.nsquare
    return (1 + plaintext * pk.n) % nsq * int(gmpy2.powmod(r, pk.n, nsq)) % nsq


def random_unit(pk: PublicKey, rng: random.Random) -> int:
    while True:
        r = rng.randrange(1, pk.n)
        if math.gcd(r, pk.n) == 1:
            return r


# --------------------------------------------------------------------------
# fixed point codec and packing


@dataclass(frozen=True)
class FixedPointCodec:
    """Scale and slot layout shared by every party of one aggregation."""

    scale: int = DEFAULT_SCALE
    slot_bits: int = DEFAULT_SLOT_BITS
    max_summands: int = 10

    def __post_init__(self):
        if self.scale < 1 or 10 ** self.scale_exponent != self.scale:
            raise ValueError(f"scale must be a power of ten, got {self.scale}")
        if self.max_summands < 1:
            raise ValueError("max_summands must be positive")
        if self.slot_bits < self.headroom_bits + 2:
            raise ValueError("slot_bits too small for the requested headroom")

    @property
    def scale_exponent(self) -> int:
        return len(str(self.scale)) - 1

    @property
    def headroom_bits(self) -> int:
        return (self.max_summands - 1).bit_length()

    @property
    def value_limit(self) -> int:
        """Exclusive bound on the magnitude of a single encoded value."""
        return 1 << (self.slot_bits - self.headroom_bits - 1)

    @property
    def sum_limit(self) -> int:
        """Exclusive bound on the magnitude of any slot sum that still unpacks."""
        return 1 << (self.slot_bits - 1)

    def slots_for(self, modulus_bits: int) -> int:
        # leave two bits so a packed value's magnitude stays below n/2
        return (modulus_bits - 2) // self.slot_bits


def _round_scaled(w: float, scale: int) -> int:
    num, den = float(w).as_integer_ratio()
    quotient, rem = divmod(num * scale, den)
    twice = 2 * rem
    if twice > den or (twice == den and quotient & 1):
        quotient += 1
    return quotient


def to_signed(value: int, n: int) -> int:
    value %= n
    return value - n if value > n // 2 else value


def encode_weights(weights: Iterable[float], codec: FixedPointCodec, n: int) -> list[int]:
    """Scale real weights to integers mod ``n`` (negatives in the upper half)."""
    out = []
    limit = codec.value_limit
    for i, w in enumerate(weights):
        if not math.isfinite(w):
            raise SlotOverflowError(f"weight {i} is not finite: {w}")
        v = _round_scaled(w, codec.scale)
        if abs(v) >= limit:
            raise SlotOverflowError(f"weight {i} = {w} exceeds slot capacity")
        out.append(v % n)
    return out


def decode_weights(
    values: Sequence[int], codec: FixedPointCodec, n: int, divisor: int = 1
) -> np.ndarray:
    """Invert :func:`encode_weights`, dividing by ``divisor`` as well as the scale."""
    if divisor < 1:
        raise ValueError("divisor must be >= 1")
    denom = codec.scale * divisor
    return np.array([to_signed(v, n) / denom for v in values], dtype=np.float64)


def pack_slots(signed_values: Sequence[int], slot_bits: int) -> int:
    acc = 0
    for v in reversed(signed_values):
        acc = (acc << slot_bits) + v
    return acc


def unpack_slots(packed: int, count: int, slot_bits: int) -> list[int]:
    """Split a signed integer into ``count`` balanced base-2**slot_bits digits.

    Raises DecryptionError when the value has digits beyond ``count``.
    """
    base = 1 << slot_bits
    half = base >> 1
    mask = base - 1
    digits = []
    for _ in range(count):
        d = packed & mask
        if d >= half:
            d -= base
        digits.append(d)
        packed = (packed - d) >> slot_bits
    if packed != 0:
        raise DecryptionError("packed plaintext has trailing data")
    return digits


def packed_length(weight_count: int, slots_per_ciphertext: int) -> int:
    return -(-weight_count // slots_per_ciphertext)


@dataclass(frozen=True)
class PackedCiphertext:
    ciphertexts: tuple[int, ...]
    weight_count: int
    slots_per_ciphertext: int
    codec: FixedPointCodec = field(default_factory=FixedPointCodec)

    def __post_init__(self):
        expected = packed_length(self.weight_count, self.slots_per_ciphertext)
        if len(self.ciphertexts) != expected:
            raise ValueError(
                f"{len(self.ciphertexts)} ciphertexts for {self.weight_count} weights, "
                f"expected {expected}"
            )

    def chunks(self, values: Sequence[int]) -> list[Sequence[int]]:
        k = self.slots_per_ciphertext
        return [values[i : i + k] for i in range(0, self.weight_count, k)]


def _check_slots_fit(pk: PublicKey, codec: FixedPointCodec, slots: int) -> None:
    if slots < 1:
        raise ValueError("slots_per_ciphertext must be positive")
    if slots * codec.slot_bits > pk.bits - 2:
        raise SlotOverflowError(
            f"{slots} slots of {codec.slot_bits} bits do not fit a {pk.bits}-bit modulus"
        )


def _pack_chunk(chunk: Sequence[int], codec: FixedPointCodec, n: int, limit: int) -> int:
    signed = [to_signed(v, n) for v in chunk]
    for v in signed:
        if abs(v) >= limit:
            raise SlotOverflowError(f"slot value {v} exceeds capacity")
    return pack_slots(signed, codec.slot_bits) % n


def encrypt_packed(
    pk: PublicKey,
    plaintext_slots: Sequence[int],
    codec: FixedPointCodec,
    rng: random.Random | None = None,
    slots_per_ciphertext: int | None = None,
) -> PackedCiphertext:
    """Encrypt encoded weights, ``slots_per_ciphertext`` of them per ciphertext."""
    if pk.n < 3:
        raise KeyMismatchError("invalid public key")
    rng = rng if rng is not None else random.SystemRandom()
    slots = slots_per_ciphertext or codec.slots_for(pk.bits)
    _check_slots_fit(pk, codec, slots)
    values = list(plaintext_slots)
    cts = []
    for i in range(0, len(values), slots):
        m = _pack_chunk(values[i : i + slots], codec, pk.n, codec.value_limit)
        cts.append(raw_encrypt(pk, m, random_unit(pk, rng)))
    return PackedCiphertext(tuple(cts), len(values), slots, codec)


def homomorphic_add(pk: PublicKey, a: PackedCiphertext, b: PackedCiphertext) -> PackedCiphertext:
    if a.codec != b.codec:
        raise KeyMismatchError("codec mismatch")
    if (a.weight_count, a.slots_per_ciphertext) != (b.weight_count, b.slots_per_ciphertext):
        raise KeyMismatchError("layout mismatch")
    nsq = pk.nsquare
    for c in a.ciphertexts + b.ciphertexts:
        if not 0 < c < nsq:
            raise KeyMismatchError("ciphertext outside Z_{n^2}; wrong public key?")
    cts = tuple(x * y % nsq for x, y in zip(a.ciphertexts, b.ciphertexts))
    return PackedCiphertext(cts, a.weight_count, a.slots_per_ciphertext, a.codec)


def _check_ciphertext(pk: PublicKey, c: int) -> None:
    if not 0 < c < pk.nsquare:
        raise DecryptionError("ciphertext outside Z_{n^2}")
    if math.gcd(c, pk.n) != 1:
        raise DecryptionError("ciphertext not coprime to n")


def decrypt_packed(sk: SecretKey, c: PackedCiphertext) -> list[int]:
    """Decrypt to per-slot values mod n (negatives in the upper half)."""
    pk = sk.public_key
    n = pk.n
    out: list[int] = []
    remaining = c.weight_count
    for ct in c.ciphertexts:
        _check_ciphertext(pk, ct)
        count = min(c.slots_per_ciphertext, remaining)
        digits = unpack_slots(to_signed(sk.raw_decrypt(ct), n), count, c.codec.slot_bits)
        out.extend(d % n for d in digits)
        remaining -= count
    return out


# --------------------------------------------------------------------------
# decryption proofs


@dataclass(frozen=True)
class DecryptionProof:
    randomness: tuple[int, ...]


def prove_decryption(
    sk: SecretKey, c: PackedCiphertext, claimed_plaintexts: Sequence[int]
) -> DecryptionProof:
    """Recover the randomness of every ciphertext, given its true plaintext."""
    pk = sk.public_key
    claimed = list(claimed_plaintexts)
    if len(claimed) != c.weight_count:
        raise ProofError("claimed plaintext length does not match ciphertext")
    rs = []
    for ct, chunk in zip(c.ciphertexts, c.chunks(claimed)):
        _check_ciphertext(pk, ct)
        try:
            m = _pack_chunk(chunk, c.codec, pk.n, c.codec.sum_limit)
        except SlotOverflowError as exc:
            raise ProofError(str(exc)) from exc
        if sk.raw_decrypt(ct) != m:
            raise ProofError("claimed plaintext is not the decryption")
        rs.append(sk.recover_randomness(ct, m))
    return DecryptionProof(tuple(rs))


def verify_decryption(
    pk: PublicKey,
    c: PackedCiphertext,
    claimed_plaintexts: Sequence[int],
    proof: DecryptionProof,
) -> bool:
    try:
        claimed = list(claimed_plaintexts)
        if len(claimed) != c.weight_count or len(proof.randomness) != len(c.ciphertexts):
            return False
        for ct, chunk, r in zip(c.ciphertexts, c.chunks(claimed), proof.randomness):
            if not 0 < r < pk.n:
                return False
            m = _pack_chunk(chunk, c.codec, pk.n, c.codec.sum_limit)
            if raw_encrypt(pk, m, r) != ct:
                return False
        return True
    except (SlotOverflowError, TypeError, ValueError):
        return False


# --------------------------------------------------------------------------
# signatures (Ed25519; deterministic over the exact bytes)

SigningKey = Ed25519PrivateKey


def generate_signing_key(rng: random.Random | None = None) -> SigningKey:
    if rng is None:
        return Ed25519PrivateKey.generate()
    return Ed25519PrivateKey.from_private_bytes(rng.getrandbits(256).to_bytes(32, "big"))


def verify_key_bytes(signing_key: SigningKey) -> bytes:
    return signing_key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def sign_message(signing_key: SigningKey, message: bytes) -> bytes:
    return signing_key.sign(message)


def verify_signature(verify_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(verify_key).verify(signature, message)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


# --------------------------------------------------------------------------
# wire format


def serialize_packed(c: PackedCiphertext) -> bytes:
    """Big-endian layout: u32 weight_count, u16 slots, u16 slot_bits,
    u64 scale exponent, u16 max_summands, u32 ciphertext count, then each
    ciphertext as u32 length + magnitude bytes."""
    parts = [
        struct.pack(
            ">IHHQHI",
            c.weight_count,
            c.slots_per_ciphertext,
            c.codec.slot_bits,
            c.codec.scale_exponent,
            c.codec.max_summands,
            len(c.ciphertexts),
        )
    ]
    for ct in c.ciphertexts:
        raw = ct.to_bytes((ct.bit_length() + 7) // 8, "big")
        parts.append(struct.pack(">I", len(raw)))
        parts.append(raw)
    return b"".join(parts)


_HEADER = struct.Struct(">IHHQHI")


def deserialize_packed(data: bytes, offset: int = 0) -> tuple[PackedCiphertext, int]:
    """Parse one packed ciphertext; returns it and the offset just past it."""
    try:
        wc, slots, slot_bits, exp, max_summands, count = _HEADER.unpack_from(data, offset)
        offset += _HEADER.size
        cts = []
        for _ in range(count):
            (length,) = struct.unpack_from(">I", data, offset)
            offset += 4
            if offset + length > len(data):
                raise ValueError("truncated ciphertext")
            cts.append(int.from_bytes(data[offset : offset + length], "big"))
            offset += length
    except struct.error as exc:
        raise ValueError(f"malformed packed ciphertext: {exc}") from exc
    codec = FixedPointCodec(scale=10**exp, slot_bits=slot_bits, max_summands=max_summands)
    return PackedCiphertext(tuple(cts), wc, slots, codec), offset

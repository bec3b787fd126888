import json
import random
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from helpers import THREE_PEER_WEIGHTS, three_peer_synergy
from p4l import envelope as env
from p4l import he

GOLDEN = Path(__file__).parent / "golden" / "three_peer_synergy.json"


@pytest.fixture(scope="module")
def chain():
    return three_peer_synergy()


def test_initial_envelope(keys512):
    r = random.Random(0)
    sk = he.generate_signing_key(r)
    a = env.make_address("A")
    e = env.create_initial_envelope(keys512, sk, np.zeros(4), 2, 5, a, rng=r)
    assert e.participants == (a,) and e.remaining == 2
    assert e.accumulated.weight_count == 4
    assert env.verify(e, he.verify_key_bytes(sk))
    with pytest.raises(env.SynergyTooSmallError, match="synergy too small"):
        env.create_initial_envelope(keys512, sk, np.zeros(4), 1, 5, a, rng=r)


def test_chain_sum_matches_plaintext_oracle(chain):
    keys = chain["keys"]
    n = keys.public_key.n
    codec = he.FixedPointCodec()
    total = [sum(he._round_scaled(w[j], codec.scale) for w in THREE_PEER_WEIGHTS) for j in range(4)]
    got = he.decrypt_packed(keys.secret_key, chain["envelopes"][2].accumulated)
    assert [he.to_signed(v, n) for v in got] == total


def test_chain_invariants(chain):
    es = chain["envelopes"]
    for k, e in enumerate(es):
        assert len(e.participants) == k + 1
        assert len(set(e.participants)) == len(e.participants)
        assert env.verify(e, he.verify_key_bytes(chain["signing"][k]))
        assert e.accumulated.weight_count == 4
    assert es[0].remaining + len(es[0].participants) - 1 == es[1].remaining + len(es[1].participants) - 1
    assert env.is_terminal(es[2]) and es[2].terminal and es[2].initiator_pk is None
    assert es[2].initiator == chain["addresses"][0]
    assert not env.is_terminal(es[1])


def test_final_aggregate_mean(chain):
    final = chain["final"]
    expect = np.mean(np.array(THREE_PEER_WEIGHTS), axis=0)
    assert final.participant_count == 3
    assert np.allclose(final.aggregate, expect, atol=1e-10, rtol=0)
    assert final.aggregate[0] == pytest.approx(0.6, abs=1e-12)
    pk = chain["keys"].public_key
    vk = he.verify_key_bytes(chain["signing"][0])
    assert env.verify_final_aggregate(final, pk, vk)


def test_final_aggregate_rejections(chain):
    final = chain["final"]
    pk = chain["keys"].public_key
    vk = he.verify_key_bytes(chain["signing"][0])
    other_vk = he.verify_key_bytes(chain["signing"][1])
    assert not env.verify_final_aggregate(final, pk, other_vk)
    bumped = replace(final, aggregate=(final.aggregate[0] + 1e-9,) + final.aggregate[1:])
    assert not env.verify_final_aggregate(env._signed(bumped, chain["signing"][0]), pk, vk)
    forged_sum = (final.plaintext_sum[0] + 1,) + final.plaintext_sum[1:]
    forged = env._signed(replace(final, plaintext_sum=forged_sum), chain["signing"][0])
    assert not env.verify_final_aggregate(forged, pk, vk)


def test_all_zero_weights_give_zero_aggregate(keys512):
    r = random.Random(3)
    sks = [he.generate_signing_key(r) for _ in range(4)]
    addrs = [env.make_address(i) for i in range(4)]
    e = env.create_initial_envelope(keys512, sks[0], np.zeros(3), 3, 0, addrs[0], rng=r)
    for i in (1, 2, 3):
        e = env.accumulate_and_forward(e, np.zeros(3), addrs[i], sks[i], i, r)
    final = env.finalize_aggregate(e, keys512, sks[0], 9)
    assert final.aggregate == (0.0, 0.0, 0.0) and final.participant_count == 4


def test_two_participants_below_minimum(keys512):
    r = random.Random(4)
    a, b = he.generate_signing_key(r), he.generate_signing_key(r)
    e = env.create_initial_envelope(keys512, a, np.ones(2), 2, 0, env.make_address("A"), rng=r)
    e = env.accumulate_and_forward(e, np.ones(2), env.make_address("B"), b, 1, r)
    e = env.to_terminal(e, b, 2)
    with pytest.raises(env.SynergyTooSmallError, match="synergy below minimum size"):
        env.finalize_aggregate(e, keys512, a, 3)


def test_accumulate_errors(chain):
    e0, e1 = chain["envelopes"][:2]
    sk_b = chain["signing"][1]
    with pytest.raises(env.DuplicateParticipantError):
        env.accumulate_and_forward(e1, np.zeros(4), chain["addresses"][1], sk_b, 1, random.Random(0))
    tampered_ct = replace(e0.accumulated, ciphertexts=(e0.accumulated.ciphertexts[0] ^ 1,))
    with pytest.raises(env.SignatureError):
        env.accumulate_and_forward(replace(e0, accumulated=tampered_ct), np.zeros(4),
                                   env.make_address("Z"), sk_b, 1, random.Random(0))
    with pytest.raises(env.SynergyExhaustedError):
        env.accumulate_and_forward(chain["envelopes"][2], np.zeros(4), env.make_address("Z"), sk_b, 1)
    with pytest.raises(env.EnvelopeError):
        env.accumulate_and_forward(e0, np.zeros(5), env.make_address("Z"), sk_b, 1, random.Random(0))


def test_any_field_mutation_breaks_signature(chain):
    e = chain["envelopes"][1]
    assert env.verify(e)
    mutations = [
        replace(e, remaining=e.remaining + 1),
        replace(e, timestamp=e.timestamp + 1),
        replace(e, participants=e.participants[:1] + (env.make_address("X"),)),
        replace(e, synergy_id=bytes(16)),
        replace(e, initiator_verify_key=bytes(32)),
        replace(e, terminal=True),
    ]
    for m in mutations:
        assert not env.verify(m)


def test_canonical_bytes_properties(chain):
    e = chain["envelopes"][1]
    assert env.canonical_bytes(e) == env.canonical_bytes(e)
    assert env.canonical_bytes(e) != env.canonical_bytes(replace(e, timestamp=e.timestamp + 1))
    for msg in chain["envelopes"] + [chain["final"]]:
        assert env.decode(env.encode(msg)) == msg


def test_plaintext_mode_round_trip():
    r = random.Random(1)
    sks = [he.generate_signing_key(r) for _ in range(3)]
    addrs = [env.make_address(i) for i in range(3)]
    e = env.create_initial_envelope(None, sks[0], np.array([0.3]), 2, 0, addrs[0])
    e = env.accumulate_and_forward(e, np.array([0.6]), addrs[1], sks[1], 1)
    e = env.accumulate_and_forward(e, np.array([0.9]), addrs[2], sks[2], 2)
    final = env.finalize_aggregate(e, None, sks[0], 3)
    assert final.aggregate[0] == pytest.approx(0.6, abs=1e-15)
    assert env.decode(env.encode(e)) == e
    assert env.verify_final_aggregate(final, None, he.verify_key_bytes(sks[0]))


def test_decode_rejects_garbage(chain):
    blob = env.encode(chain["envelopes"][0])
    with pytest.raises(env.EnvelopeError):
        env.decode(blob[:-5])
    with pytest.raises(env.EnvelopeError):
        env.decode(b"XYZ" + blob[3:])


def test_golden_three_peer_fixture(chain):
    fixture = json.loads(GOLDEN.read_text())
    assert [env.encode(e).hex() for e in chain["envelopes"]] == fixture["envelopes"]
    assert env.encode(chain["final"]).hex() == fixture["final"]

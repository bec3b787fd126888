"""Shared builders for protocol-level tests."""
import random

import numpy as np

from p4l import envelope as env
from p4l import he

THREE_PEER_WEIGHTS = ([0.3, -1.25, 2.0, 0.0], [0.6, 0.5, -2.0, 1e-10], [0.9, 0.25, 1.0, -3e-10])


def three_peer_synergy(key_bits=512, seed=123):
    """Deterministic A -> B -> C synergy; returns every message on the way."""
    r = random.Random(seed)
    keys = he.keygen(key_bits, r, unsafe=True)
    sig = [he.generate_signing_key(r) for _ in range(3)]
    addr = [env.make_address(c) for c in "ABC"]
    e0 = env.create_initial_envelope(keys, sig[0], np.array(THREE_PEER_WEIGHTS[0]), 2, 1000, addr[0], rng=r)
    e1 = env.accumulate_and_forward(e0, np.array(THREE_PEER_WEIGHTS[1]), addr[1], sig[1], 1010, r)
    e2 = env.accumulate_and_forward(e1, np.array(THREE_PEER_WEIGHTS[2]), addr[2], sig[2], 1020, r)
    final = env.finalize_aggregate(e2, keys, sig[0], 1030)
    return {"keys": keys, "signing": sig, "addresses": addr, "envelopes": [e0, e1, e2], "final": final}

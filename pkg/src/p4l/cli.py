"""Command-line entry point: ``p4l run | bench-he | verify-trace | selftest``."""
from __future__ import annotations

import argparse
import json
import logging
import random
import sys

import numpy as np

from . import he
from .experiment import ConfigError, ExperimentConfig, bench_he, expand_grid, load_config, run_experiment
from .trace import TraceParseError, verify_protocol_trace

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3
EXIT_SELFTEST = 4

log = logging.getLogger("p4l")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def cmd_run(args) -> int:
    overrides = _overrides(args.set)
    if args.output:
        overrides["output"] = args.output
    if args.seeds:
        overrides["seeds"] = [int(s) for s in args.seeds.split(",")]
    configs = load_config(args.config, overrides) if args.config else expand_grid({}, overrides)
    tables = run_experiment(configs, trace_dir=args.trace_dir)
    out = configs[0].output
    print(f"wrote {out}/metrics.csv and {out}/summary.csv ({len(tables)} runs)")
    if args.trace_dir:
        from pathlib import Path

        bad = 0
        for path in sorted(Path(args.trace_dir).glob("trace_*.jsonl")):
            report = verify_protocol_trace(path)
            if not report.ok:
                bad += 1
                print(f"{path}: {report.summary()}")
        if bad:
            return EXIT_INVARIANT
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        counts = [int(c) for c in args.counts.split(",")]
        res = bench_he(counts, key_bits=args.key_bits, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(f"bad --counts: {exc}") from None
    print(f"key_bits={res['key_bits']}")
    print("params,ciphertexts,encrypt_s,add_s,decrypt_s")
    for r in res["rows"]:
        print(f"{r['params']},{r['ciphertexts']},{r['encrypt_s']:.6f},{r['add_s']:.6f},{r['decrypt_s']:.6f}")
    for op, fit in res["fits"].items():
        print(f"fit {op}: slope={fit['slope']:.3e} s/param intercept={fit['intercept']:.3e} r2={fit['r2']:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        report = verify_protocol_trace(args.trace, max_retries=args.max_retries)
    except TraceParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as exc:
        print(f"cannot read trace: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(report.summary())
    return EXIT_OK if report.ok else EXIT_INVARIANT


def selftest(key_bits: int = 1024, trials: int = 20, seed: int = 0) -> list[str]:
    """Round-trip, homomorphic sums and proofs on a fresh key; returns failure messages."""
    failures = []
    rng = random.Random(seed)
    wrng = np.random.default_rng(seed)
    keys = he.keygen(key_bits, rng, unsafe=True)
    pk, sk, codec = keys.public_key, keys.secret_key, he.FixedPointCodec()
    for trial in range(trials):
        k = int(wrng.integers(2, 10))
        vecs = wrng.normal(0.0, 1.0, size=(k, 25))
        total = None
        for v in vecs:
            c = he.encrypt_packed(pk, he.encode_weights(v, codec, pk.n), codec, rng)
            total = c if total is None else he.homomorphic_add(pk, total, c)
        res = he.decrypt_packed(sk, total)
        expect = [sum(he.encode_weights([v[j] for v in vecs], codec, pk.n)[i] for i in range(k)) % pk.n
                  for j in range(vecs.shape[1])]
        if res != expect:
            failures.append(f"trial {trial}: homomorphic sum mismatch")
        proof = he.prove_decryption(sk, total, res)
        if not he.verify_decryption(pk, total, res, proof):
            failures.append(f"trial {trial}: valid proof rejected")
        bad = list(res)
        bad[0] = (bad[0] + 1) % pk.n
        if he.verify_decryption(pk, total, bad, proof):
            failures.append(f"trial {trial}: forged plaintext accepted")
    sig = he.generate_signing_key(rng)
    vk = he.verify_key_bytes(sig)
    if not he.verify_signature(vk, b"msg", he.sign_message(sig, b"msg")):
        failures.append("signature round trip failed")
    if he.verify_signature(vk, b"msh", he.sign_message(sig, b"msg")):
        failures.append("signature accepted for a different message")
    return failures


def cmd_selftest(args) -> int:
    failures = selftest(args.key_bits, args.trials, args.seed)
    for f in failures:
        print(f"FAIL {f}")
    print("selftest " + ("passed" if not failures else f"failed ({len(failures)})"))
    return EXIT_OK if not failures else EXIT_SELFTEST


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="p4l", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="run an experiment grid and write metrics CSVs")
    run.add_argument("--config", help="JSON config file")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    run.add_argument("--seeds", help="comma-separated seeds")
    run.add_argument("--output", help="output directory")
    run.add_argument("--trace-dir", help="write and verify JSON-lines protocol traces here")
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench-he", help="time packed encrypt/add/decrypt")
    bench.add_argument("--counts", default="1000,10000,100000")
    bench.add_argument("--key-bits", type=int, default=2048)
    bench.add_argument("--seed", type=int, default=0)
    bench.set_defaults(func=cmd_bench)

    ver = sub.add_parser("verify-trace", help="check protocol invariants in a trace")
    ver.add_argument("trace")
    ver.add_argument("--max-retries", type=int, default=None)
    ver.set_defaults(func=cmd_verify)

    st = sub.add_parser("selftest", help="cryptographic self-test")
    st.add_argument("--key-bits", type=int, default=1024)
    st.add_argument("--trials", type=int, default=20)
    st.add_argument("--seed", type=int, default=0)
    st.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except he.HEError as exc:
        print(f"crypto failure: {exc}", file=sys.stderr)
        return EXIT_SELFTEST


if __name__ == "__main__":
    sys.exit(main())

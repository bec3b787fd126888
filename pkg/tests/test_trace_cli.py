import json

import pytest

from p4l import cli
from p4l.experiment import ConfigError, ExperimentConfig, bench_he, expand_grid, load_config
from p4l.sim import protocol_stress, scripted_scenario
from p4l.trace import TraceParseError, verify_protocol_trace


@pytest.fixture(scope="module")
def clean_lines():
    trace, _ = protocol_stress(num_synergies=40, num_peers=15, drop_prob=0.1,
                               forced_departure_prob=0.05, seed=3)
    return trace.lines()


def test_clean_trace_passes(clean_lines):
    report = verify_protocol_trace(clean_lines)
    assert report.ok, report.summary()
    assert report.initiated == 40 == report.completed + report.failed


def test_injected_duplicate_participation(clean_lines):
    acc = next(line for line in clean_lines if '"accumulate"' in line)
    report = verify_protocol_trace(clean_lines + [acc])
    assert [v.kind for v in report.violations] == ["duplicate_participation"]
    assert report.violations[0].line_no == len(clean_lines) + 1


def test_injected_second_terminal_and_orphan(clean_lines):
    done = next(line for line in clean_lines if '"complete"' in line or '"fail"' in line)
    orphan = json.dumps({"event": "complete", "t": 1, "peer": "aa", "synergy": "ff" * 16,
                         "n": 3, "proof_ok": True, "participants": ["a", "b", "c"]})
    kinds = {v.kind for v in verify_protocol_trace(clean_lines + [done, orphan]).violations}
    assert kinds == {"conservation"}


def test_liveness_and_size_and_proof_violations():
    head = json.dumps({"event": "header", "schema": 1, "max_retries": 2, "min_synergy_size": 3})
    recs = [
        {"event": "initiate", "t": 0, "peer": "a", "synergy": "s1", "budget": 3, "deadline": 2000},
        {"event": "complete", "t": 2500, "peer": "a", "synergy": "s1", "n": 2, "proof_ok": False,
         "participants": ["a", "b"]},
        {"event": "initiate", "t": 0, "peer": "a", "synergy": "s2", "budget": 3, "deadline": 2000},
    ] + [{"event": "forward", "t": i, "peer": "a", "synergy": "s2", "to": "b"} for i in range(4)]
    report = verify_protocol_trace([head] + [json.dumps(r) for r in recs])
    kinds = sorted(v.kind for v in report.violations)
    assert kinds == ["liveness", "liveness", "proof", "retry_bound", "synergy_size"]


def test_truncated_trace_reports_line(tmp_path, clean_lines, capsys):
    text = "\n".join(clean_lines)
    cut = text[: len(text) - 10]
    path = tmp_path / "t.jsonl"
    path.write_text(cut)
    with pytest.raises(TraceParseError) as err:
        verify_protocol_trace(path)
    assert err.value.line_no == len(clean_lines)
    assert cli.main(["verify-trace", str(path)]) == cli.EXIT_INVARIANT
    assert f"line {len(clean_lines)}" in capsys.readouterr().err


def test_unsupported_schema():
    with pytest.raises(TraceParseError):
        verify_protocol_trace(['{"event": "header", "schema": 99}'])
    with pytest.raises(TraceParseError):
        verify_protocol_trace(['{"t": 0}'])


def test_cli_verify_trace_exit_codes(tmp_path):
    trace, _ = scripted_scenario("early_return")
    good = tmp_path / "good.jsonl"
    trace.write(good)
    assert cli.main(["verify-trace", str(good)]) == cli.EXIT_OK
    bad = tmp_path / "bad.jsonl"
    acc = next(line for line in trace.lines() if '"accumulate"' in line)
    bad.write_text("\n".join(trace.lines() + [acc]) + "\n")
    assert cli.main(["verify-trace", str(bad)]) == cli.EXIT_INVARIANT
    assert cli.main(["verify-trace", str(tmp_path / "missing.jsonl")]) == cli.EXIT_CONFIG


def test_cli_usage_and_config_errors(tmp_path, capsys):
    assert cli.main([]) == cli.EXIT_CONFIG
    assert cli.main(["frobnicate"]) == cli.EXIT_CONFIG
    assert cli.main(["run", "--set", "task=mnist", "--output", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "unknown task id" in capsys.readouterr().err
    assert cli.main(["run", "--set", "no_such_key=1", "--output", str(tmp_path)]) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["run", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["bench-he", "--counts", "0,10"]) == cli.EXIT_CONFIG
    assert cli.main(["bench-he", "--counts", "x"]) == cli.EXIT_CONFIG


def test_bench_he_rejects_bad_counts():
    for counts in ([], [0], [10, 5], [-3]):
        with pytest.raises(ValueError):
            bench_he(counts, key_bits=512)


def test_cli_bench_small(capsys):
    assert cli.main(["bench-he", "--counts", "100,200,400", "--key-bits", "512"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "params,ciphertexts" in out and "fit encrypt" in out


def test_cli_selftest(capsys):
    assert cli.main(["selftest", "--key-bits", "512", "--trials", "3"]) == cli.EXIT_OK
    assert "selftest passed" in capsys.readouterr().out


def test_grid_expansion():
    cells = expand_grid({"grid": {"synergy_size": list(range(3, 11))},
                         "synergy_size_law": "fixed", "num_peers": 30})
    assert [c.sim.synergy_size for c in cells] == list(range(3, 11))
    assert len({c.config_hash for c in cells}) == 8
    assert all(c.sim.num_peers == 30 for c in cells)


def test_config_hash_ignores_seeds_and_output():
    a = ExperimentConfig()
    assert a.config_hash == a.with_overrides(seeds=[1, 2], output="x").config_hash
    assert a.config_hash != a.with_overrides(num_peers=10).config_hash
    with pytest.raises(ConfigError):
        ExperimentConfig.from_flat({"num_peers": 0})


def test_load_config_with_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"task": "imbalanced", "grid": {"byzantine_fraction": [0.0, 0.1]},
                                "attack_kind": "noisy_weights"}))
    cells = load_config(path, {"num_peers": 20})
    assert [c.attack.byzantine_fraction for c in cells] == [0.0, 0.1]
    assert all(c.sim.num_peers == 20 and c.metric == "auc" for c in cells)


def test_cli_run_is_reproducible(tmp_path):
    cfg = tmp_path / "small.json"
    cfg.write_text(json.dumps({
        "task": "imbalanced", "partition": "iid", "samples_per_peer": 20, "num_peers": 15,
        "mrt": 2, "rounds": 20, "encryption_enabled": False, "fl_rounds": 3,
        "baselines": ["fl", "alone"], "max_epochs": 5,
    }))
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = cli.main(["run", "--config", str(cfg), "--seeds", "0,1", "--output", str(out),
                         "--trace-dir", str(tmp_path / f"tr_{name}")])
        assert code == cli.EXIT_OK
        outs.append(((out / "metrics.csv").read_bytes(), (out / "summary.csv").read_bytes()))
    assert outs[0] == outs[1]
    header = outs[0][0].decode().splitlines()[0]
    assert header == "config_hash,seed,series,attack_kind,byzantine_fraction,round,metric_name,mean,std,n_peers"
    assert b",alone," in outs[0][0] and b",fl," in outs[0][0] and b",p4l," in outs[0][0]

"""Rewrite the golden fixtures.  Run only when a wire or trace format change is intended:

    python tests/golden/regenerate.py
"""
import json
import sys
from pathlib import Path

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE.parent))

from helpers import three_peer_synergy  # noqa: E402

from p4l import envelope as env  # noqa: E402
from p4l.sim import SCENARIOS, scripted_scenario  # noqa: E402


def main():
    s = three_peer_synergy()
    fixture = {
        "envelopes": [env.encode(e).hex() for e in s["envelopes"]],
        "final": env.encode(s["final"]).hex(),
    }
    (HERE / "three_peer_synergy.json").write_text(json.dumps(fixture, indent=1) + "\n")
    for name in SCENARIOS:
        trace, _ = scripted_scenario(name)
        (HERE / f"churn_{name}.jsonl").write_text("\n".join(trace.lines()) + "\n")


if __name__ == "__main__":
    main()

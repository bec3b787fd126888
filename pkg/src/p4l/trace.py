"""Replay a JSON-lines protocol trace and check the protocol invariants."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

SUPPORTED_SCHEMAS = (1,)


class TraceParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class Violation:
    kind: str
    synergy: str | None
    line_no: int
    detail: str

    def __str__(self) -> str:
        where = f" synergy {self.synergy[:12]}" if self.synergy else ""
        return f"[{self.kind}] line {self.line_no}{where}: {self.detail}"


@dataclass
class TraceReport:
    events: int = 0
    initiated: int = 0
    completed: int = 0
    failed: int = 0
    violations: list[Violation] = field(default_factory=list)
    # message-bound excesses; chains fork when a beacon is lost, so these are notes
    audit: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        head = (f"{self.events} events, {self.initiated} synergies: "
                f"{self.completed} completed, {self.failed} failed, "
                f"{len(self.violations)} violations, {len(self.audit)} over message bound")
        return "\n".join([head, *(str(v) for v in self.violations)])


@dataclass
class _Synergy:
    initiator: str
    start: int
    budget: int
    deadline: int
    line_no: int
    terminal: str | None = None
    participants: int = 1
    forwards: int = 0
    returns: int = 0
    broadcast: int = 0


def parse_trace(lines: Iterable[str]) -> tuple[dict, list[tuple[int, dict]]]:
    header: dict = {}
    records = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(line_no, f"malformed JSON ({exc.msg})") from None
        if not isinstance(rec, dict) or "event" not in rec:
            raise TraceParseError(line_no, "record has no 'event' field")
        if rec["event"] == "header":
            if rec.get("schema") not in SUPPORTED_SCHEMAS:
                raise TraceParseError(line_no, f"unsupported schema {rec.get('schema')!r}")
            header = rec
            continue
        if "t" not in rec or "peer" not in rec:
            raise TraceParseError(line_no, "record lacks 't' or 'peer'")
        records.append((line_no, rec))
    return header, records


def verify_protocol_trace(
    source: str | Path | Iterable[str],
    max_retries: int | None = None,
    min_synergy_size: int | None = None,
) -> TraceReport:
    """Check liveness, single participation, retry bounds and conservation.

    Raises :class:`TraceParseError` on malformed input.
    """
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            header, records = parse_trace(fh)
    else:
        header, records = parse_trace(source)
    R = max_retries if max_retries is not None else header.get("max_retries", 2)
    min_n = min_synergy_size if min_synergy_size is not None else header.get("min_synergy_size", 3)

    report = TraceReport(events=len(records))
    syn: dict[str, _Synergy] = {}
    accumulated: set[tuple[str, str]] = set()
    forwards: Counter = Counter()
    last_line = 0

    def flag(kind, sid, line_no, detail):
        report.violations.append(Violation(kind, sid, line_no, detail))

    for line_no, rec in records:
        last_line = line_no
        ev, sid, peer, t = rec["event"], rec.get("synergy"), rec["peer"], rec["t"]
        s = syn.get(sid) if sid is not None else None
        if ev == "initiate":
            if sid in syn:
                flag("conservation", sid, line_no, "synergy initiated twice")
                continue
            syn[sid] = _Synergy(peer, t, rec["budget"], rec["deadline"], line_no)
            report.initiated += 1
        elif ev in ("complete", "fail"):
            if s is None:
                flag("conservation", sid, line_no, f"{ev} without initiate")
                continue
            if s.terminal is not None:
                flag("conservation", sid, line_no, f"second terminal state ({s.terminal} then {ev})")
                continue
            s.terminal = ev
            if t > s.deadline:
                flag("liveness", sid, line_no, f"terminated at {t} after deadline {s.deadline}")
            if ev == "complete":
                report.completed += 1
                n = rec.get("n", 0)
                parts = rec.get("participants", [])
                if n < min_n:
                    flag("synergy_size", sid, line_no, f"completed with N={n} < {min_n}")
                if not rec.get("proof_ok", False):
                    flag("proof", sid, line_no, "decryption proof did not verify")
                if len(set(parts)) != len(parts):
                    flag("duplicate_participation", sid, line_no, "repeated participant in final list")
                s.broadcast = max(0, n - 1)
            else:
                report.failed += 1
        elif ev == "accumulate":
            key = (peer, sid)
            if key in accumulated:
                flag("duplicate_participation", sid, line_no, f"peer {peer[:8]} accumulated twice")
            accumulated.add(key)
            if s is not None:
                s.participants += 1
        elif ev == "forward":
            forwards[(peer, sid)] += 1
            attempt = rec.get("attempt", forwards[(peer, sid)])
            if attempt > R + 1 or forwards[(peer, sid)] > R + 1:
                flag("retry_bound", sid, line_no, f"peer {peer[:8]} forward attempt {attempt} > {R + 1}")
            if s is not None:
                s.forwards += 1
        elif ev == "return":
            if s is not None:
                s.returns += 1

    for sid, s in syn.items():
        if s.terminal is None:
            flag("liveness", sid, last_line, f"no terminal state (deadline {s.deadline})")
        bound = s.budget * (R + 1) + (R + 1) + s.broadcast
        sent = s.forwards + s.returns + s.broadcast
        if sent > bound:
            report.audit.append(
                Violation("message_bound", sid, s.line_no, f"{sent} messages > bound {bound}")
            )
    return report

"""Serializable trajectory records and trace files.

A trajectory record is one line of JSON describing a full plan/execute
run: the user prompt, the plan, and per subtask the input grid plus the
judged rounds of the execution loop. Field names are part of the on-disk
contract and are pinned by golden-file tests.

Traces are append-only JSON lines describing inference events in order;
`clock` is a logical event counter (model invocations and decode steps,
not wall time) so that identical seeds give byte-identical traces.
"""

import json
from dataclasses import dataclass, field

from .errors import ValidationError

RECORD_VERSION = 1
TRACE_VERSION = 1

SYSTEM_TEXT = "GRID AGENT"


@dataclass
class MicroNodeRecord:
    """One judged round: summary + verdict, then the action taken (if any).

    `action_supervised` is False for deliberately injected wrong actions:
    they stay in the context (their images are still generation targets)
    but the action text itself is not used as a text label.
    """

    state_text: str | None = None
    reward: str | None = None
    action: str | None = None
    action_grid: str | None = None
    action_supervised: bool = True


@dataclass
class SubtaskRecord:
    instruction: str
    input: str | None = None  # grid text; None means generate-from-scratch
    nodes: list = field(default_factory=list)
    outcome_grid: str | None = None
    outcome_text: str | None = None


@dataclass
class TrajectoryRecord:
    seed: int
    user: str
    plan: list = field(default_factory=list)
    subtasks: list = field(default_factory=list)
    final: str = "DONE"
    kind: str = "macro"
    v: int = RECORD_VERSION


_NODE_KEYS = {"state_text", "reward", "action", "action_grid", "action_supervised"}
_SUBTASK_KEYS = {"instruction", "input", "nodes", "outcome_grid", "outcome_text"}
_RECORD_KEYS = {"v", "kind", "seed", "user", "plan", "subtasks", "final"}


def record_to_json_line(rec: TrajectoryRecord) -> str:
    obj = {
        "v": rec.v,
        "kind": rec.kind,
        "seed": rec.seed,
        "user": rec.user,
        "plan": list(rec.plan),
        "subtasks": [
            {
                "instruction": s.instruction,
                "input": s.input,
                "nodes": [
                    {
                        "state_text": n.state_text,
                        "reward": n.reward,
                        "action": n.action,
                        "action_grid": n.action_grid,
                        "action_supervised": n.action_supervised,
                    }
                    for n in s.nodes
                ],
                "outcome_grid": s.outcome_grid,
                "outcome_text": s.outcome_text,
            }
            for s in rec.subtasks
        ],
        "final": rec.final,
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def record_from_json_line(line: str) -> TrajectoryRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise ValidationError(f"bad record line: {e}") from None
    if not isinstance(obj, dict) or set(obj) != _RECORD_KEYS:
        raise ValidationError(f"record keys mismatch: {sorted(obj) if isinstance(obj, dict) else obj}")
    if obj["v"] != RECORD_VERSION:
        raise ValidationError(f"unsupported record version {obj['v']}")
    subtasks = []
    for s in obj["subtasks"]:
        if set(s) != _SUBTASK_KEYS:
            raise ValidationError(f"subtask keys mismatch: {sorted(s)}")
        nodes = []
        for n in s["nodes"]:
            if set(n) != _NODE_KEYS:
                raise ValidationError(f"node keys mismatch: {sorted(n)}")
            nodes.append(MicroNodeRecord(**n))
        subtasks.append(SubtaskRecord(s["instruction"], s["input"], nodes,
                                      s["outcome_grid"], s["outcome_text"]))
    return TrajectoryRecord(seed=obj["seed"], user=obj["user"], plan=list(obj["plan"]),
                            subtasks=subtasks, final=obj["final"], kind=obj["kind"])


def load_records(path) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(record_from_json_line(line))
    return records


# ---------------------------------------------------------------------------
# Inference traces
# ---------------------------------------------------------------------------

TRACE_EVENTS = (
    "run_start", "plan", "subtask_start", "state", "verdict", "action",
    "image", "outcome", "final", "error", "run_end",
)


class TraceWriter:
    """Collects trace events; lines are deterministic given the event stream."""

    def __init__(self):
        self.lines: list[str] = []
        self._clock = 0

    def emit(self, event: str, **payload) -> None:
        if event not in TRACE_EVENTS:
            raise ValidationError(f"unknown trace event {event!r}")
        obj = {"v": TRACE_VERSION, "clock": self._clock, "event": event}
        obj.update(payload)
        self.lines.append(json.dumps(obj, sort_keys=True, separators=(",", ":")))
        self._clock += 1

    def text(self) -> str:
        return "\n".join(self.lines) + "\n" if self.lines else ""

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.text())


def validate_trace(lines) -> None:
    """Replay a trace and check schema, clock order, and event ordering."""
    last_clock = -1
    pending_states: set[tuple] = set()
    for i, line in enumerate(lines):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValidationError(f"trace line {i}: {e}") from None
        if obj.get("v") != TRACE_VERSION:
            raise ValidationError(f"trace line {i}: bad version {obj.get('v')}")
        if obj.get("event") not in TRACE_EVENTS:
            raise ValidationError(f"trace line {i}: unknown event {obj.get('event')}")
        clock = obj.get("clock")
        if not isinstance(clock, int) or clock <= last_clock:
            raise ValidationError(f"trace line {i}: clock not increasing")
        last_clock = clock
        if obj["event"] == "state":
            pending_states.add((obj.get("subtask"), obj.get("round")))
        if obj["event"] == "verdict":
            key = (obj.get("subtask"), obj.get("round"))
            if key not in pending_states:
                raise ValidationError(f"trace line {i}: verdict before its state event")

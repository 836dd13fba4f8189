"""Held-out evaluation of a runner, judged by the task oracle.

Single-op tasks measure raw edit skill (one action allowed); composite
tasks are run both with the full self-check budget and with a single
round, so the value of revision shows up as the difference. Task streams
are seed-disjoint from training. The scripted oracle runner answers every
decode from the task semantics and serves as the harness upper bound.
"""

from dataclasses import dataclass

from . import vocab
from .codec import Grid
from .sequence import SegmentKind
from .tasks import (EditOp, TaskSpec, apply_edit, corrective_op, generate_task,
                    judge, probe_text, task_rng)


class OracleRunner:
    """Perfect scripted agent: answers decodes from the task definition.

    Mirrors the runner protocol; every decode appends the same slot shape
    a neural runner would, so traces and layouts stay comparable.
    """

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        self.op: EditOp | None = None
        self.goal: Grid | None = None
        self.cur: Grid | None = None
        self.last_action: EditOp | None = None
        self.forward_calls = 0

    def on_task_start(self, user_text: str, initial: Grid) -> None:
        pass

    def on_subtask_start(self, instruction: str, input_grid: Grid) -> None:
        self.op = EditOp.from_text(instruction)
        self.cur = input_grid
        self.goal = apply_edit(input_grid, self.op)

    def _text_for(self, kind: SegmentKind) -> str:
        if kind == SegmentKind.PLAN:
            return None  # handled separately (needs SEP separators)
        if kind == SegmentKind.MICRO_STATE_TEXT:
            return probe_text(self.op, self.cur)
        if kind == SegmentKind.MICRO_REWARD:
            return judge(self.cur, self.goal)
        if kind == SegmentKind.MICRO_ACTION_TEXT:
            self.last_action = corrective_op(self.op, self.cur, self.goal)
            return self.last_action.to_text()
        if kind == SegmentKind.FINAL_ANSWER:
            return "DONE"
        raise ValueError(f"oracle cannot decode segment kind {kind!r}")

    def decode_text_segment(self, builder, kind, step, node, width, scheme) -> list:
        if kind == SegmentKind.PLAN:
            content: list[int] = []
            for i, group in enumerate(self.spec.decomposition):
                if i:
                    content.append(vocab.SEP_ID)
                content.extend(vocab.encode(group[0].to_text()))
        else:
            content = vocab.encode(self._text_for(kind))
        builder.add_text_segment(kind, content, width, step=step, node=node)
        return content

    def generate_image_segment(self, builder, kind, step, node, rng, scheme,
                               flow_steps=None) -> Grid:
        grid = apply_edit(self.cur, self.last_action)
        self.cur = grid
        builder.add_image_segment(kind, grid, include_gen=True, include_und=False,
                                  step=step, node=node)
        return grid


@dataclass
class EvalMetrics:
    n_single: int
    single_success: float
    n_composite: int
    composite_selfcheck_success: float
    composite_single_round_success: float
    mean_rounds: float
    unresolved_rate: float
    holdout_success: float
    n_holdout: int

    def rows(self) -> list:
        return [
            ("single_tasks", self.n_single),
            ("single_success", round(self.single_success, 4)),
            ("composite_tasks", self.n_composite),
            ("composite_selfcheck_success", round(self.composite_selfcheck_success, 4)),
            ("composite_single_round_success", round(self.composite_single_round_success, 4)),
            ("mean_rounds", round(self.mean_rounds, 4)),
            ("unresolved_rate", round(self.unresolved_rate, 4)),
            ("holdout_tasks", self.n_holdout),
            ("holdout_success", round(self.holdout_success, 4)),
        ]

    def to_tsv(self) -> str:
        return "\n".join(f"{k}\t{v}" for k, v in self.rows()) + "\n"


def _run_task(make_runner, spec: TaskSpec, max_rounds: int, seed: int, flow_steps):
    from .errors import DecodeError
    from .planner import orchestrate

    runner = make_runner(spec)
    try:
        traj = orchestrate(runner, spec.prompt, spec.initial, max_rounds=max_rounds,
                           seed=seed, flow_steps=flow_steps)
    except DecodeError:
        # an unparseable plan counts as a failed task, not a crashed suite
        return False, 0, True
    ok = judge(traj.final_grid, spec.goal) == "PASS"
    rounds = sum(len(r.result.transitions) if r.result else 0 for r in traj.subtask_runs)
    unresolved = any(r.outcome_verdict != "PASS" for r in traj.subtask_runs)
    return ok, rounds, unresolved


def eval_suite(make_runner, seed: int, n_single: int = 50, n_composite: int = 24,
               n_holdout: int = 8, max_rounds: int = 3, flow_steps: int | None = None) -> EvalMetrics:
    """Oracle-judged success rates over held-out seeded tasks."""
    single_ok = 0
    for i in range(n_single):
        spec = generate_task(task_rng("eval", seed, i), n_subtasks=1)
        ok, _, _ = _run_task(make_runner, spec, 1, seed + i, flow_steps)
        single_ok += ok
    comp_self = 0
    comp_one = 0
    total_rounds = 0
    unresolved = 0
    for i in range(n_composite):
        rng = task_rng("eval", seed, 10_000 + i)
        n_sub = 2 + int(rng.integers(0, 2))
        spec = generate_task(rng, n_subtasks=n_sub)
        ok, rounds, unres = _run_task(make_runner, spec, max_rounds, seed + 555 + i, flow_steps)
        comp_self += ok
        total_rounds += rounds
        unresolved += unres
        ok1, _, _ = _run_task(make_runner, spec, 1, seed + 555 + i, flow_steps)
        comp_one += ok1
    hold_ok = 0
    for i in range(n_holdout):
        rng = task_rng("eval", seed, 20_000 + i)
        spec = generate_task(rng, n_subtasks=2, holdout=True)
        ok, _, _ = _run_task(make_runner, spec, max_rounds, seed + 999 + i, flow_steps)
        hold_ok += ok
    return EvalMetrics(
        n_single=n_single,
        single_success=single_ok / n_single if n_single else 0.0,
        n_composite=n_composite,
        composite_selfcheck_success=comp_self / n_composite if n_composite else 0.0,
        composite_single_round_success=comp_one / n_composite if n_composite else 0.0,
        mean_rounds=total_rounds / max(1, n_composite),
        unresolved_rate=unresolved / max(1, n_composite),
        holdout_success=hold_ok / n_holdout if n_holdout else 0.0,
        n_holdout=n_holdout,
    )

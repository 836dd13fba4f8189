"""Task-level planning and orchestration.

`decode_plan` turns a user prompt into an ordered list of subtask
instructions. `orchestrate` runs them in order: each subtask starts from
the previous one's outcome grid and is executed by the self-check loop;
outcomes are appended to a growing task-level layout, and the final
answer is decoded over that layout under the planner-tier mask, which
hides every execution-round token. Subtask failures are recorded in the
trajectory rather than raised.
"""

from dataclasses import dataclass, field

from . import vocab
from .codec import Grid, default_codebook
from .decoding import decode_with_retry
from .errors import DecodeError
from .mdp import SelfCheckResult, run_self_check
from .records import (MicroNodeRecord, SubtaskRecord, TraceWriter,
                      TrajectoryRecord)
from .sequence import (FINAL_WIDTH, OP_WIDTH, PLAN_WIDTH, REWARD_WIDTH,
                       STATE_WIDTH, LayoutBuilder, SegmentKind)


@dataclass
class Plan:
    """Ordered subtask instructions, each a parseable edit clause."""

    subtasks: list

    def __post_init__(self):
        from .tasks import EditOp

        if not 1 <= len(self.subtasks) <= 3:
            raise DecodeError(f"plan must have 1-3 subtasks, got {len(self.subtasks)}")
        for text in self.subtasks:
            EditOp.from_text(text)


@dataclass
class SubtaskRun:
    instruction: str
    input_grid: Grid
    result: SelfCheckResult | None
    outcome_grid: Grid
    outcome_verdict: str
    error: str | None = None


@dataclass
class MacroTrajectory:
    user: str
    plan: Plan
    subtask_runs: list = field(default_factory=list)
    final_text: str | None = None
    final_grid: Grid | None = None

    def to_record(self, seed: int = 0) -> TrajectoryRecord:
        subs = []
        for run in self.subtask_runs:
            nodes = []
            if run.result is not None:
                for tr in run.result.transitions:
                    nodes.append(MicroNodeRecord(
                        state_text=tr.source.state_text, reward=tr.trigger_text,
                        action=tr.action_text, action_grid=tr.action_grid.to_text()))
                fin = run.result.final_node
                nodes.append(MicroNodeRecord(state_text=fin.state_text,
                                             reward=run.result.final_verdict))
            subs.append(SubtaskRecord(
                instruction=run.instruction, input=run.input_grid.to_text(), nodes=nodes,
                outcome_grid=run.outcome_grid.to_text(), outcome_text=run.outcome_verdict))
        return TrajectoryRecord(seed=seed, user=self.user, plan=list(self.plan.subtasks),
                                subtasks=subs, final=self.final_text or "")


def _parse_plan(ids: list) -> Plan:
    parts: list[list[int]] = [[]]
    for t in ids:
        if t == vocab.SEP_ID:
            parts.append([])
        else:
            parts[-1].append(t)
    texts = [vocab.decode(p) for p in parts if p]
    if not texts:
        raise DecodeError("empty plan")
    return Plan(texts)


def decode_plan(runner, user_text: str, initial: Grid, builder: LayoutBuilder | None = None) -> tuple:
    """Greedy-decode the plan segment for a prompt; returns (plan, builder)."""
    b = builder or LayoutBuilder(default_codebook())
    b.add_system_segment(user_text=user_text, task_grid=initial)
    _, plan = decode_with_retry(
        b,
        lambda: runner.decode_text_segment(b, SegmentKind.PLAN, -1, -1, PLAN_WIDTH, "macro"),
        _parse_plan, "plan")
    return plan, b


def orchestrate(runner, user_text: str, initial: Grid, max_rounds: int = 3,
                seed: int = 0, flow_steps: int | None = None,
                trace: TraceWriter | None = None) -> MacroTrajectory:
    """Plan, execute subtasks in order, synthesize the final answer.

    The task-level layout accumulates every segment as it is produced
    (execution rounds are copied in as teacher tokens); the final answer
    is decoded over it under the planner-tier mask.
    """
    runner.on_task_start(user_text, initial)
    if trace is not None:
        trace.emit("run_start", user=user_text, grid=initial.to_text(), seed=seed,
                   max_rounds=max_rounds)
    plan, b = decode_plan(runner, user_text, initial)
    if trace is not None:
        trace.emit("plan", subtasks=list(plan.subtasks))
    traj = MacroTrajectory(user=user_text, plan=plan)
    current = initial
    for m, instruction in enumerate(plan.subtasks):
        if trace is not None:
            trace.emit("subtask_start", subtask=m, instruction=instruction,
                       grid=current.to_text())
        b.add_text_segment(SegmentKind.SUBTASK_INSTRUCTION, vocab.encode(instruction),
                           OP_WIDTH, step=m)
        b.add_image_segment(SegmentKind.MICRO_STATE_IMAGE, current, include_gen=False,
                            include_und=True, step=m, node=0)
        input_grid = current
        error = None
        try:
            result = run_self_check(runner, instruction, current, max_rounds=max_rounds,
                                    seed=seed, flow_steps=flow_steps, trace=trace,
                                    subtask_index=m)
            outcome = result.final_grid
            verdict = "PASS" if result.resolved else "FAIL"
        except DecodeError as e:
            result = None
            outcome = current
            verdict = "FAIL"
            error = str(e)
            if trace is not None:
                trace.emit("error", subtask=m, message=error)
        _copy_rounds_into_layout(b, m, result)
        b.add_outcome_segment(outcome, verdict, step=m)
        if trace is not None:
            trace.emit("outcome", subtask=m, grid=outcome.to_text(), verdict=verdict)
        traj.subtask_runs.append(SubtaskRun(instruction, input_grid, result, outcome,
                                            verdict, error))
        current = outcome
    final_ids = runner.decode_text_segment(b, SegmentKind.FINAL_ANSWER, -1, -1,
                                           FINAL_WIDTH, "macro")
    traj.final_text = vocab.decode(final_ids)
    traj.final_grid = current
    if trace is not None:
        trace.emit("final", text=traj.final_text, grid=current.to_text())
        trace.emit("run_end")
    return traj


def _copy_rounds_into_layout(b: LayoutBuilder, m: int, result: SelfCheckResult | None) -> None:
    """Teacher-force the executed rounds into the task-level layout so that
    outcome and final-answer positions match the training distribution."""
    if result is None:
        return
    rounds = []
    for tr in result.transitions:
        rounds.append((tr.source.state_text, tr.trigger_text, tr.action_text, tr.action_grid))
    fin = result.final_node
    rounds.append((fin.state_text, result.final_verdict, None, None))
    for r, (state_text, reward_text, action_text, action_grid) in enumerate(rounds):
        if state_text is not None:
            b.add_text_segment(SegmentKind.MICRO_STATE_TEXT, vocab.encode(state_text),
                               STATE_WIDTH, step=m, node=r)
        if reward_text is not None:
            b.add_text_segment(SegmentKind.MICRO_REWARD, vocab.encode(reward_text),
                               REWARD_WIDTH, step=m, node=r)
        if action_text is not None:
            b.add_text_segment(SegmentKind.MICRO_ACTION_TEXT, vocab.encode(action_text),
                               OP_WIDTH, step=m, node=r)
        if action_grid is not None:
            b.add_image_segment(SegmentKind.MICRO_ACTION_IMAGE, action_grid,
                                include_gen=True, include_und=True, step=m, node=r)
    return

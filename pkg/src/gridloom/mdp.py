"""Self-checked subtask execution as a Markov decision process.

One judged round: summarize the current state, judge it against the
subtask objective, and if the judgment fails, emit an editing action and
apply it by generating the edited image. Each round runs in a fresh
window containing only the system words, the subtask instruction, and
the current state, so a round's outputs cannot depend on anything older
than its predecessor.

The four auxiliary sample constructors slice one transition into focused
training layouts: action-text prediction, edited-image generation,
state-summary prediction, and judgment prediction. Exactly one segment
per sample is a loss target.
"""

import enum
from dataclasses import dataclass

from . import vocab
from .codec import Grid, default_codebook
from .decoding import decode_with_retry, micro_window
from .errors import DecodeError, LayoutError
from .records import SubtaskRecord
from .rng import make_rng
from .sequence import (OP_WIDTH, REWARD_WIDTH, STATE_WIDTH, LayoutBuilder,
                       SegmentKind, SequenceLayout)


@dataclass
class MDPNode:
    """A judged reasoning state: image plus its decoded summary."""

    state_grid: Grid
    state_text: str | None
    index: int


@dataclass
class MDPTransition:
    """One revision step between consecutive nodes.

    `trigger_text` is the failing judgment of the source state that
    prompted the action; `reward_text` is the judgment of the state the
    action produced. Both start with PASS or FAIL.
    """

    source: MDPNode
    action_text: str
    action_grid: Grid
    next_state: MDPNode | None
    reward_text: str | None
    trigger_text: str
    action_supervised: bool = True


class AuxTaskKind(enum.Enum):
    TEXT_ACTION = "text_action"
    IMAGE_ACTION = "image_action"
    NEXT_STATE = "next_state"
    REWARD_EST = "reward_est"


def parse_reward(text: str) -> tuple:
    """Split a judgment into its verdict and critique; the verdict token is
    mandatory and nothing is ever silently defaulted."""
    words = text.split()
    if not words or words[0] not in ("PASS", "FAIL"):
        raise DecodeError(f"judgment must start with PASS or FAIL: {text!r}")
    return words[0], " ".join(words[1:])


def _require(value, field: str, kind: AuxTaskKind):
    if value is None:
        raise LayoutError(f"{kind.value} sample needs transition field {field!r}")
    return value


def build_aux_sample(kind: AuxTaskKind, transition: MDPTransition, subtask_prompt: str,
                     codebook=None) -> SequenceLayout:
    """One focused training layout for a Table-style auxiliary objective.

    Context mirrors the inference window for the same decision; the final
    segment is the sole loss target (cross-entropy for text kinds, flow
    regression for the edited image).
    """
    cb = codebook or default_codebook()
    if kind in (AuxTaskKind.TEXT_ACTION, AuxTaskKind.IMAGE_ACTION):
        src = _require(transition.source, "source", kind)
        b = micro_window(subtask_prompt, src.state_grid, cb)
        b.add_text_segment(SegmentKind.MICRO_STATE_TEXT,
                           vocab.encode(_require(src.state_text, "source.state_text", kind)),
                           STATE_WIDTH, step=0, node=0)
        b.add_text_segment(SegmentKind.MICRO_REWARD,
                           vocab.encode(_require(transition.trigger_text, "trigger_text", kind)),
                           REWARD_WIDTH, step=0, node=0)
        if kind == AuxTaskKind.TEXT_ACTION:
            b.add_text_segment(SegmentKind.MICRO_ACTION_TEXT,
                               vocab.encode(_require(transition.action_text, "action_text", kind)),
                               OP_WIDTH, step=0, node=0, target=True)
        else:
            b.add_text_segment(SegmentKind.MICRO_ACTION_TEXT,
                               vocab.encode(_require(transition.action_text, "action_text", kind)),
                               OP_WIDTH, step=0, node=0)
            b.add_image_segment(SegmentKind.MICRO_ACTION_IMAGE,
                                _require(transition.action_grid, "action_grid", kind),
                                include_gen=True, include_und=False, step=0, node=0,
                                gen_target=True)
        return b.build()
    nxt = _require(transition.next_state, "next_state", kind)
    b = micro_window(subtask_prompt, _require(transition.action_grid, "action_grid", kind), cb)
    if kind == AuxTaskKind.NEXT_STATE:
        b.add_text_segment(SegmentKind.MICRO_STATE_TEXT,
                           vocab.encode(_require(nxt.state_text, "next_state.state_text", kind)),
                           STATE_WIDTH, step=0, node=0, target=True)
        return b.build()
    # REWARD_EST
    b.add_text_segment(SegmentKind.MICRO_STATE_TEXT,
                       vocab.encode(_require(nxt.state_text, "next_state.state_text", kind)),
                       STATE_WIDTH, step=0, node=0)
    b.add_text_segment(SegmentKind.MICRO_REWARD,
                       vocab.encode(_require(transition.reward_text, "reward_text", kind)),
                       REWARD_WIDTH, step=0, node=0, target=True)
    return b.build()


def transitions_from_record(sub: SubtaskRecord) -> list:
    """Recover the transition chain of one recorded subtask."""
    if sub.input is None:
        raise LayoutError("record subtask has no input grid")
    cur = Grid.from_text(sub.input)
    out = []
    idx = 0
    nodes = sub.nodes
    for i, node in enumerate(nodes):
        if node.action is None:
            continue
        if i + 1 >= len(nodes):
            raise LayoutError("acted round has no following judged round")
        nxt_rec = nodes[i + 1]
        nxt_grid = Grid.from_text(node.action_grid)
        out.append(MDPTransition(
            source=MDPNode(cur, node.state_text, idx),
            action_text=node.action,
            action_grid=nxt_grid,
            next_state=MDPNode(nxt_grid, nxt_rec.state_text, idx + 1),
            reward_text=nxt_rec.reward,
            trigger_text=node.reward,
            action_supervised=node.action_supervised,
        ))
        cur = nxt_grid
        idx += 1
    return out


@dataclass
class SelfCheckResult:
    final_node: MDPNode
    transitions: list
    resolved: bool
    rounds: int  # judged rounds, including the final one
    final_verdict: str = "FAIL"

    @property
    def final_grid(self) -> Grid:
        return self.final_node.state_grid


def run_self_check(runner, subtask_prompt: str, initial: Grid, max_rounds: int = 3,
                   seed: int = 0, flow_steps: int | None = None, trace=None,
                   subtask_index: int = 0) -> SelfCheckResult:
    """Judge-act loop for one subtask.

    Judges the current state first; stops on PASS, otherwise decodes an
    editing action and generates the edited image, up to `max_rounds`
    actions. Exhausting the budget returns the last judged node flagged
    unresolved. Malformed judgments or actions raise DecodeError after a
    bounded retry.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be at least 1")
    runner.on_subtask_start(subtask_prompt, initial)
    current = initial
    transitions: list[MDPTransition] = []
    pending: MDPTransition | None = None
    actions_taken = 0
    round_idx = 0
    resolved = False
    node = None
    reward_text = "FAIL"
    while True:
        b = micro_window(subtask_prompt, current, None)
        state_ids = runner.decode_text_segment(b, SegmentKind.MICRO_STATE_TEXT, 0, 0,
                                               STATE_WIDTH, "micro")
        node = MDPNode(current, vocab.decode(state_ids), round_idx)
        if trace is not None:
            trace.emit("state", subtask=subtask_index, round=round_idx, text=node.state_text)
        if pending is not None:
            pending.next_state = node
        reward_text, (verdict, _critique) = decode_with_retry(
            b,
            lambda: vocab.decode(runner.decode_text_segment(
                b, SegmentKind.MICRO_REWARD, 0, 0, REWARD_WIDTH, "micro")),
            parse_reward, "judgment")
        if trace is not None:
            trace.emit("verdict", subtask=subtask_index, round=round_idx, text=reward_text)
        if pending is not None:
            pending.reward_text = reward_text
            transitions.append(pending)
            pending = None
        if verdict == "PASS":
            resolved = True
            break
        if actions_taken >= max_rounds:
            break
        action_text, action_op = decode_with_retry(
            b,
            lambda: vocab.decode(runner.decode_text_segment(
                b, SegmentKind.MICRO_ACTION_TEXT, 0, 0, OP_WIDTH, "micro")),
            _parse_action, "editing action")
        if trace is not None:
            trace.emit("action", subtask=subtask_index, round=round_idx, text=action_text)
        img_rng = make_rng(0xE0, seed, subtask_index, round_idx)
        new_grid = runner.generate_image_segment(b, SegmentKind.MICRO_ACTION_IMAGE, 0, 0,
                                                 img_rng, "micro", flow_steps=flow_steps)
        if trace is not None:
            trace.emit("image", subtask=subtask_index, round=round_idx,
                       grid=new_grid.to_text())
        pending = MDPTransition(source=node, action_text=action_text, action_grid=new_grid,
                                next_state=None, reward_text=None, trigger_text=reward_text)
        current = new_grid
        actions_taken += 1
        round_idx += 1
    return SelfCheckResult(final_node=node, transitions=transitions, resolved=resolved,
                           rounds=round_idx + 1, final_verdict=reward_text)


def _parse_action(text: str):
    from .tasks import EditOp

    return EditOp.from_text(text)

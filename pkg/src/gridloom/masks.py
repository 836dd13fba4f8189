"""Visibility mask compilation for the two-tier attention schemes.

Two tiers of observers, one rule table, default deny:

  * planner-tier rows (system prompt, plan, subtask instructions, subtask
    outcomes, final answer) see only planner-tier segments -- the rounds
    of subtask execution are completely hidden from them;
  * execution-tier rows (round summaries, verdicts, actions, action
    images, the round-0 state image) see the system prompt, their own
    subtask's instruction, the previous round, and themselves causally.
    Rounds further back, the plan, other subtasks, and all outcomes are
    hidden.

The compiler decides visibility once per ordered segment pair and fills
rectangular blocks; the only non-rectangular case is a segment against
itself, which is causal (lower triangle, diagonal included). Everything
is subject to the causal base: a token never sees a later token, and
always sees itself.

Counting visible pairs works directly on the block rules, so tests can
play it against a materialized count.
"""

from dataclasses import dataclass

import numpy as np

from .errors import MaskError
from .sequence import MACRO_KINDS, MICRO_KINDS, Segment, SegmentKind, SequenceLayout

_OBSERVED_BY_MACRO = frozenset({
    SegmentKind.SYSTEM_PROMPT, SegmentKind.PLAN,
    SegmentKind.SUBTASK_INSTRUCTION, SegmentKind.SUBTASK_OUTCOME,
})


def segment_pair_visible(observer: Segment, observed: Segment) -> bool:
    """Block-level visibility rule (causality handled separately)."""
    if observer is observed or (observer.start == observed.start and observer.stop == observed.stop):
        return True
    if observer.kind in MACRO_KINDS:
        return observed.kind in _OBSERVED_BY_MACRO
    # execution-tier observer
    if observed.kind == SegmentKind.SYSTEM_PROMPT:
        return True
    if observed.kind == SegmentKind.SUBTASK_INSTRUCTION:
        return observed.macro_step == observer.macro_step
    if observed.kind in MICRO_KINDS:
        return (observed.macro_step == observer.macro_step
                and observed.micro_node in (observer.micro_node, observer.micro_node - 1))
    return False


@dataclass
class MaskBlock:
    row_start: int
    row_stop: int
    col_start: int
    col_stop: int
    causal: bool  # lower-triangle-with-diagonal instead of full fill


class MaskSpec:
    """Compiled visibility for one layout: allowed blocks over an N x N grid."""

    def __init__(self, length: int, blocks: list):
        self.length = length
        self.blocks = blocks

    def dense(self) -> np.ndarray:
        """Materialize as a boolean (N, N) array; True means visible."""
        m = np.zeros((self.length, self.length), dtype=bool)
        for b in self.blocks:
            if b.causal:
                rows = np.arange(b.row_start, b.row_stop)[:, None]
                cols = np.arange(b.col_start, b.col_stop)[None, :]
                m[b.row_start:b.row_stop, b.col_start:b.col_stop] = cols <= rows
            else:
                m[b.row_start:b.row_stop, b.col_start:b.col_stop] = True
        return m


def _compile(layout: SequenceLayout) -> MaskSpec:
    blocks = []
    for obs in layout.segments:
        for src in layout.segments:
            if src.start > obs.start:
                break  # later segments can never be visible (causal base)
            if not segment_pair_visible(obs, src):
                continue
            if src.start == obs.start:
                blocks.append(MaskBlock(obs.start, obs.stop, src.start, src.stop, causal=True))
            else:
                blocks.append(MaskBlock(obs.start, obs.stop, src.start, src.stop, causal=False))
    return MaskSpec(len(layout), blocks)


def compile_macro_mask(layout: SequenceLayout) -> MaskSpec:
    """Hierarchical mask for a layout that may mix both tiers."""
    for seg in layout.segments:
        if not isinstance(seg.kind, SegmentKind):
            raise MaskError(f"untagged segment kind: {seg.kind!r}")
        if seg.kind in MICRO_KINDS and seg.micro_node < 0:
            raise MaskError(f"{seg.kind.name} segment missing node index")
    return _compile(layout)


def compile_micro_mask(layout: SequenceLayout) -> MaskSpec:
    """Mask for an execution-only layout (no plan/outcome/final segments)."""
    for seg in layout.segments:
        if not isinstance(seg.kind, SegmentKind):
            raise MaskError(f"untagged segment kind: {seg.kind!r}")
        if seg.kind in (SegmentKind.PLAN, SegmentKind.SUBTASK_OUTCOME, SegmentKind.FINAL_ANSWER):
            raise MaskError(f"{seg.kind.name} does not belong in an execution-only layout")
        if seg.kind in MICRO_KINDS and seg.micro_node < 0:
            raise MaskError(f"{seg.kind.name} segment missing node index")
    return _compile(layout)


def causal_mask(length: int) -> MaskSpec:
    return MaskSpec(length, [MaskBlock(0, length, 0, length, causal=True)])


def visible_pair_count(mask: MaskSpec) -> int:
    """Number of visible (observer, observed) pairs, from the block rules."""
    total = 0
    for b in mask.blocks:
        rows = b.row_stop - b.row_start
        cols = b.col_stop - b.col_start
        if b.causal:
            # square block on the diagonal
            total += rows * (rows + 1) // 2
        else:
            total += rows * cols
    return total


def micro_pair_count_closed_form(n_nodes: int, node_len: int, instr_len: int) -> int:
    """Visible pairs for an instruction followed by uniform execution rounds.

    instruction causal + per-node self-causal + node k -> node k-1 full +
    every node token -> full instruction.
    """
    instr = instr_len * (instr_len + 1) // 2
    self_causal = n_nodes * (node_len * (node_len + 1) // 2)
    prev_full = (n_nodes - 1) * node_len * node_len
    to_instr = n_nodes * node_len * instr_len
    return instr + self_causal + prev_full + to_instr


def block_diagonal(masks: list) -> np.ndarray:
    """Dense mask for a packed batch: per-sample masks, cross-sample deny."""
    total = sum(m.length for m in masks)
    out = np.zeros((total, total), dtype=bool)
    off = 0
    for m in masks:
        out[off:off + m.length, off:off + m.length] = m.dense()
        off += m.length
    return out


# ---------------------------------------------------------------------------
# Portable bitmap dump (ASCII PBM), for golden-file tests
# ---------------------------------------------------------------------------

def to_pbm(mask: np.ndarray) -> str:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    rows = [" ".join("1" if v else "0" for v in row) for row in mask]
    return f"P1\n{w} {h}\n" + "\n".join(rows) + "\n"


def from_pbm(text: str) -> np.ndarray:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    if lines[0].strip() != "P1":
        raise MaskError("not an ASCII PBM")
    w, h = (int(x) for x in lines[1].split())
    bits = " ".join(lines[2:]).split()
    if len(bits) != w * h:
        raise MaskError("PBM size mismatch")
    return np.array([b == "1" for b in bits], dtype=bool).reshape(h, w)

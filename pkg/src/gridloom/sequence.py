"""Interleaved multimodal token sequences.

A SequenceLayout is the model's context: a flat run of tokens, each
carrying a role (text, discrete visual, continuous visual latent, or
structural marker), partitioned into tagged segments. Text-like segments
occupy fixed-width slots (opener, content, end marker, trailing pads) so
that the same kind of segment always lands on the same positions; image
segments hold a generation encoding (one latent row per cell), an
understanding encoding (one pixel token per cell), or both, bracketed by
image markers.

Layouts are built through LayoutBuilder, which is also what inference
uses to grow a context token by token. `build_layout` turns a trajectory
record into the canonical training layout; `pack` concatenates layouts
into token-budget batches without ever splitting one.
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from . import vocab
from .codec import D_LAT, Grid, PaletteCodebook, default_codebook
from .errors import LayoutError
from .records import SYSTEM_TEXT, TrajectoryRecord


class TokenRole(enum.IntEnum):
    TEXT = 0
    VIS_U = 1
    VIS_G = 2
    STRUCT = 3


class SegmentKind(enum.IntEnum):
    SYSTEM_PROMPT = 0
    PLAN = 1
    SUBTASK_INSTRUCTION = 2
    MICRO_STATE_TEXT = 3
    MICRO_STATE_IMAGE = 4
    MICRO_ACTION_TEXT = 5
    MICRO_ACTION_IMAGE = 6
    MICRO_REWARD = 7
    SUBTASK_OUTCOME = 8
    FINAL_ANSWER = 9


MACRO_KINDS = frozenset({
    SegmentKind.SYSTEM_PROMPT, SegmentKind.PLAN, SegmentKind.SUBTASK_INSTRUCTION,
    SegmentKind.SUBTASK_OUTCOME, SegmentKind.FINAL_ANSWER,
})
MICRO_KINDS = frozenset({
    SegmentKind.MICRO_STATE_TEXT, SegmentKind.MICRO_STATE_IMAGE,
    SegmentKind.MICRO_ACTION_TEXT, SegmentKind.MICRO_ACTION_IMAGE,
    SegmentKind.MICRO_REWARD,
})

# Segment openers (struct marker starting each segment kind).
OPENERS = {
    SegmentKind.SYSTEM_PROMPT: vocab.TOKEN_TO_ID[vocab.SYS],
    SegmentKind.PLAN: vocab.TOKEN_TO_ID[vocab.PLAN],
    SegmentKind.SUBTASK_INSTRUCTION: vocab.TOKEN_TO_ID[vocab.INSTR],
    SegmentKind.MICRO_STATE_TEXT: vocab.TOKEN_TO_ID[vocab.STATE],
    SegmentKind.MICRO_ACTION_TEXT: vocab.TOKEN_TO_ID[vocab.ACT],
    SegmentKind.MICRO_REWARD: vocab.TOKEN_TO_ID[vocab.REW],
    SegmentKind.SUBTASK_OUTCOME: vocab.TOKEN_TO_ID[vocab.OUT],
    SegmentKind.FINAL_ANSWER: vocab.TOKEN_TO_ID[vocab.ANS],
}

# Fixed content widths (tokens between opener and end marker).
OP_WIDTH = 4            # verb + up to three arguments
USER_WIDTH = 14         # up to three op clauses joined by THEN
PLAN_WIDTH = 14         # up to three op clauses joined by <SEP>
STATE_WIDTH = 3         # CELL <at> <color>
REWARD_WIDTH = 5        # FAIL CELL <at> SHOULD_BE <color>, or PASS
FINAL_WIDTH = 1         # DONE

N_CELLS = vocab.GRID_SIZE * vocab.GRID_SIZE


@dataclass(frozen=True)
class Segment:
    kind: SegmentKind
    macro_step: int  # subtask index, -1 for task-global segments
    micro_node: int  # judged-round index, -1 for non-micro segments
    start: int
    stop: int

    def __len__(self):
        return self.stop - self.start


@dataclass(frozen=True)
class Token:
    """Single-token view; layouts store columns, this is the row form."""

    role: TokenRole
    token_id: int | None
    latent: np.ndarray | None
    position: int


@dataclass
class ImageGroup:
    """The generation-encoding rows of one image occurrence."""

    positions: np.ndarray  # (N_CELLS,) indices of the VIS_G tokens
    clean: np.ndarray      # (N_CELLS, D_LAT) target latents x0
    segment: Segment
    is_target: bool


class SequenceLayout:
    """Immutable-after-build column store for one sample."""

    def __init__(self, ids, roles, seg_kind, seg_step, seg_node, is_loss_target,
                 latents, clean_latents, flow_time, flow_x1, segments, image_groups):
        self.ids = ids
        self.roles = roles
        self.seg_kind = seg_kind
        self.seg_step = seg_step
        self.seg_node = seg_node
        self.is_loss_target = is_loss_target
        self.latents = latents
        self.clean_latents = clean_latents
        self.flow_time = flow_time
        self.flow_x1 = flow_x1
        self.segments = segments
        self.image_groups = image_groups

    def __len__(self):
        return len(self.ids)

    @property
    def positions(self) -> np.ndarray:
        return np.arange(len(self.ids), dtype=np.int64)

    def token(self, i: int) -> Token:
        role = TokenRole(int(self.roles[i]))
        if role == TokenRole.VIS_G:
            return Token(role, None, self.latents[i].copy(), i)
        return Token(role, int(self.ids[i]), None, i)

    def segment_at(self, i: int) -> Segment:
        for seg in self.segments:
            if seg.start <= i < seg.stop:
                return seg
        raise LayoutError(f"position {i} not covered by any segment")

    def validate(self) -> None:
        n = len(self.ids)
        if n == 0:
            raise LayoutError("empty layout")
        cursor = 0
        last_node_per_step: dict[int, int] = {}
        for seg in self.segments:
            if seg.start != cursor:
                raise LayoutError(f"segment gap/overlap at {seg.start} (expected {cursor})")
            if seg.stop <= seg.start:
                raise LayoutError("empty segment")
            cursor = seg.stop
            if seg.kind in MICRO_KINDS:
                if seg.micro_node < 0:
                    raise LayoutError(f"micro segment {seg.kind.name} missing node index")
                prev = last_node_per_step.get(seg.macro_step, -1)
                if seg.micro_node < prev:
                    raise LayoutError("micro node indices must be non-decreasing")
                last_node_per_step[seg.macro_step] = seg.micro_node
        if cursor != n:
            raise LayoutError(f"segments cover {cursor} of {n} tokens")
        targets = np.flatnonzero(self.is_loss_target)
        for i in targets:
            if self.roles[i] == TokenRole.VIS_G:
                continue
            if i == 0:
                raise LayoutError("a text loss target cannot sit at position 0")
        visg = self.roles == TokenRole.VIS_G
        bad = visg & self.is_loss_target & ~np.isfinite(self.clean_latents).all(axis=1)
        if bad.any():
            raise LayoutError("generation loss target without a clean latent")


class LayoutBuilder:
    """Appends segments (or single tokens inside an open segment)."""

    def __init__(self, codebook: PaletteCodebook | None = None):
        self.codebook = codebook or default_codebook()
        self._ids: list[int] = []
        self._roles: list[int] = []
        self._kind: list[int] = []
        self._step: list[int] = []
        self._node: list[int] = []
        self._target: list[bool] = []
        self._lat: list[np.ndarray] = []
        self._clean: list[np.ndarray] = []
        self._time: list[float] = []
        self.segments: list[Segment] = []
        self.image_groups: list[ImageGroup] = []
        self._open: tuple | None = None

    def __len__(self):
        return len(self._ids)

    # -- low-level -----------------------------------------------------

    def open_segment(self, kind: SegmentKind, step: int = -1, node: int = -1) -> None:
        if self._open is not None:
            raise LayoutError("previous segment still open")
        self._open = (kind, step, node, len(self._ids))

    def close_segment(self) -> Segment:
        if self._open is None:
            raise LayoutError("no open segment")
        kind, step, node, start = self._open
        if len(self._ids) == start:
            raise LayoutError("closing an empty segment")
        seg = Segment(kind, step, node, start, len(self._ids))
        self.segments.append(seg)
        self._open = None
        return seg

    def append_id(self, token_id: int, target: bool = False) -> None:
        if self._open is None:
            raise LayoutError("no open segment")
        kind, step, node, _ = self._open
        if vocab.is_struct_id(token_id):
            role = TokenRole.STRUCT
        elif vocab.is_pixel_id(token_id):
            role = TokenRole.VIS_U
        else:
            role = TokenRole.TEXT
        self._ids.append(token_id)
        self._roles.append(int(role))
        self._kind.append(int(kind))
        self._step.append(step)
        self._node.append(node)
        self._target.append(target)
        z = np.zeros(self.codebook.d_lat, dtype=np.float64)
        self._lat.append(z)
        self._clean.append(z)
        self._time.append(0.0)

    def append_latent(self, latent: np.ndarray, clean: np.ndarray, target: bool,
                      flow_time: float = 0.0) -> None:
        if self._open is None:
            raise LayoutError("no open segment")
        kind, step, node, _ = self._open
        self._ids.append(vocab.PAD_ID)
        self._roles.append(int(TokenRole.VIS_G))
        self._kind.append(int(kind))
        self._step.append(step)
        self._node.append(node)
        self._target.append(target)
        self._lat.append(np.asarray(latent, dtype=np.float64))
        self._clean.append(np.asarray(clean, dtype=np.float64))
        self._time.append(flow_time)

    # -- segment helpers ------------------------------------------------

    def add_text_segment(self, kind: SegmentKind, content_ids, width: int,
                         step: int = -1, node: int = -1, target: bool = False) -> Segment:
        """opener + content + end marker + trailing pads up to the slot width."""
        content_ids = list(content_ids)
        if len(content_ids) > width:
            raise LayoutError(f"{kind.name} content {len(content_ids)} exceeds width {width}")
        self.open_segment(kind, step, node)
        self.append_id(OPENERS[kind])
        for t in content_ids:
            self.append_id(t, target=target)
        self.append_id(vocab.END_ID, target=target)
        for _ in range(width - len(content_ids)):
            self.append_id(vocab.PAD_ID)
        return self.close_segment()

    def add_image_tokens(self, grid: Grid | None, include_gen: bool, include_und: bool,
                         gen_target: bool = False, gen_init: np.ndarray | None = None) -> np.ndarray | None:
        """Emit <IMG> [latent rows] [pixel tokens] </IMG> inside an open segment.

        Returns the positions of the latent rows when a generation encoding
        was emitted. `gen_init` overrides the input latents (inference
        noise); clean targets always come from `grid` when given.
        """
        self.append_id(vocab.IMG_ID)
        gen_positions = None
        if include_gen:
            clean = self.codebook.encode_gen(grid) if grid is not None else np.zeros((N_CELLS, self.codebook.d_lat))
            init = gen_init if gen_init is not None else clean
            start = len(self._ids)
            for i in range(N_CELLS):
                self.append_latent(init[i], clean[i], target=gen_target)
            gen_positions = np.arange(start, start + N_CELLS, dtype=np.int64)
        if include_und:
            if grid is None:
                raise LayoutError("understanding encoding requires a grid")
            for t in self.codebook.encode_und(grid):
                self.append_id(t)
        self.append_id(vocab.IMG_END_ID)
        return gen_positions

    def add_image_segment(self, kind: SegmentKind, grid: Grid | None, include_gen: bool,
                          include_und: bool, step: int = -1, node: int = -1,
                          gen_target: bool = False, gen_init: np.ndarray | None = None) -> Segment:
        self.open_segment(kind, step, node)
        pos = self.add_image_tokens(grid, include_gen, include_und,
                                    gen_target=gen_target, gen_init=gen_init)
        seg = self.close_segment()
        if pos is not None:
            clean = self.codebook.encode_gen(grid) if grid is not None else np.zeros((N_CELLS, self.codebook.d_lat))
            self.image_groups.append(ImageGroup(pos, clean, seg, gen_target))
        return seg

    def add_system_segment(self, user_text: str | None = None, task_grid: Grid | None = None) -> Segment:
        """Short form: marker + system words. Full form adds the user prompt
        and the task's starting grid as an understanding image."""
        self.open_segment(SegmentKind.SYSTEM_PROMPT)
        self.append_id(OPENERS[SegmentKind.SYSTEM_PROMPT])
        for t in vocab.encode(SYSTEM_TEXT):
            self.append_id(t)
        if user_text is not None:
            self.append_id(vocab.TOKEN_TO_ID[vocab.USER])
            ids = vocab.encode(user_text)
            if len(ids) > USER_WIDTH:
                raise LayoutError(f"user prompt too long: {len(ids)} tokens")
            for t in ids:
                self.append_id(t)
            for _ in range(USER_WIDTH - len(ids)):
                self.append_id(vocab.PAD_ID)
            if task_grid is not None:
                self.add_image_tokens(task_grid, include_gen=False, include_und=True)
        self.append_id(vocab.END_ID)
        return self.close_segment()

    def add_outcome_segment(self, grid: Grid, verdict: str, step: int,
                            gen_target: bool = False) -> Segment:
        self.open_segment(SegmentKind.SUBTASK_OUTCOME, step=step)
        self.append_id(OPENERS[SegmentKind.SUBTASK_OUTCOME])
        gen_pos = self.add_image_tokens(grid, include_gen=True, include_und=True,
                                        gen_target=gen_target)
        self.append_id(vocab.TOKEN_TO_ID[verdict], target=gen_target)
        self.append_id(vocab.END_ID, target=gen_target)
        seg = self.close_segment()
        self.image_groups.append(ImageGroup(gen_pos, self.codebook.encode_gen(grid),
                                            seg, gen_target))
        return seg

    # -- finish ----------------------------------------------------------

    def set_latents(self, positions: np.ndarray, values: np.ndarray, flow_time: float) -> None:
        """Overwrite latent inputs in place (noising / ODE integration)."""
        for k, p in enumerate(positions):
            self._lat[int(p)] = np.asarray(values[k], dtype=np.float64)
            self._time[int(p)] = flow_time

    def mark(self) -> tuple:
        """Rollback point for decode retries."""
        if self._open is not None:
            raise LayoutError("cannot mark with an open segment")
        return (len(self._ids), len(self.segments), len(self.image_groups))

    def truncate(self, mark: tuple) -> None:
        n, s, g = mark
        for lst in (self._ids, self._roles, self._kind, self._step, self._node,
                    self._target, self._lat, self._clean, self._time):
            del lst[n:]
        del self.segments[s:]
        del self.image_groups[g:]
        self._open = None

    def snapshot(self) -> SequenceLayout:
        """Arrays as they stand, open segment included; skips validation."""
        segments = list(self.segments)
        if self._open is not None:
            kind, step, node, start = self._open
            if len(self._ids) > start:
                segments.append(Segment(kind, step, node, start, len(self._ids)))
        layout = SequenceLayout(
            ids=np.asarray(self._ids, dtype=np.int64),
            roles=np.asarray(self._roles, dtype=np.int8),
            seg_kind=np.asarray(self._kind, dtype=np.int16),
            seg_step=np.asarray(self._step, dtype=np.int16),
            seg_node=np.asarray(self._node, dtype=np.int16),
            is_loss_target=np.asarray(self._target, dtype=bool),
            latents=np.asarray(self._lat, dtype=np.float64),
            clean_latents=np.asarray(self._clean, dtype=np.float64),
            flow_time=np.asarray(self._time, dtype=np.float64),
            flow_x1=np.zeros((len(self._ids), self.codebook.d_lat), dtype=np.float64),
            segments=segments,
            image_groups=list(self.image_groups),
        )
        return layout

    def build(self, validate: bool = True) -> SequenceLayout:
        if self._open is not None:
            raise LayoutError("cannot build with an open segment")
        layout = SequenceLayout(
            ids=np.asarray(self._ids, dtype=np.int64),
            roles=np.asarray(self._roles, dtype=np.int8),
            seg_kind=np.asarray(self._kind, dtype=np.int16),
            seg_step=np.asarray(self._step, dtype=np.int16),
            seg_node=np.asarray(self._node, dtype=np.int16),
            is_loss_target=np.asarray(self._target, dtype=bool),
            latents=np.asarray(self._lat, dtype=np.float64),
            clean_latents=np.asarray(self._clean, dtype=np.float64),
            flow_time=np.asarray(self._time, dtype=np.float64),
            flow_x1=np.zeros((len(self._ids), self.codebook.d_lat), dtype=np.float64),
            segments=list(self.segments),
            image_groups=list(self.image_groups),
        )
        if validate:
            layout.validate()
        return layout


# ---------------------------------------------------------------------------
# Canonical trajectory layout
# ---------------------------------------------------------------------------

def build_layout(record: TrajectoryRecord, codebook: PaletteCodebook | None = None) -> SequenceLayout:
    """Canonical training layout for one trajectory record.

    Emission order: system prompt (with user prompt and starting grid),
    plan, then per subtask its instruction, the judged rounds, and the
    outcome; a final answer segment closes the sample. Images bracketed by
    image markers; generation encodings precede understanding encodings.
    """
    if not record.plan:
        raise LayoutError("trajectory has no plan")
    if not record.subtasks:
        raise LayoutError("trajectory has no subtasks")
    b = LayoutBuilder(codebook)
    task_grid = None
    if record.subtasks[0].input is not None:
        task_grid = Grid.from_text(record.subtasks[0].input)
    b.add_system_segment(user_text=record.user, task_grid=task_grid)
    plan_ids: list[int] = []
    for i, sub in enumerate(record.plan):
        if i:
            plan_ids.append(vocab.SEP_ID)
        plan_ids.extend(vocab.encode(sub))
    b.add_text_segment(SegmentKind.PLAN, plan_ids, PLAN_WIDTH, target=True)
    for m, sub in enumerate(record.subtasks):
        if not sub.nodes:
            raise LayoutError(f"subtask {m} has no rounds")
        b.add_text_segment(SegmentKind.SUBTASK_INSTRUCTION, vocab.encode(sub.instruction),
                           OP_WIDTH, step=m)
        if sub.input is not None:
            b.add_image_segment(SegmentKind.MICRO_STATE_IMAGE, Grid.from_text(sub.input),
                                include_gen=False, include_und=True, step=m, node=0)
        for r, noderec in enumerate(sub.nodes):
            if noderec.state_text is not None:
                b.add_text_segment(SegmentKind.MICRO_STATE_TEXT, vocab.encode(noderec.state_text),
                                   STATE_WIDTH, step=m, node=r, target=True)
            if noderec.reward is not None:
                b.add_text_segment(SegmentKind.MICRO_REWARD, vocab.encode(noderec.reward),
                                   REWARD_WIDTH, step=m, node=r, target=True)
            if noderec.action is not None:
                b.add_text_segment(SegmentKind.MICRO_ACTION_TEXT, vocab.encode(noderec.action),
                                   OP_WIDTH, step=m, node=r, target=noderec.action_supervised)
            if noderec.action_grid is not None:
                b.add_image_segment(SegmentKind.MICRO_ACTION_IMAGE, Grid.from_text(noderec.action_grid),
                                    include_gen=True, include_und=True, step=m, node=r,
                                    gen_target=True)
        if sub.outcome_grid is not None:
            b.add_outcome_segment(Grid.from_text(sub.outcome_grid), sub.outcome_text or "PASS",
                                  step=m, gen_target=True)
    b.add_text_segment(SegmentKind.FINAL_ANSWER, vocab.encode(record.final), FINAL_WIDTH,
                       target=True)
    return b.build()


# ---------------------------------------------------------------------------
# Packing
# ---------------------------------------------------------------------------

@dataclass
class PackedBatch:
    layouts: list
    offsets: list  # start position of each layout in the concatenation

    @property
    def total_tokens(self) -> int:
        return sum(len(l) for l in self.layouts)

    def spans(self):
        for off, layout in zip(self.offsets, self.layouts):
            yield off, off + len(layout), layout

    def concat(self, name: str) -> np.ndarray:
        return np.concatenate([getattr(l, name) for l in self.layouts], axis=0)

    @property
    def positions(self) -> np.ndarray:
        # Positions restart at zero for every sample in the pack.
        return np.concatenate([l.positions for l in self.layouts])


def pack(layouts, budget: int) -> list:
    """Greedy first-fit packing; no layout is ever split across batches."""
    batches: list[list] = []
    sizes: list[int] = []
    for layout in layouts:
        n = len(layout)
        if n > budget:
            raise LayoutError(f"layout of {n} tokens exceeds budget {budget}")
        for i, used in enumerate(sizes):
            if used + n <= budget:
                batches[i].append(layout)
                sizes[i] += n
                break
        else:
            batches.append([layout])
            sizes.append(n)
    out = []
    for group in batches:
        offsets = []
        cursor = 0
        for l in group:
            offsets.append(cursor)
            cursor += len(l)
        out.append(PackedBatch(group, offsets))
    return out


# ---------------------------------------------------------------------------
# Image token accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageTokenConfig:
    gen_grid: tuple = (vocab.GRID_SIZE, vocab.GRID_SIZE)
    und_grid: tuple = (vocab.GRID_SIZE, vocab.GRID_SIZE)


def count_image_tokens(config: ImageTokenConfig) -> tuple:
    """(understanding tokens, generation tokens) for one image."""
    gh, gw = config.gen_grid
    uh, uw = config.und_grid
    if gh <= 0 or gw <= 0 or uh <= 0 or uw <= 0:
        raise LayoutError("image grid dimensions must be positive")
    return uh * uw, gh * gw

"""Synthetic grid-edit world: the instruction DSL, its exact semantics,
the oracle judge, task generation, and trajectory synthesis.

Verb semantics (all on 8x8 grids, coordinates row/col from 0):

  RECOLOR AT_r_c COLOR      cell (r,c) becomes COLOR
  MOVE AT_a AT_b            cell b takes cell a's color, cell a goes BLACK
  SWAP AT_a AT_b            cells a and b exchange colors
  FILL_ROW Dr COLOR         every cell of row r becomes COLOR
  FILL_COL Dc COLOR         every cell of column c becomes COLOR
  BORDER COLOR              all 28 perimeter cells become COLOR

The judge is strict equality against the goal grid; on mismatch it names
the first differing cell in row-major order and the color it should
have. Error injection for training data uses near-miss edits (wrong
color, or a coordinate off by one) so that failed rounds carry
informative critiques. Corrective actions re-apply the instruction when
that reaches the goal and otherwise recolor the first differing cell;
injected wrong actions are kept in the record but flagged unsupervised.
"""

from dataclasses import dataclass

from . import vocab
from .codec import Grid
from .errors import DecodeError, ValidationError
from .records import MicroNodeRecord, SubtaskRecord, TrajectoryRecord
from .rng import make_rng

N = vocab.GRID_SIZE
VERBS = tuple(vocab.VERBS)

# Verb pairs never co-occurring in training composites; held out for
# compositional generalization probes.
HOLDOUT_VERB_PAIR = frozenset({"SWAP", "BORDER"})

_SPLIT_TAG = {"train": 0, "eval": 1}


@dataclass(frozen=True)
class EditOp:
    verb: str
    args: tuple

    def __post_init__(self):
        if self.verb not in VERBS:
            raise ValueError(f"unknown verb {self.verb!r}")
        spec = _ARG_SPEC[self.verb]
        if len(self.args) != len(spec):
            raise ValueError(f"{self.verb} takes {len(spec)} args, got {len(self.args)}")
        for a, kind in zip(self.args, spec):
            if kind == "cell":
                r, c = a
                ok = 0 <= r < N and 0 <= c < N
            elif kind == "index":
                ok = 0 <= a < N
            else:  # color
                ok = 0 <= a < vocab.PALETTE_SIZE
            if not ok:
                raise ValueError(f"{self.verb} argument {a!r} out of range")

    def to_text(self) -> str:
        parts = [self.verb]
        for a, kind in zip(self.args, _ARG_SPEC[self.verb]):
            if kind == "cell":
                parts.append(vocab.cell_token(*a))
            elif kind == "index":
                parts.append(f"D{a}")
            else:
                parts.append(vocab.COLOR_NAMES[a])
        return " ".join(parts)

    @staticmethod
    def from_text(text: str) -> "EditOp":
        words = text.split()
        if not words or words[0] not in VERBS:
            raise DecodeError(f"not an edit instruction: {text!r}")
        verb = words[0]
        spec = _ARG_SPEC[verb]
        if len(words) - 1 != len(spec):
            raise DecodeError(f"{verb} takes {len(spec)} args: {text!r}")
        args = []
        for w, kind in zip(words[1:], spec):
            if kind == "cell":
                args.append(vocab.parse_cell_token(w))
            elif kind == "index":
                if not (len(w) == 2 and w[0] == "D" and w[1].isdigit() and int(w[1]) < N):
                    raise DecodeError(f"bad index token {w!r}")
                args.append(int(w[1]))
            else:
                if w not in vocab.COLOR_NAMES:
                    raise DecodeError(f"bad color token {w!r}")
                args.append(vocab.COLOR_NAMES.index(w))
        return EditOp(verb, tuple(args))


_ARG_SPEC = {
    "RECOLOR": ("cell", "color"),
    "MOVE": ("cell", "cell"),
    "SWAP": ("cell", "cell"),
    "FILL_ROW": ("index", "color"),
    "FILL_COL": ("index", "color"),
    "BORDER": ("color",),
}


def apply_edit(grid: Grid, op: EditOp) -> Grid:
    arr = grid.to_array()
    if op.verb == "RECOLOR":
        (r, c), color = op.args
        arr[r, c] = color
    elif op.verb == "MOVE":
        (r1, c1), (r2, c2) = op.args
        arr[r2, c2] = arr[r1, c1]
        arr[r1, c1] = 0
    elif op.verb == "SWAP":
        (r1, c1), (r2, c2) = op.args
        arr[r1, c1], arr[r2, c2] = arr[r2, c2], arr[r1, c1]
    elif op.verb == "FILL_ROW":
        r, color = op.args
        arr[r, :] = color
    elif op.verb == "FILL_COL":
        c, color = op.args
        arr[:, c] = color
    elif op.verb == "BORDER":
        (color,) = op.args
        arr[0, :] = color
        arr[-1, :] = color
        arr[:, 0] = color
        arr[:, -1] = color
    return Grid.from_array(arr)


def probe_cell(op: EditOp) -> tuple:
    """Canonical summary cell: the first cell the instruction touches."""
    if op.verb == "RECOLOR":
        return op.args[0]
    if op.verb == "MOVE":
        return op.args[1]
    if op.verb == "SWAP":
        return op.args[0]
    if op.verb == "FILL_ROW":
        return (op.args[0], 0)
    if op.verb == "FILL_COL":
        return (0, op.args[0])
    return (0, 0)  # BORDER


def probe_text(op: EditOp, grid: Grid) -> str:
    r, c = probe_cell(op)
    color = grid.cells[r][c]
    return f"CELL {vocab.cell_token(r, c)} {vocab.COLOR_NAMES[color]}"


def judge(grid: Grid, goal: Grid) -> str:
    """Strict equality oracle; critique names the first mismatch row-major."""
    if grid.height != goal.height or grid.width != goal.width:
        raise ValidationError(
            f"judge dimension mismatch: {grid.height}x{grid.width} vs {goal.height}x{goal.width}")
    for r in range(grid.height):
        for c in range(grid.width):
            if grid.cells[r][c] != goal.cells[r][c]:
                want = vocab.COLOR_NAMES[goal.cells[r][c]]
                return f"FAIL CELL {vocab.cell_token(r, c)} SHOULD_BE {want}"
    return "PASS"


# ---------------------------------------------------------------------------
# Random generation
# ---------------------------------------------------------------------------

def random_grid(rng, min_marks: int = 2, max_marks: int = 6) -> Grid:
    """Sparse scene: BLACK background with a few colored cells."""
    g = Grid.blank()
    arr = g.to_array()
    k = int(rng.integers(min_marks, max_marks + 1))
    cells = rng.choice(N * N, size=k, replace=False)
    for cell in cells:
        arr[cell // N, cell % N] = int(rng.integers(1, vocab.PALETTE_SIZE))
    return Grid.from_array(arr)


def random_op(rng, grid: Grid, verbs=VERBS) -> EditOp:
    """Draw an op that actually changes `grid` (resampled until it does)."""
    for _ in range(100):
        verb = verbs[int(rng.integers(0, len(verbs)))]
        if verb == "RECOLOR":
            op = EditOp(verb, ((int(rng.integers(0, N)), int(rng.integers(0, N))),
                               int(rng.integers(0, vocab.PALETTE_SIZE))))
        elif verb in ("MOVE", "SWAP"):
            a = (int(rng.integers(0, N)), int(rng.integers(0, N)))
            b = (int(rng.integers(0, N)), int(rng.integers(0, N)))
            op = EditOp(verb, (a, b))
        elif verb in ("FILL_ROW", "FILL_COL"):
            op = EditOp(verb, (int(rng.integers(0, N)), int(rng.integers(0, vocab.PALETTE_SIZE))))
        else:
            op = EditOp(verb, (int(rng.integers(0, vocab.PALETTE_SIZE)),))
        if apply_edit(grid, op) != grid:
            return op
    raise ValidationError("could not sample a grid-changing op")


def near_miss(op: EditOp, grid: Grid, goal: Grid, rng) -> EditOp | None:
    """A wrong version of `op`: different color, or a coordinate off by one.

    Resampled until applying it to `grid` does not reach `goal`; returns
    None when no such perturbation exists (degenerate color clusters), in
    which case the caller skips injection.
    """
    for _ in range(60):
        kind = "color" if rng.uniform() < 0.8 else "coord"
        wrong = _perturb(op, kind, rng)
        if apply_edit(grid, wrong) != goal:
            return wrong
    return None


def _shift_index(v: int, rng) -> int:
    step = 1 if rng.uniform() < 0.5 else -1
    if not 0 <= v + step < N:
        step = -step
    return v + step


def _perturb(op: EditOp, kind: str, rng) -> EditOp:
    spec = _ARG_SPEC[op.verb]
    args = list(op.args)
    color_slots = [i for i, k in enumerate(spec) if k == "color"]
    # Coordinate slips only on cell-addressed arguments; a slipped row/border
    # fill would need a repair chain far longer than the self-check budget.
    cell_slots = [i for i, k in enumerate(spec) if k == "cell"]
    if (kind == "color" or not cell_slots) and color_slots:
        i = color_slots[0]
        new = int(rng.integers(0, vocab.PALETTE_SIZE - 1))
        if new >= args[i]:
            new += 1
        args[i] = new
    else:
        i = cell_slots[int(rng.integers(0, len(cell_slots)))]
        r, c = args[i]
        if rng.uniform() < 0.5:
            args[i] = (_shift_index(r, rng), c)
        else:
            args[i] = (r, _shift_index(c, rng))
    return EditOp(op.verb, tuple(args))


@dataclass
class TaskSpec:
    prompt: str
    initial: Grid
    goal: Grid
    decomposition: list  # one group (list of EditOps) per subtask

    def validate(self) -> None:
        g = self.initial
        for group in self.decomposition:
            for op in group:
                g = apply_edit(g, op)
        if g != self.goal:
            raise ValidationError("reference decomposition does not produce the goal")


def task_rng(split: str, seed: int, index: int):
    """Disjoint deterministic streams for train vs eval task generation."""
    return make_rng(0x7A5C, _SPLIT_TAG[split], seed, index)


def generate_task(rng, n_subtasks: int | None = None, holdout: bool = False) -> TaskSpec:
    """One task: sparse initial grid plus 1-3 chained single-op subtasks.

    Training tasks never combine the held-out verb pair; `holdout=True`
    forces that pair in, for compositional generalization measurement.
    """
    if n_subtasks is None:
        n_subtasks = int(rng.integers(1, 4))
    initial = random_grid(rng)
    for _ in range(200):
        ops = []
        g = initial
        if holdout and n_subtasks >= 2:
            pair = sorted(HOLDOUT_VERB_PAIR)
            order = [pair[0], pair[1]] if rng.uniform() < 0.5 else [pair[1], pair[0]]
            for k in range(n_subtasks):
                verb = order[k] if k < 2 else VERBS[int(rng.integers(0, len(VERBS)))]
                op = random_op(rng, g, verbs=(verb,))
                ops.append(op)
                g = apply_edit(g, op)
        else:
            for _ in range(n_subtasks):
                op = random_op(rng, g)
                ops.append(op)
                g = apply_edit(g, op)
        verbs = {op.verb for op in ops}
        if not holdout and HOLDOUT_VERB_PAIR <= verbs:
            continue
        prompt = " THEN ".join(op.to_text() for op in ops)
        spec = TaskSpec(prompt, initial, g, [[op] for op in ops])
        spec.validate()
        return spec
    raise ValidationError("could not generate a task")


# ---------------------------------------------------------------------------
# Trajectory synthesis
# ---------------------------------------------------------------------------

def corrective_op(instruction: EditOp, current: Grid, goal: Grid) -> EditOp:
    """Repair policy: re-apply the instruction if that lands on the goal,
    otherwise recolor the first differing cell."""
    if apply_edit(current, instruction) == goal:
        return instruction
    for r in range(N):
        for c in range(N):
            if current.cells[r][c] != goal.cells[r][c]:
                return EditOp("RECOLOR", ((r, c), goal.cells[r][c]))
    raise ValidationError("corrective_op called with current == goal")


def synthesize_trajectory(spec: TaskSpec, injection_rate: float, rng, seed: int = 0) -> TrajectoryRecord:
    """Turn a task into a full training trajectory.

    Each subtask starts from the previous outcome, is judged (failing,
    since the edit is still to be made), acted on (with probability
    `injection_rate` the first attempt is a near-miss), then re-judged and
    repaired until the judge passes. Wrong attempts stay in the record as
    context but are not text-supervised.
    """
    subtasks = []
    g = spec.initial
    for group in spec.decomposition:
        if len(group) != 1:
            raise ValidationError("synthesis expects single-op subtask groups")
        op = group[0]
        goal = apply_edit(g, op)
        nodes = []
        inject = rng.uniform() < injection_rate
        first_action = near_miss(op, g, goal, rng) if inject else op
        if first_action is None:
            inject = False
            first_action = op
        cur = apply_edit(g, first_action)
        nodes.append(MicroNodeRecord(
            state_text=probe_text(op, g),
            reward=judge(g, goal),
            action=first_action.to_text(),
            action_grid=cur.to_text(),
            action_supervised=not inject,
        ))
        for _ in range(3 * N * N):
            verdict = judge(cur, goal)
            if verdict == "PASS":
                nodes.append(MicroNodeRecord(state_text=probe_text(op, cur), reward=verdict))
                break
            corr = corrective_op(op, cur, goal)
            nxt = apply_edit(cur, corr)
            nodes.append(MicroNodeRecord(
                state_text=probe_text(op, cur),
                reward=verdict,
                action=corr.to_text(),
                action_grid=nxt.to_text(),
                action_supervised=True,
            ))
            cur = nxt
        else:
            raise ValidationError("repair loop did not terminate")
        subtasks.append(SubtaskRecord(
            instruction=op.to_text(),
            input=g.to_text(),
            nodes=nodes,
            outcome_grid=cur.to_text(),
            outcome_text="PASS",
        ))
        g = cur
    return TrajectoryRecord(seed=seed, user=spec.prompt,
                            plan=[grp[0].to_text() for grp in spec.decomposition],
                            subtasks=subtasks)


def attempt_count(sub: SubtaskRecord) -> int:
    """Number of acted rounds (MDP transitions) in a subtask record."""
    return sum(1 for n in sub.nodes if n.action is not None)


def validate_record(record: TrajectoryRecord) -> list:
    """Integrity checks for one trajectory; returns a list of problems."""
    from .sequence import build_layout  # local import to keep module deps one-way

    problems = []
    if not record.plan:
        problems.append("empty plan")
    if len(record.plan) != len(record.subtasks):
        problems.append("plan length != subtask count")
    for text in record.plan:
        try:
            EditOp.from_text(text)
        except DecodeError as e:
            problems.append(f"plan item unparseable: {e}")
    g_prev = None
    for m, sub in enumerate(record.subtasks):
        try:
            op = EditOp.from_text(sub.instruction)
        except DecodeError as e:
            problems.append(f"subtask {m} instruction unparseable: {e}")
            continue
        if sub.input is None:
            problems.append(f"subtask {m} missing input grid")
            continue
        gin = Grid.from_text(sub.input)
        if g_prev is not None and gin != g_prev:
            problems.append(f"subtask {m} input does not chain from previous outcome")
        goal = apply_edit(gin, op)
        if sub.outcome_grid is None or Grid.from_text(sub.outcome_grid) != goal:
            problems.append(f"subtask {m} outcome grid does not match its goal")
        if not sub.nodes:
            problems.append(f"subtask {m} has no rounds")
        else:
            last = sub.nodes[-1]
            if last.reward != "PASS":
                problems.append(f"subtask {m} does not end in PASS")
        g_prev = Grid.from_text(sub.outcome_grid) if sub.outcome_grid else None
    try:
        build_layout(record)
    except Exception as e:  # noqa: BLE001 - any layout failure is a data problem
        problems.append(f"layout build failed: {e}")
    return problems


def generate_dataset(n_tasks: int, seed: int, injection_rate: float = 0.3,
                     split: str = "train", max_tokens: int = 2048) -> list:
    """Deterministic batch of synthesized trajectories.

    Trajectories whose canonical layout would not fit the training token
    budget (rare pile-ups of injected errors) are regenerated with fresh
    draws from the same stream.
    """
    from .sequence import build_layout

    records = []
    for i in range(n_tasks):
        rng = task_rng(split, seed, i)
        for _ in range(20):
            spec = generate_task(rng)
            rec = synthesize_trajectory(spec, injection_rate, rng, seed=i)
            if len(build_layout(rec)) <= max_tokens:
                break
        else:
            raise ValidationError("could not fit a trajectory into the token budget")
        records.append(rec)
    return records

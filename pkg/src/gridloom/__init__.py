"""gridloom: a two-tier plan/execute reasoner over a synthetic grid world.

A single decoder with two hard-routed expert parameter sets attends
jointly over interleaved text and image tokens; task-level planning and
subtask-level execution each see the sequence through their own
visibility mask. Images live in an exactly invertible latent code and
are generated by integrating a learned rectified-flow velocity field.
Subtasks run as judge-act loops that revise until their own verdict
passes.
"""

from .codec import Grid, PaletteCodebook, default_codebook
from .model import ExpertParams, ModelConfig, forward, init_params
from .sequence import SequenceLayout, build_layout, pack
from .tasks import EditOp, TaskSpec, apply_edit, judge

__all__ = [
    "EditOp", "ExpertParams", "Grid", "ModelConfig", "PaletteCodebook",
    "SequenceLayout", "TaskSpec", "apply_edit", "build_layout",
    "default_codebook", "forward", "init_params", "judge", "pack",
]

__version__ = "0.1.0"

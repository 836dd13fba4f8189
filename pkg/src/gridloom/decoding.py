"""Greedy text decoding and flow-based image generation over layouts.

A runner owns the trained weights and exposes two operations that both
append a complete segment to a LayoutBuilder: `decode_text_segment`
(greedy argmax, ties broken toward the lowest token id, stopped by the
end marker or the slot width) and `generate_image_segment` (Euler
integration of the velocity head over the latent rows). Decoding always
recomputes the full forward pass per step; there is no incremental cache
at this scale.
"""

import numpy as np

from . import vocab
from .codec import Grid, default_codebook
from .errors import DecodeError
from .flow import integrate, sample_start
from .masks import compile_macro_mask, compile_micro_mask
from .model import ExpertParams, ModelConfig, forward
from .numeric import no_grad
from .sequence import N_CELLS, OP_WIDTH, OPENERS, LayoutBuilder, SegmentKind

_COMPILERS = {"macro": compile_macro_mask, "micro": compile_micro_mask}


class NeuralRunner:
    """Decodes with a trained parameter set."""

    def __init__(self, params: ExpertParams, config: ModelConfig, flow_steps: int = 16):
        self.params = params
        self.config = config
        self.flow_steps = flow_steps
        self.codebook = default_codebook()
        self.forward_calls = 0  # logical clock source for traces

    # lifecycle hooks; the neural path needs no task-side information
    def on_task_start(self, user_text: str, initial: Grid) -> None:
        pass

    def on_subtask_start(self, instruction: str, input_grid: Grid) -> None:
        pass

    def _logits_at_end(self, builder: LayoutBuilder, scheme: str) -> np.ndarray:
        layout = builder.snapshot()
        mask = _COMPILERS[scheme](layout)
        with no_grad():
            out = forward(layout, mask, self.params, self.config)
        self.forward_calls += 1
        return out.text_logits.data[-1]

    def decode_text_segment(self, builder: LayoutBuilder, kind: SegmentKind, step: int,
                            node: int, width: int, scheme: str) -> list:
        builder.open_segment(kind, step, node)
        builder.append_id(OPENERS[kind])
        content: list[int] = []
        while len(content) < width:
            logits = self._logits_at_end(builder, scheme)
            next_id = int(np.argmax(logits))
            if next_id == vocab.END_ID:
                break
            builder.append_id(next_id)
            content.append(next_id)
        builder.append_id(vocab.END_ID)
        for _ in range(width - len(content)):
            builder.append_id(vocab.PAD_ID)
        builder.close_segment()
        return content

    def generate_image_segment(self, builder: LayoutBuilder, kind: SegmentKind, step: int,
                               node: int, rng: np.random.Generator, scheme: str,
                               flow_steps: int | None = None) -> Grid:
        steps = flow_steps or self.flow_steps
        builder.open_segment(kind, step, node)
        builder.append_id(vocab.IMG_ID)
        x1 = sample_start((N_CELLS, self.codebook.d_lat), rng)
        start = len(builder)
        for i in range(N_CELLS):
            builder.append_latent(x1[i], np.zeros(self.codebook.d_lat), target=False,
                                  flow_time=1.0)
        builder.append_id(vocab.IMG_END_ID)
        builder.close_segment()
        positions = np.arange(start, start + N_CELLS, dtype=np.int64)
        layout0 = builder.snapshot()
        mask = _COMPILERS[scheme](layout0)

        def velocity_fn(x, t):
            builder.set_latents(positions, x, t)
            layout = builder.snapshot()
            with no_grad():
                out = forward(layout, mask, self.params, self.config)
            self.forward_calls += 1
            return out.velocity.data[positions]

        x0 = integrate(velocity_fn, x1, steps)
        builder.set_latents(positions, x0, 0.0)
        return self.codebook.decode_gen(x0)


def micro_window(instruction_text: str, current: Grid, codebook=None) -> LayoutBuilder:
    """Fresh execution window: system words, instruction, current state image.

    Every judged round is decoded in such a window, so round decisions
    depend only on the instruction and the current state by construction.
    """
    b = LayoutBuilder(codebook or default_codebook())
    b.add_system_segment()
    b.add_text_segment(SegmentKind.SUBTASK_INSTRUCTION, vocab.encode(instruction_text),
                       OP_WIDTH, step=0)
    b.add_image_segment(SegmentKind.MICRO_STATE_IMAGE, current, include_gen=False,
                        include_und=True, step=0, node=0)
    return b


def decode_with_retry(builder: LayoutBuilder, decode_fn, parse_fn, what: str):
    """Run decode, parse; on a malformed result roll the builder back and
    retry once, then raise.

    Greedy text decoding is deterministic, so its retry reproduces the
    first attempt; the bounded-retry contract is uniform anyway so decode
    sites with their own randomness behave the same way.
    """
    mark = builder.mark()
    first_error = None
    for attempt in range(2):
        result = decode_fn()
        try:
            return result, parse_fn(result)
        except DecodeError as e:
            first_error = e
            if attempt == 0:
                builder.truncate(mark)
    raise DecodeError(f"malformed {what} after retry: {first_error}")

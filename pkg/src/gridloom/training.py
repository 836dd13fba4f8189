"""Supervised training: loss assembly, schedule, batch packing, checkpoints.

The total objective is a weighted sum of the text cross-entropy (weight
0.25 by default) and the flow-matching regression on latent image
targets; a sample missing one modality simply contributes zero for it.
Batches are assembled statelessly per step from the base seed and step
index, so an interrupted run resumed from a checkpoint replays exactly
the batches the uninterrupted run would have seen.
"""

import os
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, NonFiniteError, ShapeError
from .flow import flow_loss, make_flow_sample
from .masks import compile_macro_mask, compile_micro_mask
from .mdp import AuxTaskKind, build_aux_sample, transitions_from_record
from .model import (ExpertParams, ForwardOutput, ModelConfig, forward,
                    init_params, load_checkpoint, save_checkpoint)
from .numeric import Tensor, backward, log_sigmoid, mul, softmax_cross_entropy, take_rows, tmean, tensor
from .optim import AdamState, adam_step
from .rng import make_rng
from .sequence import PackedBatch, SegmentKind, SequenceLayout, TokenRole, build_layout, pack
from .tasks import attempt_count


@dataclass
class TrainConfig:
    lambda_ce: float = 0.25
    lr: float = 2e-5
    warmup_steps: int = 200
    token_budget: int = 2048
    total_steps: int = 200
    seed: int = 0
    checkpoint_every: int = 500
    draws_per_step: int = 32
    # sampling weights over the four auxiliary kinds plus full trajectories
    mix_text_action: float = 1.0
    mix_image_action: float = 1.0
    mix_next_state: float = 1.0
    mix_reward_est: float = 1.0
    mix_macro: float = 1.0

    def __post_init__(self):
        if self.lambda_ce <= 0:
            raise ConfigError("lambda_ce must be positive")
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps cannot exceed total_steps")

    def mix_weights(self) -> np.ndarray:
        w = np.array([self.mix_text_action, self.mix_image_action, self.mix_next_state,
                      self.mix_reward_est, self.mix_macro], dtype=np.float64)
        if w.sum() <= 0 or (w < 0).any():
            raise ConfigError("mixing weights must be non-negative with positive sum")
        return w / w.sum()


_MIX_KINDS = (AuxTaskKind.TEXT_ACTION, AuxTaskKind.IMAGE_ACTION, AuxTaskKind.NEXT_STATE,
              AuxTaskKind.REWARD_EST, "macro")


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear ramp from zero over the warmup, constant afterwards."""
    if step < 0:
        raise ConfigError("negative step")
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    return cfg.lr


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood over the given label rows."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ShapeError("cross-entropy over an empty target set")
    return tmean(softmax_cross_entropy(logits, labels))


def total_loss(output: ForwardOutput, batch, cfg: TrainConfig):
    """Weighted text + image objective over a layout or packed batch.

    Text targets are scored by the logits one position earlier (their
    labels are their own token ids); image targets regress the velocity
    rows against clean-minus-noise.
    """
    if isinstance(batch, SequenceLayout):
        batch = PackedBatch([batch], [0])
    ids = batch.concat("ids")
    roles = batch.concat("roles")
    targets = batch.concat("is_loss_target")
    clean = batch.concat("clean_latents")
    x1 = batch.concat("flow_x1")
    text_pos = np.flatnonzero(targets & (roles != TokenRole.VIS_G))
    img_pos = np.flatnonzero(targets & (roles == TokenRole.VIS_G))
    if text_pos.size == 0 and img_pos.size == 0:
        raise ShapeError("batch has no loss targets")
    comps = {"ce": 0.0, "mse": 0.0, "n_text": int(text_pos.size), "n_image": int(img_pos.size)}
    dtype = output.text_logits.dtype
    total = None
    if text_pos.size:
        ce = ce_loss(take_rows(output.text_logits, text_pos - 1), ids[text_pos])
        comps["ce"] = ce.item()
        total = mul(ce, tensor(cfg.lambda_ce, dtype=dtype))
    if img_pos.size:
        mse = flow_loss(take_rows(output.velocity, img_pos), clean[img_pos], x1[img_pos])
        comps["mse"] = mse.item()
        total = mse if total is None else total + mse
    comps["total"] = total.item()
    return total, comps


def noise_flow_targets(layout: SequenceLayout, rng) -> None:
    """Draw one (t, noise) pair per target image and install the interpolant
    as the model input; context images stay clean at t=0."""
    for group in layout.image_groups:
        if not group.is_target:
            continue
        fs = make_flow_sample(group.clean, rng)
        layout.latents[group.positions] = fs.xt
        layout.flow_time[group.positions] = fs.t
        layout.flow_x1[group.positions] = fs.x1


def _is_macro_layout(layout: SequenceLayout) -> bool:
    return any(seg.kind == SegmentKind.PLAN for seg in layout.segments)


def mask_for(layout: SequenceLayout):
    return compile_macro_mask(layout) if _is_macro_layout(layout) else compile_micro_mask(layout)


def draw_sample(records, rng, weights) -> SequenceLayout:
    """One training layout: a full trajectory or one auxiliary sample."""
    kind = _MIX_KINDS[int(rng.choice(len(_MIX_KINDS), p=weights))]
    for _ in range(50):
        rec = records[int(rng.integers(0, len(records)))]
        if kind == "macro":
            layout = build_layout(rec)
            noise_flow_targets(layout, rng)
            return layout
        sub = rec.subtasks[int(rng.integers(0, len(rec.subtasks)))]
        transitions = transitions_from_record(sub)
        if not transitions:
            continue
        tr = transitions[int(rng.integers(0, len(transitions)))]
        if kind == AuxTaskKind.TEXT_ACTION and not tr.action_supervised:
            continue  # injected wrong actions are never text labels
        layout = build_aux_sample(kind, tr, sub.instruction)
        noise_flow_targets(layout, rng)
        return layout
    raise ConfigError("could not draw a training sample (dataset too degenerate)")


def make_batch(records, cfg: TrainConfig, step: int):
    """Stateless per-step batch: draw, first-fit into the token budget."""
    rng = make_rng(0xB0, cfg.seed, step)
    weights = cfg.mix_weights()
    layouts = []
    used = 0
    misses = 0
    for _ in range(cfg.draws_per_step):
        layout = draw_sample(records, rng, weights)
        if used + len(layout) <= cfg.token_budget:
            layouts.append(layout)
            used += len(layout)
        else:
            misses += 1
            if misses >= 3:
                break
    batch = pack(layouts, cfg.token_budget)[0]
    masks = [mask_for(l) for l in batch.layouts]
    return batch, masks


def sft_step(params: ExpertParams, adam: AdamState, batch, masks, cfg: TrainConfig,
             step: int):
    """One optimization step; deterministic given (params, batch, step)."""
    try:
        out = forward(batch, masks, params, params.config)
        loss, comps = total_loss(out, batch, cfg)
        grads = backward(loss, params.as_dict())
    except NonFiniteError as e:
        raise NonFiniteError(f"non-finite loss/gradient at step {step}: {e}") from None
    lr = lr_schedule(step, cfg)
    adam_step(params.as_dict(), grads, adam, lr=lr)
    comps["lr"] = lr
    return comps


CURVE_HEADER = "step\tlr\ttotal\tce\tmse\tn_text\tn_image"


def curve_row(step: int, comps: dict) -> str:
    return (f"{step}\t{comps['lr']:.8e}\t{comps['total']:.8e}\t{comps['ce']:.8e}\t"
            f"{comps['mse']:.8e}\t{comps['n_text']}\t{comps['n_image']}")


def train_loop(records, model_cfg: ModelConfig, cfg: TrainConfig, out_dir,
               resume_from=None, log_every: int = 25, progress=None):
    """Full SFT run with periodic checkpoints; returns (params, adam, rows)."""
    os.makedirs(out_dir, exist_ok=True)
    if resume_from:
        params, model_cfg, extras = load_checkpoint(resume_from)
        adam = extras["adam"]
        start = extras["step"]
    else:
        params = init_params(model_cfg, seed=cfg.seed)
        adam = AdamState(lr=cfg.lr)
        start = 0
    rows = []
    curve_path = os.path.join(out_dir, "loss_curve.tsv")
    mode = "a" if resume_from else "w"
    with open(curve_path, mode, encoding="utf-8") as curve:
        if not resume_from:
            curve.write(CURVE_HEADER + "\n")
        for step in range(start, cfg.total_steps):
            batch, masks = make_batch(records, cfg, step)
            comps = sft_step(params, adam, batch, masks, cfg, step)
            row = curve_row(step, comps)
            rows.append(row)
            curve.write(row + "\n")
            if progress and (step % log_every == 0 or step == cfg.total_steps - 1):
                progress(step, comps)
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(os.path.join(out_dir, f"ckpt_{step + 1:06d}.npz"),
                                params, adam=adam, step=step + 1)
    save_checkpoint(os.path.join(out_dir, "ckpt_final.npz"), params, adam=adam,
                    step=cfg.total_steps)
    return params, adam, rows


# ---------------------------------------------------------------------------
# Preference loss (text pathway only; not wired into the default pipeline)
# ---------------------------------------------------------------------------

def dpo_text_loss(policy_chosen, policy_rejected, ref_chosen, ref_rejected,
                  beta: float = 0.1) -> Tensor:
    """-log sigmoid(beta * ((pi_c - pi_r) - (rho_c - rho_r))) over sequence
    log-probabilities; reference scores are mandatory."""
    if ref_chosen is None or ref_rejected is None:
        raise ShapeError("dpo_text_loss requires reference log-probabilities")
    pc = policy_chosen if isinstance(policy_chosen, Tensor) else tensor(policy_chosen, dtype=np.float64)
    pr = policy_rejected if isinstance(policy_rejected, Tensor) else tensor(policy_rejected, dtype=np.float64)
    rc = ref_chosen if isinstance(ref_chosen, Tensor) else tensor(ref_chosen, dtype=np.float64)
    rr = ref_rejected if isinstance(ref_rejected, Tensor) else tensor(ref_rejected, dtype=np.float64)
    margin = (pc - pr) - (rc - rr)
    return mul(log_sigmoid(mul(margin, tensor(beta, dtype=margin.dtype))),
               tensor(-1.0, dtype=margin.dtype))


def sequence_logprob(params: ExpertParams, layout: SequenceLayout) -> Tensor:
    """Total log-probability of a layout's text targets under the model."""
    mask = mask_for(layout)
    out = forward(layout, mask, params, params.config)
    targets = np.flatnonzero(layout.is_loss_target & (layout.roles != TokenRole.VIS_G))
    if targets.size == 0:
        raise ShapeError("layout has no text targets to score")
    nll = softmax_cross_entropy(take_rows(out.text_logits, targets - 1), layout.ids[targets])
    return mul(tmean(nll), tensor(-float(targets.size), dtype=nll.dtype))


# ---------------------------------------------------------------------------
# Dataset statistics (validation reporting)
# ---------------------------------------------------------------------------

def dataset_stats(records) -> dict:
    n_sub = sum(len(r.subtasks) for r in records)
    multi = sum(1 for r in records for s in r.subtasks if attempt_count(s) > 1)
    return {
        "trajectories": len(records),
        "subtasks": n_sub,
        "multi_attempt_subtasks": multi,
        "multi_attempt_rate": multi / n_sub if n_sub else 0.0,
        "plan_sizes": {str(k): sum(1 for r in records if len(r.plan) == k) for k in (1, 2, 3)},
    }

"""Dual-expert decoder over interleaved multimodal sequences.

One joint self-attention runs over the whole sequence, but every token is
projected (QKV, output, feed-forward, norms) by exactly one of two
parameter sets chosen by token role: continuous latent tokens go to the
generation expert, everything else to the understanding expert. Routing
is hard and data-independent, so on a sequence with no latent tokens the
generation weights are provably untouched.

Shared across experts: token embeddings, learned absolute position
embeddings, the latent input projection, the timestep projection for
noise-level conditioning, and both output heads (text logits, velocity).

Latent tokens additionally receive an additive sinusoidal embedding of
their noise time before the first layer.
"""

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import vocab
from .codec import D_LAT
from .errors import LayoutError, ShapeError
from .masks import MaskSpec
from .numeric import (Tensor, add, embedding, layer_norm, masked_softmax,
                      matmul, param, put_rows, relu_sq, reshape, scale, take_rows,
                      tensor, transpose)
from .rng import make_rng
from .sequence import PackedBatch, SequenceLayout, TokenRole

CHECKPOINT_VERSION = 1

_ATTN_CHUNK = 320

EXPERTS = ("und", "gen")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    width: int = 64
    heads: int = 4
    vocab_size: int = vocab.VOCAB_SIZE
    d_lat: int = D_LAT
    max_positions: int = 4096
    ffn_mult: int = 4

    def __post_init__(self):
        if self.width % self.heads:
            raise ShapeError("width must be divisible by heads")
        if self.d_lat <= 0:
            raise ShapeError("d_lat must be positive")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


def route(role: TokenRole) -> str:
    """Hard gating: latent tokens to the generation expert, rest to understanding."""
    return "gen" if role == TokenRole.VIS_G else "und"


class ExpertParams:
    """Named parameter store; two structurally identical expert sets plus shared."""

    def __init__(self, tensors: dict, config: ModelConfig):
        self.tensors = tensors
        self.config = config

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self):
        return sorted(self.tensors)

    def expert_names(self, expert: str):
        return [n for n in self.names() if n.startswith(expert + ".")]

    def as_dict(self) -> dict:
        return self.tensors


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ExpertParams:
    rng = make_rng(seed, 0x9A)
    w = config.width

    def normal(*shape):
        return param((rng.standard_normal(shape) * 0.02), dtype=dtype)

    def zeros(*shape):
        return param(np.zeros(shape), dtype=dtype)

    def ones(*shape):
        return param(np.ones(shape), dtype=dtype)

    t: dict = {
        "tok_emb": normal(config.vocab_size, w),
        "pos_emb": normal(config.max_positions, w),
        "lat_in.w": normal(config.d_lat, w),
        "lat_in.b": zeros(w),
        "time.w": normal(w, w),
        "time.b": zeros(w),
        "text_head.w": normal(w, config.vocab_size),
        "text_head.b": zeros(config.vocab_size),
        "vel_head.w": normal(w, config.d_lat),
        "vel_head.b": zeros(config.d_lat),
    }
    hidden = w * config.ffn_mult
    for e in EXPERTS:
        for l in range(config.layers):
            p = f"{e}.{l}."
            t[p + "ln1.g"] = ones(w)
            t[p + "ln1.b"] = zeros(w)
            t[p + "attn.wq"] = normal(w, w)
            t[p + "attn.bq"] = zeros(w)
            t[p + "attn.wk"] = normal(w, w)
            t[p + "attn.bk"] = zeros(w)
            t[p + "attn.wv"] = normal(w, w)
            t[p + "attn.bv"] = zeros(w)
            t[p + "attn.wo"] = normal(w, w)
            t[p + "attn.bo"] = zeros(w)
            t[p + "ln2.g"] = ones(w)
            t[p + "ln2.b"] = zeros(w)
            t[p + "ffn.w1"] = normal(w, hidden)
            t[p + "ffn.b1"] = zeros(hidden)
            t[p + "ffn.w2"] = normal(hidden, w)
            t[p + "ffn.b2"] = zeros(w)
        t[f"{e}.lnf.g"] = ones(w)
        t[f"{e}.lnf.b"] = zeros(w)
    return ExpertParams(t, config)


def time_features(ts: np.ndarray, width: int, dtype) -> np.ndarray:
    """Sinusoidal features of the noise time, geometric frequency ladder."""
    half = width // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))
    ang = np.asarray(ts, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


@dataclass
class ForwardOutput:
    """Dense head outputs; exactly one head is meaningful per position."""

    text_logits: Tensor   # (T, vocab)
    velocity: Tensor      # (T, d_lat)
    roles: np.ndarray
    attention: list | None = None

    def active_head(self, i: int) -> str:
        return "velocity" if self.roles[i] == TokenRole.VIS_G else "text"


def _normalize_inputs(batch, masks):
    if isinstance(batch, SequenceLayout):
        layouts = [batch]
        mask_list = [masks] if isinstance(masks, MaskSpec) else list(masks)
    elif isinstance(batch, PackedBatch):
        layouts = batch.layouts
        mask_list = list(masks)
    else:
        raise ShapeError(f"forward expects SequenceLayout or PackedBatch, got {type(batch)}")
    if len(mask_list) != len(layouts):
        raise ShapeError("one mask per layout required")
    for l, m in zip(layouts, mask_list):
        if m.length != len(l):
            raise ShapeError(f"mask length {m.length} != layout length {len(l)}")
    return layouts, mask_list


def forward(batch, masks, params: ExpertParams, config: ModelConfig,
            collect_attention: bool = False) -> ForwardOutput:
    """Run the decoder over one layout or a packed batch of layouts.

    `masks` is the per-layout compiled MaskSpec (a list for packed input);
    attention never crosses layout boundaries and positions restart per
    layout.
    """
    layouts, mask_list = _normalize_inputs(batch, masks)
    ids = np.concatenate([l.ids for l in layouts])
    roles = np.concatenate([l.roles for l in layouts])
    latents = np.concatenate([l.latents for l in layouts])
    flow_time = np.concatenate([l.flow_time for l in layouts])
    positions = np.concatenate([l.positions for l in layouts])
    for l in layouts:
        if len(l) > config.max_positions:
            raise LayoutError(f"layout length {len(l)} exceeds max positions {config.max_positions}")
    total = len(ids)
    dtype = params["tok_emb"].dtype
    spans = []
    off = 0
    for l in layouts:
        spans.append((off, off + len(l)))
        off += len(l)

    idx = {"und": np.flatnonzero(roles != TokenRole.VIS_G),
           "gen": np.flatnonzero(roles == TokenRole.VIS_G)}

    # Input assembly: discrete embeddings, latent projections with timestep
    # conditioning, shared position embeddings.
    h = embedding(params["pos_emb"], positions)
    disc = embedding(params["tok_emb"], ids[idx["und"]])
    h = add(h, put_rows(disc, idx["und"], total))
    if idx["gen"].size:
        lat_rows = tensor(latents[idx["gen"]], dtype=dtype)
        lat_h = add(matmul(lat_rows, params["lat_in.w"]), params["lat_in.b"])
        tf = tensor(time_features(flow_time[idx["gen"]], config.width, dtype))
        lat_h = add(lat_h, add(matmul(tf, params["time.w"]), params["time.b"]))
        h = add(h, put_rows(lat_h, idx["gen"], total))

    def scatter_experts(x_by_expert):
        """Merge per-expert row blocks back into sequence order."""
        parts = [put_rows(x_by_expert[e], idx[e], total) for e in EXPERTS if idx[e].size]
        out = parts[0]
        for p in parts[1:]:
            out = add(out, p)
        return out

    head_scale = 1.0 / np.sqrt(config.head_dim)
    dense_masks = [m.dense() for m in mask_list]
    attn_record: list = []
    for l in range(config.layers):
        # Attention sublayer.
        qkv = {}
        for e in EXPERTS:
            if idx[e].size == 0:
                continue
            xe = take_rows(h, idx[e])
            ae = layer_norm(xe, params[f"{e}.{l}.ln1.g"], params[f"{e}.{l}.ln1.b"])
            qkv[e] = tuple(
                add(matmul(ae, params[f"{e}.{l}.attn.w{n}"]), params[f"{e}.{l}.attn.b{n}"])
                for n in ("q", "k", "v"))
        q = scatter_experts({e: qkv[e][0] for e in qkv})
        k = scatter_experts({e: qkv[e][1] for e in qkv})
        v = scatter_experts({e: qkv[e][2] for e in qkv})

        layer_attn = []
        mixed_parts = []
        for (st, en), dmask in zip(spans, dense_masks):
            ts = en - st
            full_probs = np.zeros((config.heads, ts, ts), dtype=dtype) if collect_attention else None
            # Row chunks with causal column truncation: rows [r0, r1) never
            # see columns >= r1, so long samples pay ~half the dense cost.
            chunk = ts if ts <= _ATTN_CHUNK else _ATTN_CHUNK
            for r0 in range(0, ts, chunk):
                r1 = min(r0 + chunk, ts)
                q3 = transpose(reshape(take_rows(q, np.arange(st + r0, st + r1)),
                                       (r1 - r0, config.heads, config.head_dim)), (1, 0, 2))
                k3 = transpose(reshape(take_rows(k, np.arange(st, st + r1)),
                                       (r1, config.heads, config.head_dim)), (1, 0, 2))
                v3 = transpose(reshape(take_rows(v, np.arange(st, st + r1)),
                                       (r1, config.heads, config.head_dim)), (1, 0, 2))
                scores = scale(matmul(q3, transpose(k3, (0, 2, 1))), head_scale)
                probs = masked_softmax(scores, dmask[r0:r1, :r1])
                if collect_attention:
                    full_probs[:, r0:r1, :r1] = probs.data
                mix = matmul(probs, v3)
                mix2 = reshape(transpose(mix, (1, 0, 2)), (r1 - r0, config.width))
                mixed_parts.append(put_rows(mix2, np.arange(st + r0, st + r1), total))
            if collect_attention:
                layer_attn.append(full_probs)
        mixed = mixed_parts[0]
        for p in mixed_parts[1:]:
            mixed = add(mixed, p)
        if collect_attention:
            attn_record.append(layer_attn)

        proj = {}
        for e in EXPERTS:
            if idx[e].size == 0:
                continue
            me = take_rows(mixed, idx[e])
            proj[e] = add(matmul(me, params[f"{e}.{l}.attn.wo"]), params[f"{e}.{l}.attn.bo"])
        h = add(h, scatter_experts(proj))

        # Feed-forward sublayer.
        ff = {}
        for e in EXPERTS:
            if idx[e].size == 0:
                continue
            xe = take_rows(h, idx[e])
            ae = layer_norm(xe, params[f"{e}.{l}.ln2.g"], params[f"{e}.{l}.ln2.b"])
            inner = relu_sq(add(matmul(ae, params[f"{e}.{l}.ffn.w1"]), params[f"{e}.{l}.ffn.b1"]))
            ff[e] = add(matmul(inner, params[f"{e}.{l}.ffn.w2"]), params[f"{e}.{l}.ffn.b2"])
        h = add(h, scatter_experts(ff))

    fin = {}
    for e in EXPERTS:
        if idx[e].size == 0:
            continue
        xe = take_rows(h, idx[e])
        fin[e] = layer_norm(xe, params[f"{e}.lnf.g"], params[f"{e}.lnf.b"])
    hf = scatter_experts(fin)

    text_logits = add(matmul(hf, params["text_head.w"]), params["text_head.b"])
    velocity = add(matmul(hf, params["vel_head.w"]), params["vel_head.b"])
    return ForwardOutput(text_logits, velocity, roles,
                         attn_record if collect_attention else None)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ExpertParams, adam=None, step: int | None = None) -> None:
    """Versioned binary container: named parameter entries plus config."""
    arrays = {"__version__": np.asarray(CHECKPOINT_VERSION),
              "__config__": np.frombuffer(
                  json.dumps(dataclasses.asdict(params.config), sort_keys=True).encode(),
                  dtype=np.uint8)}
    for name, t in params.tensors.items():
        arrays["p:" + name] = t.data
    if adam is not None:
        for name in adam.m:
            arrays["am:" + name] = adam.m[name]
            arrays["av:" + name] = adam.v[name]
        arrays["__adam__"] = np.asarray([adam.step], dtype=np.int64)
        arrays["__adam_hp__"] = np.asarray([adam.lr, adam.beta1, adam.beta2, adam.eps])
    if step is not None:
        arrays["__step__"] = np.asarray([step], dtype=np.int64)
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Returns (params, config, extras) where extras may hold adam state and step."""
    from .optim import AdamState

    with np.load(path, allow_pickle=False) as z:
        if int(z["__version__"]) != CHECKPOINT_VERSION:
            raise ShapeError(f"unsupported checkpoint version {int(z['__version__'])}")
        cfg = ModelConfig(**json.loads(bytes(z["__config__"]).decode()))
        tensors = {}
        for key in z.files:
            if key.startswith("p:"):
                tensors[key[2:]] = param(z[key])
        extras: dict = {}
        if "__adam__" in z.files:
            hp = z["__adam_hp__"]
            adam = AdamState(lr=float(hp[0]), beta1=float(hp[1]), beta2=float(hp[2]),
                             eps=float(hp[3]), step=int(z["__adam__"][0]))
            for key in z.files:
                if key.startswith("am:"):
                    adam.m[key[3:]] = z[key].copy()
                elif key.startswith("av:"):
                    adam.v[key[3:]] = z[key].copy()
            extras["adam"] = adam
        if "__step__" in z.files:
            extras["step"] = int(z["__step__"][0])
    return ExpertParams(tensors, cfg), cfg, extras

"""Bidirectional triplet transformer.

Input projection from the 512-dim token space to the block width, a stack
of pre-norm attention/feed-forward blocks (bias-free projections, gated
feed-forward), and a configurable MLP head. Positions enter through rotary
rotation of queries and keys using each token's global index; an additive
position-table variant is available behind ``global_topology``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .tokenizer import TOKEN_DIM, TOPOLOGY_ROWS, TokenizerParams, init_tokenizer_params


@dataclass
class ModelConfig:
    n_blocks: int = 8
    n_heads: int = 8
    token_dim: int = TOKEN_DIM
    hidden_dim: int = 256
    intermediate_dim: int = 512
    rope_base: float = 10000.0
    global_topology: str = "rotary"
    head_out_dim: int | None = None
    vocab_size: int = 4096

    def __post_init__(self):
        if self.hidden_dim % self.n_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.global_topology not in ("rotary", "additive"):
            raise ConfigError(f"unknown global_topology {self.global_topology!r}")
        if (self.hidden_dim // self.n_heads) % 2 != 0:
            raise ConfigError("per-head dimension must be even for rotary rotation")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_blocks": self.n_blocks, "n_heads": self.n_heads,
            "token_dim": self.token_dim, "hidden_dim": self.hidden_dim,
            "intermediate_dim": self.intermediate_dim, "rope_base": self.rope_base,
            "global_topology": self.global_topology, "head_out_dim": self.head_out_dim,
            "vocab_size": self.vocab_size,
        }


def desk_config(**overrides) -> ModelConfig:
    """Small configuration sized for laptop-class runs."""
    base = dict(n_blocks=2, n_heads=4, hidden_dim=64, intermediate_dim=128)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class Block:
    attn_gain: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ffn_gain: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor

    def named(self, prefix: str) -> dict:
        return {f"{prefix}.{k}": getattr(self, k) for k in
                ("attn_gain", "wq", "wk", "wv", "wo", "ffn_gain", "w_gate", "w_up", "w_down")}


@dataclass
class ModelState:
    config: ModelConfig
    tokenizer: TokenizerParams
    input_w: Tensor
    input_b: Tensor
    blocks: list
    final_gain: Tensor
    pos_table: Tensor | None = None
    head: list = field(default_factory=list)  # [(w, b), ...], silu between layers

    def named(self) -> dict:
        out = dict(self.tokenizer.named())
        out["input.w"] = self.input_w
        out["input.b"] = self.input_b
        for i, b in enumerate(self.blocks):
            out.update(b.named(f"block{i}"))
        out["final_gain"] = self.final_gain
        if self.pos_table is not None:
            out["pos_table"] = self.pos_table
        for i, (w, bias) in enumerate(self.head):
            out[f"head.{i}.w"] = w
            out[f"head.{i}.b"] = bias
        return out


def make_head(in_dim: int, out_dim: int, seed: int, hidden: int | None = None) -> list:
    """Two affine layers with a silu between; hidden width defaults to in_dim."""
    rng = np.random.default_rng(seed)
    hidden = in_dim if hidden is None else hidden
    return [
        (Tensor(rng.normal(0, 0.02, size=(in_dim, hidden)), requires_grad=True),
         Tensor(np.zeros(hidden), requires_grad=True)),
        (Tensor(rng.normal(0, 0.02, size=(hidden, out_dim)), requires_grad=True),
         Tensor(np.zeros(out_dim), requires_grad=True)),
    ]


def init_model(config: ModelConfig, seed: int = 0) -> ModelState:
    rng = np.random.default_rng(seed)
    h, inter = config.hidden_dim, config.intermediate_dim

    def w(*shape):
        return Tensor(rng.normal(0, 0.02, size=shape), requires_grad=True)

    blocks = [Block(
        attn_gain=Tensor(np.ones(h), requires_grad=True),
        wq=w(h, h), wk=w(h, h), wv=w(h, h), wo=w(h, h),
        ffn_gain=Tensor(np.ones(h), requires_grad=True),
        w_gate=w(h, inter), w_up=w(h, inter), w_down=w(inter, h),
    ) for _ in range(config.n_blocks)]

    state = ModelState(
        config=config,
        tokenizer=init_tokenizer_params(seed=int(rng.integers(2 ** 31)),
                                        vocab_size=config.vocab_size),
        input_w=w(config.token_dim, h),
        input_b=Tensor(np.zeros(h), requires_grad=True),
        blocks=blocks,
        final_gain=Tensor(np.ones(h), requires_grad=True),
        pos_table=w(TOPOLOGY_ROWS, config.token_dim)
        if config.global_topology == "additive" else None,
    )
    if config.head_out_dim is not None:
        state.head = make_head(h, config.head_out_dim, seed=int(rng.integers(2 ** 31)))
    return state


def attach_head(state: ModelState, out_dim: int, seed: int) -> None:
    """Fresh head parameters (used at fine-tune setup; body untouched)."""
    state.head = make_head(state.config.hidden_dim, out_dim, seed=seed)
    state.config.head_out_dim = out_dim


@dataclass
class AttentionTrace:
    """Post-softmax attention weights captured during one forward pass."""

    layers: list  # each (B, n_heads, L, L) numpy

    def mean_over_heads(self) -> list:
        return [a.mean(axis=1) for a in self.layers]


def _stack_token_list(tokens):
    vecs = [ad.reshape(t.vector, (1, 1, TOKEN_DIM)) for t in tokens]
    stacked = ad.concat(vecs, axis=1)
    positions = np.array([t.global_index for t in tokens])
    return stacked, positions


def forward(tokens, positions, state: ModelState, collect_attention: bool = False):
    """Run the block stack over (B, L, token_dim) tokens.

    ``tokens`` may also be a list of TripletToken (a single sample), in
    which case ``positions`` is ignored and read off the tokens. Returns
    (hidden (B, L, hidden_dim), AttentionTrace | None).
    """
    cfg = state.config
    if isinstance(tokens, (list, tuple)):
        if not tokens:
            raise ContractError("forward needs at least one token")
        tokens, positions = _stack_token_list(tokens)
    if tokens.ndim != 3 or tokens.shape[-1] != cfg.token_dim:
        raise ConfigError(f"tokens must be (B, L, {cfg.token_dim}), got {tokens.shape}")
    positions = np.asarray(positions)
    if positions.shape != (tokens.shape[1],):
        raise ConfigError(f"positions shape {positions.shape} != ({tokens.shape[1]},)")

    if state.pos_table is not None:
        tokens = ad.add(tokens, ad.gather_rows(state.pos_table, positions))

    x = ad.add(ad.matmul(tokens, state.input_w), state.input_b)
    trace = [] if collect_attention else None
    rotary = cfg.global_topology == "rotary"
    hd = cfg.head_dim
    inv_sqrt = 1.0 / np.sqrt(hd)

    for blk in state.blocks:
        h = ad.rms_norm(x, blk.attn_gain)
        q = ad.matmul(h, blk.wq)
        k = ad.matmul(h, blk.wk)
        v = ad.matmul(h, blk.wv)
        head_outs = []
        layer_attn = [] if collect_attention else None
        for i in range(cfg.n_heads):
            sl = slice(i * hd, (i + 1) * hd)
            qi, ki, vi = q[:, :, sl], k[:, :, sl], v[:, :, sl]
            if rotary:
                qi = ad.rope_rotate(qi, positions, base=cfg.rope_base)
                ki = ad.rope_rotate(ki, positions, base=cfg.rope_base)
            scores = ad.scale(ad.matmul(qi, ad.transpose_last(ki)), inv_sqrt)
            attn = ad.softmax_rows(scores)
            if collect_attention:
                layer_attn.append(attn.data.copy())
            head_outs.append(ad.matmul(attn, vi))
        merged = ad.matmul(ad.concat(head_outs, axis=2), blk.wo)
        x = ad.add(x, merged)
        if collect_attention:
            trace.append(np.stack(layer_attn, axis=1))

        h2 = ad.rms_norm(x, blk.ffn_gain)
        gated = ad.mul(ad.silu(ad.matmul(h2, blk.w_gate)), ad.matmul(h2, blk.w_up))
        x = ad.add(x, ad.matmul(gated, blk.w_down))

    hidden = ad.rms_norm(x, state.final_gain)
    return hidden, (AttentionTrace(trace) if collect_attention else None)


def apply_head(h: Tensor, head: list) -> Tensor:
    if not head:
        raise ContractError("no MLP head attached")
    for i, (w, b) in enumerate(head):
        if i > 0:
            h = ad.silu(h)
        h = ad.add(ad.matmul(h, w), b)
    return h


def decode_recon(hidden: Tensor, state: ModelState) -> Tensor:
    """Head applied to the reconstruction-token state (slot 0). (B, out)."""
    return apply_head(hidden[:, 0, :], state.head)


def decode_per_token(hidden: Tensor, positions, state: ModelState) -> Tensor:
    """Shared head applied at the given token slots. (B, P, out)."""
    positions = list(positions)
    if not positions:
        raise ContractError("decode_per_token needs at least one position")
    return apply_head(hidden[:, positions, :], state.head)


def count_parameters(state: ModelState, breakdown: bool = False):
    """Exact learnable scalar count, optionally split by component."""
    groups = {"tokenizer.core": 0, "tokenizer.pre_embed": 0, "body": 0, "head": 0}
    core = {"tokenizer.numeric_w", "tokenizer.numeric_b", "tokenizer.topology_table",
            "tokenizer.mask_token", "tokenizer.recon_token"}
    for name, t in state.named().items():
        if name in core:
            groups["tokenizer.core"] += t.size
        elif name.startswith("tokenizer."):
            groups["tokenizer.pre_embed"] += t.size
        elif name.startswith("head."):
            groups["head"] += t.size
        else:
            groups["body"] += t.size
    return groups if breakdown else sum(groups.values())

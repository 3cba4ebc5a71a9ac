"""Mapping raw triplets into the shared 512-dim token space.

One parameter set serves all seven modalities: a 768x512 affine numeric
map, a 1000x512 local-topology table, a word table for text ids, a
permutation-invariant point-group encoder, and two special 512-dim tokens
(mask, reconstruction). Numeric parts are zero-padded to 384 slots each,
concatenated to 768, affine-mapped to 512, and summed with the mean of the
topology rows named by the triplet's local indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CapacityError, ContractError
from .triplets import MAX_PART_LEN, ModalityKind, RawTriplet, TripletSet

TOKEN_DIM = 512
NUMERIC_IN = 2 * MAX_PART_LEN
TOPOLOGY_ROWS = 1000
PRE_EMBED_DIM = 256


@dataclass
class TripletToken:
    vector: Tensor  # length 512
    global_index: int


@dataclass
class TokenizerParams:
    """Learnable state shared by every modality path."""

    numeric_w: Tensor      # 768 x 512
    numeric_b: Tensor      # 512
    topology_table: Tensor  # 1000 x 512
    word_table: Tensor      # V x 256
    point_w1: Tensor        # 3 x point_hidden
    point_b1: Tensor
    point_w2: Tensor        # point_hidden x 256
    point_b2: Tensor
    mask_token: Tensor      # 512
    recon_token: Tensor     # 512

    @property
    def vocab_size(self) -> int:
        return self.word_table.shape[0]

    def named(self) -> dict:
        return {
            "tokenizer.numeric_w": self.numeric_w,
            "tokenizer.numeric_b": self.numeric_b,
            "tokenizer.topology_table": self.topology_table,
            "tokenizer.word_table": self.word_table,
            "tokenizer.point_w1": self.point_w1,
            "tokenizer.point_b1": self.point_b1,
            "tokenizer.point_w2": self.point_w2,
            "tokenizer.point_b2": self.point_b2,
            "tokenizer.mask_token": self.mask_token,
            "tokenizer.recon_token": self.recon_token,
        }


def init_tokenizer_params(seed: int = 0, vocab_size: int = 4096,
                          point_hidden: int = 64) -> TokenizerParams:
    rng = np.random.default_rng(seed)

    def w(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    return TokenizerParams(
        numeric_w=w(NUMERIC_IN, TOKEN_DIM),
        numeric_b=Tensor(np.zeros(TOKEN_DIM), requires_grad=True),
        topology_table=w(TOPOLOGY_ROWS, TOKEN_DIM),
        word_table=w(vocab_size, PRE_EMBED_DIM),
        point_w1=w(3, point_hidden),
        point_b1=Tensor(np.zeros(point_hidden), requires_grad=True),
        point_w2=w(point_hidden, PRE_EMBED_DIM),
        point_b2=Tensor(np.zeros(PRE_EMBED_DIM), requires_grad=True),
        mask_token=w(TOKEN_DIM),
        recon_token=w(TOKEN_DIM),
    )


def embed_text_id(token_id: int, params: TokenizerParams) -> Tensor:
    """Word-table row for one id."""
    token_id = int(token_id)
    if not 0 <= token_id < params.vocab_size:
        raise ContractError(f"token id {token_id} outside vocabulary of {params.vocab_size}")
    return ad.reshape(ad.gather_rows(params.word_table, np.array([token_id])), (PRE_EMBED_DIM,))


def embed_point_group(group, params: TokenizerParams) -> Tensor:
    """Shared per-point map + max-pool; invariant to point order."""
    arr = np.asarray(group, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[-1] != 3 or arr.shape[0] < 1:
        raise ContractError(f"a point group must be (k, 3) with k >= 1, got {arr.shape}")
    h = ad.silu(ad.add(ad.matmul(Tensor(arr), params.point_w1), params.point_b1))
    h = ad.add(ad.matmul(h, params.point_w2), params.point_b2)
    return ad.max_reduce(h, axis=0)


def _pad_to(v: Tensor, width: int) -> Tensor:
    n = v.shape[-1]
    if n > width:
        raise CapacityError(f"numeric part of length {n} exceeds the {width}-slot budget")
    if n == width:
        return v
    pad = np.zeros(v.shape[:-1] + (width - n,))
    return ad.concat([v, Tensor(pad)], axis=v.ndim - 1)


def _check_local_indices(ids: np.ndarray):
    if ids.max() >= TOPOLOGY_ROWS:
        raise CapacityError(
            f"local index {int(ids.max())} exceeds the {TOPOLOGY_ROWS}-row topology table")


def _pre_embed_parts(t: RawTriplet, modality: ModalityKind, params: TokenizerParams):
    if modality is ModalityKind.TEXT:
        return (embed_text_id(t.num1[0], params), embed_text_id(t.num2[0], params))
    if modality is ModalityKind.POINTCLOUD:
        if t.num1.size % 3 != 0:
            raise ContractError("point-cloud num part length must be a multiple of 3")
        k = t.num1.size // 3
        return (embed_point_group(t.num1.reshape(k, 3), params),
                embed_point_group(t.num2.reshape(k, 3), params))
    return Tensor(t.num1), Tensor(t.num2)


def tokenize(t: RawTriplet, modality: ModalityKind, params: TokenizerParams) -> TripletToken:
    """pad -> concat -> affine, plus the mean topology row."""
    _check_local_indices(t.local_indices)
    p1, p2 = _pre_embed_parts(t, modality, params)
    num = ad.reshape(ad.concat([_pad_to(p1, MAX_PART_LEN), _pad_to(p2, MAX_PART_LEN)], axis=0),
                     (1, NUMERIC_IN))
    t_num = ad.add(ad.matmul(num, params.numeric_w), params.numeric_b)
    topo = ad.mean(ad.gather_rows(params.topology_table, t.local_indices), axis=0)
    vec = ad.reshape(ad.add(t_num, topo), (TOKEN_DIM,))
    return TripletToken(vector=vec, global_index=t.global_index)


def tokenize_set(s: TripletSet, params: TokenizerParams) -> list:
    """All triplet tokens, with the reconstruction token prepended at slot 0."""
    out = [TripletToken(vector=params.recon_token, global_index=0)]
    for t in s.triplets:
        out.append(tokenize(t, s.modality, params))
    return out


# ---------------------------------------------------------------------------
# batched path (training); must agree with per-token tokenize exactly
# ---------------------------------------------------------------------------

def _batch_numeric_parts(sets, params: TokenizerParams):
    """Stack pre-embedded num parts of same-scheme sets into (B*T, 768)."""
    modality = sets[0].modality
    bt = sum(len(s) for s in sets)
    if modality is ModalityKind.TEXT:
        ids = np.array([[int(t.num1[0]), int(t.num2[0])] for s in sets for t in s])
        if ids.max() >= params.vocab_size:
            raise ContractError("token id outside vocabulary")
        emb = ad.gather_rows(params.word_table, ids)  # (B*T, 2, 256)
        zeros = Tensor(np.zeros((bt, MAX_PART_LEN - PRE_EMBED_DIM)))
        return ad.concat([emb[:, 0, :], zeros, emb[:, 1, :], zeros], axis=1)
    if modality is ModalityKind.POINTCLOUD:
        k = sets[0].sample_meta["k"]
        pts = np.stack([part.reshape(k, 3) for s in sets for t in s
                        for part in (t.num1, t.num2)])
        # shape (B*T*2, k, 3) -> per-point map -> pool over k
        h = ad.silu(ad.add(ad.matmul(Tensor(pts), params.point_w1), params.point_b1))
        h = ad.add(ad.matmul(h, params.point_w2), params.point_b2)
        pooled = ad.max_reduce(h, axis=1)                     # (B*T*2, 256)
        pooled = ad.reshape(pooled, (bt, 2, PRE_EMBED_DIM))
        zeros = Tensor(np.zeros((bt, MAX_PART_LEN - PRE_EMBED_DIM)))
        return ad.concat([pooled[:, 0, :], zeros, pooled[:, 1, :], zeros], axis=1)
    n = sets[0].triplets[0].num1.size
    raw = np.zeros((bt, NUMERIC_IN))
    row = 0
    for s in sets:
        for t in s.triplets:
            raw[row, :n] = t.num1
            raw[row, MAX_PART_LEN:MAX_PART_LEN + n] = t.num2
            row += 1
    if n > MAX_PART_LEN:
        raise CapacityError(f"numeric part of length {n} exceeds the {MAX_PART_LEN}-slot budget")
    return Tensor(raw)


def tokenize_batch(sets, params: TokenizerParams):
    """Tokenize a batch of same-shape TripletSets in one graph.

    Returns (tokens, positions): tokens has shape (B, T+1, 512) with the
    reconstruction token at slot 0 of every row; positions is the (T+1,)
    integer vector of global indices used for rotary rotation, shared by
    all rows (same-shape sets have identical index layouts).
    """
    if not sets:
        raise ContractError("tokenize_batch needs at least one TripletSet")
    modality = sets[0].modality
    count = len(sets[0])
    for s in sets:
        if s.modality is not modality or len(s) != count:
            raise ContractError("batched sets must share modality and triplet count")
    b = len(sets)
    idx = np.stack([t.local_indices for s in sets for t in s])  # (B*T, L)
    _check_local_indices(idx)
    num = _batch_numeric_parts(sets, params)                    # (B*T, 768)
    t_num = ad.add(ad.matmul(num, params.numeric_w), params.numeric_b)
    topo = ad.mean(ad.gather_rows(params.topology_table, idx), axis=1)
    tokens = ad.reshape(ad.add(t_num, topo), (b, count, TOKEN_DIM))
    recon = ad.mul(Tensor(np.ones((b, 1, 1))), ad.reshape(params.recon_token, (1, 1, TOKEN_DIM)))
    tokens = ad.concat([recon, tokens], axis=1)
    positions = np.concatenate([[0], [t.global_index for t in sets[0]]])
    return tokens, positions


def apply_token_mask(tokens: Tensor, mask: np.ndarray, params: TokenizerParams) -> Tensor:
    """Replace masked slots with the shared mask token.

    ``mask`` is a boolean (B, T+1) array over token slots; slot 0 (the
    reconstruction token) must never be masked.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tokens.shape[:2]:
        raise ContractError(f"mask shape {mask.shape} does not match tokens {tokens.shape[:2]}")
    if mask[:, 0].any():
        raise ContractError("the reconstruction token cannot be masked")
    keep = Tensor((~mask)[:, :, None].astype(np.float64))
    fill = Tensor(mask[:, :, None].astype(np.float64))
    mask_tok = ad.reshape(params.mask_token, (1, 1, TOKEN_DIM))
    return ad.add(ad.mul(tokens, keep), ad.mul(mask_tok, fill))

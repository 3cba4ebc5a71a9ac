"""Masked-reconstruction pre-training.

Covers the data pipeline (imputation, normalization, corruption), the
reconstruction objectives per modality, the AdamW optimizer and
cosine-with-restarts schedule, and the two multi-modal step strategies:
parallel (one update from the mean of modality losses) and CT (one update
per modality, sequentially).
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DegenerateDataWarning, ImputationError
from .tokenizer import apply_token_mask, tokenize_batch
from .transformer import ModelState, apply_head, forward, make_head
from .triplets import (ModalityKind, TripletSet, encode_graph, encode_image, encode_table,
                       encode_text, encode_timeseries)

MISSING = np.nan


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass
class CorruptionSpec:
    modality: ModalityKind
    mask_fraction: float
    noise_variance: float = 0.0
    mode: str = "numeric"          # numeric | text-mask-id | image-token-mask
    mask_id: int | None = None     # text mode: id substituted for masked slots

    def __post_init__(self):
        if not 0.0 <= self.mask_fraction <= 1.0:
            raise ConfigError(f"mask_fraction {self.mask_fraction} outside [0, 1]")
        if self.noise_variance < 0:
            raise ConfigError("noise_variance must be >= 0")
        if self.mode not in ("numeric", "text-mask-id", "image-token-mask"):
            raise ConfigError(f"unknown corruption mode {self.mode!r}")


_DEFAULT_SPECS = {
    ModalityKind.TABLE: ("numeric", 0.10, 0.10),
    ModalityKind.TIMESERIES: ("numeric", 0.10, 0.10),
    ModalityKind.GRAPH: ("numeric", 0.10, 0.10),
    ModalityKind.TEXT: ("text-mask-id", 0.15, 0.0),
    ModalityKind.IMAGE: ("image-token-mask", 0.75, 0.0),
}


def default_corruption(modality: ModalityKind) -> CorruptionSpec:
    """Stated defaults for the five pre-training modalities."""
    if modality not in _DEFAULT_SPECS:
        raise ConfigError(f"no default corruption for {modality.value}; pass an explicit spec")
    mode, frac, var = _DEFAULT_SPECS[modality]
    return CorruptionSpec(modality, mask_fraction=frac, noise_variance=var, mode=mode)


@dataclass
class OptimizerConfig:
    lr_base: float = 2e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr_base <= 0:
            raise ConfigError("lr_base must be positive")


@dataclass
class ScheduleConfig:
    total_steps: int
    warmup_ratio: float = 0.03
    restarts: int = 1

    def __post_init__(self):
        if not 0 < self.warmup_ratio < 1:
            raise ConfigError("warmup_ratio must lie in (0, 1)")
        if self.total_steps < 1 or self.restarts < 1:
            raise ConfigError("total_steps and restarts must be >= 1")

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_ratio * self.total_steps)))


# ---------------------------------------------------------------------------
# data pipeline
# ---------------------------------------------------------------------------

def impute_missing(column, kind: str):
    """Fill NaN markers: discrete -> mode, continuous -> mean, timeseries -> 0."""
    col = np.asarray(column, dtype=np.float64).copy()
    miss = np.isnan(col)
    if kind == "timeseries":
        col[miss] = 0.0
        return col
    if kind not in ("discrete", "continuous"):
        raise ConfigError(f"unknown column kind {kind!r}")
    if miss.all():
        raise ImputationError(f"cannot impute an all-missing {kind} column")
    present = col[~miss]
    if kind == "discrete":
        vals, counts = np.unique(present, return_counts=True)
        fill = vals[np.argmax(counts)]  # ties: smallest value, np.unique sorts
    else:
        fill = present.mean()
    col[miss] = fill
    return col


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    flagged: np.ndarray  # True where variance was degenerate and std=1 substituted


def _zscore(arr: np.ndarray, axis):
    mean = arr.mean(axis=axis, keepdims=True)
    std = arr.std(axis=axis, keepdims=True)
    flagged = std == 0.0
    if flagged.any():
        warnings.warn("zero-variance slice normalized with std=1", DegenerateDataWarning)
        std = np.where(flagged, 1.0, std)
    return (arr - mean) / std, NormalizationStats(np.squeeze(mean), np.squeeze(std),
                                                  np.squeeze(flagged))


def normalize(sample, modality: ModalityKind, image_mean=0.5, image_std=0.5):
    """Per-modality normalization; returns (normalized, stats or None)."""
    arr = np.asarray(sample, dtype=np.float64)
    if modality is ModalityKind.TABLE:
        if arr.ndim != 2:
            raise ContractError("table normalization expects the (N, d) dataset matrix")
        return _zscore(arr, axis=0)
    if modality is ModalityKind.TIMESERIES:
        return _zscore(arr, axis=-1)
    if modality in (ModalityKind.IMAGE, ModalityKind.AUDIO):
        return (arr - image_mean) / image_std, NormalizationStats(
            np.asarray(image_mean), np.asarray(image_std), np.zeros(1, dtype=bool))
    # graph features and point coordinates pass through unchanged
    return arr, None


def corrupt(sample, spec: CorruptionSpec, rng: np.random.Generator):
    """Apply ``spec``'s corruption mode; returns (corrupted, mask_record).

    numeric: masked entries set to 0, everything else gets Gaussian noise of
    std sqrt(noise_variance). text-mask-id: masked ids replaced by mask_id.
    image-token-mask: ``sample`` is the triplet count; the record marks
    exactly floor(fraction * count) triplets as masked.
    """
    if spec.mode == "image-token-mask":
        count = int(sample)
        n_masked = int(np.floor(spec.mask_fraction * count))
        chosen = rng.choice(count, size=n_masked, replace=False)
        record = np.zeros(count, dtype=bool)
        record[chosen] = True
        return None, record
    if spec.mode == "text-mask-id":
        ids = np.asarray(sample)
        if not np.issubdtype(ids.dtype, np.integer):
            raise ContractError("text corruption expects integer ids")
        if spec.mask_id is None:
            raise ContractError("text corruption needs a mask_id")
        record = rng.random(ids.shape) < spec.mask_fraction
        out = ids.copy()
        out[record] = spec.mask_id
        return out, record
    arr = np.asarray(sample, dtype=np.float64)
    record = rng.random(arr.shape) < spec.mask_fraction
    out = arr.copy()
    if spec.noise_variance > 0:
        out = out + rng.normal(0.0, np.sqrt(spec.noise_variance), size=arr.shape)
    out[record] = 0.0
    return out, record


# ---------------------------------------------------------------------------
# batches and losses
# ---------------------------------------------------------------------------

@dataclass
class ModalityBatch:
    """One modality's per-step training input.

    ``sets`` come from the (corrupted) samples; full-sample targets live in
    ``targets``; token-level masking and per-token targets fill the
    remaining fields for the image and text objectives.
    """

    modality: ModalityKind
    sets: list
    targets: np.ndarray | None = None
    token_mask: np.ndarray | None = None     # (B, T+1) bool, image mode
    slot_lists: list | None = None           # per-sample masked token slots
    per_token_targets: np.ndarray | None = None  # (N, 768) image / (2N,) text ids

    @property
    def size(self) -> int:
        return len(self.sets)


def build_table_batch(xs, spec: CorruptionSpec, rng) -> ModalityBatch:
    xs = np.asarray(xs, dtype=np.float64)
    sets, targets = [], []
    for x in xs:
        cx, _ = corrupt(x, spec, rng)
        sets.append(encode_table(cx, rng_seed=int(rng.integers(2 ** 31))))
        targets.append(x)
    return ModalityBatch(ModalityKind.TABLE, sets, targets=np.stack(targets))


def build_timeseries_batch(ws, spec: CorruptionSpec, rng) -> ModalityBatch:
    ws = np.asarray(ws, dtype=np.float64)
    sets = []
    for w in ws:
        cw, _ = corrupt(w, spec, rng)
        sets.append(encode_timeseries(cw))
    return ModalityBatch(ModalityKind.TIMESERIES, sets, targets=ws.copy())


def build_graph_batch(anchors, neighbors, spec: CorruptionSpec, rng) -> ModalityBatch:
    anchors = np.asarray(anchors, dtype=np.float64)
    neighbors = np.asarray(neighbors, dtype=np.float64)
    sets = []
    for a, nb in zip(anchors, neighbors):
        stacked = np.vstack([a[None, :], nb])
        c, _ = corrupt(stacked, spec, rng)
        sets.append(encode_graph(c[0], c[1:]))
    return ModalityBatch(ModalityKind.GRAPH, sets, targets=anchors.copy())


def build_image_batch(images, spec: CorruptionSpec, rng) -> ModalityBatch:
    sets, slot_lists, masks, targets = [], [], [], []
    for img in images:
        s = encode_image(img)
        _, record = corrupt(len(s), spec, rng)
        slots = np.flatnonzero(record) + 1  # token slot 0 is the recon token
        mask = np.zeros(len(s) + 1, dtype=bool)
        mask[slots] = True
        for j in np.flatnonzero(record):
            t = s.triplets[j]
            targets.append(np.concatenate([t.num1, t.num2]))
        sets.append(s)
        slot_lists.append(slots)
        masks.append(mask)
    return ModalityBatch(ModalityKind.IMAGE, sets, token_mask=np.stack(masks),
                         slot_lists=slot_lists, per_token_targets=np.stack(targets))


def build_text_batch(ids_batch, spec: CorruptionSpec, rng, vocab_size: int) -> ModalityBatch:
    # the top vocabulary id is reserved as the mask id unless ``spec`` names one
    if spec.mask_id is None:
        spec = CorruptionSpec(spec.modality, spec.mask_fraction, spec.noise_variance,
                              spec.mode, mask_id=vocab_size - 1)
    sets, slot_lists, ce_ids = [], [], []
    for ids in np.asarray(ids_batch):
        cids, record = corrupt(ids, spec, rng)
        sets.append(encode_text(cids, vocab_size=vocab_size))
        masked_triplets = np.flatnonzero(record[0::2] | record[1::2])
        slot_lists.append(masked_triplets + 1)
        for j in masked_triplets:
            ce_ids.extend([int(ids[2 * j]), int(ids[2 * j + 1])])
    return ModalityBatch(ModalityKind.TEXT, sets, slot_lists=slot_lists,
                         per_token_targets=np.asarray(ce_ids, dtype=np.int64))


def _gather_slots(hidden: Tensor, slot_lists) -> Tensor:
    """Select per-sample token slots from (B, L, H) into (N, H) rows."""
    b, length, h = hidden.shape
    flat = ad.reshape(hidden, (b * length, h))
    idx = np.concatenate([np.asarray(slots) + bi * length
                          for bi, slots in enumerate(slot_lists)])
    if idx.size == 0:
        raise ContractError("no masked positions to decode")
    return ad.gather_rows(flat, idx)


def modality_loss(state: ModelState, head: list, batch: ModalityBatch) -> Tensor:
    """One modality's reconstruction loss on one batch."""
    tokens, positions = tokenize_batch(batch.sets, state.tokenizer)
    if batch.token_mask is not None:
        tokens = apply_token_mask(tokens, batch.token_mask, state.tokenizer)
    hidden, _ = forward(tokens, positions, state)
    m = batch.modality
    if m in (ModalityKind.TABLE, ModalityKind.TIMESERIES, ModalityKind.GRAPH):
        pred = apply_head(hidden[:, 0, :], head)
        return ad.mse_loss(pred, batch.targets)
    if m is ModalityKind.IMAGE:
        pred = apply_head(_gather_slots(hidden, batch.slot_lists), head)
        return ad.mse_loss(pred, batch.per_token_targets)
    if m is ModalityKind.TEXT:
        logits = apply_head(_gather_slots(hidden, batch.slot_lists), head)
        n, two_v = logits.shape
        return ad.cross_entropy(ad.reshape(logits, (2 * n, two_v // 2)),
                                batch.per_token_targets)
    raise ConfigError(f"no reconstruction objective for {m.value}")


def make_recon_head(state: ModelState, modality: ModalityKind, seed: int,
                    raw_len: int | None = None) -> list:
    """Per-modality reconstruction head bound to its output length."""
    h = state.config.hidden_dim
    if modality in (ModalityKind.TABLE, ModalityKind.GRAPH):
        if raw_len is None:
            raise ConfigError(f"{modality.value} head needs the feature width")
        return make_head(h, raw_len, seed)
    if modality is ModalityKind.TIMESERIES:
        return make_head(h, 256, seed)
    if modality is ModalityKind.IMAGE:
        return make_head(h, 768, seed)
    if modality is ModalityKind.TEXT:
        return make_head(h, 2 * state.tokenizer.vocab_size, seed)
    raise ConfigError(f"no reconstruction head for {modality.value}")


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

class AdamW:
    """Decoupled-weight-decay adaptive-moment updates over named tensors."""

    def __init__(self, params: dict, config: OptimizerConfig | None = None):
        self.params = dict(params)
        self.config = config or OptimizerConfig()
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def zero_grad(self):
        ad.zero_grads(self.params)

    def step(self, lr: float):
        """One update over every parameter that received a gradient."""
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            p.data -= lr * (mhat / (np.sqrt(vhat) + c.eps) + c.weight_decay * p.data)

    def moments_state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def lr_at(step: int, schedule: ScheduleConfig, base_lr: float) -> float:
    """Linear warmup to base, then per-cycle cosine decay to 0."""
    if step < 0:
        raise ConfigError("step must be non-negative")
    warm = schedule.warmup_steps
    if step <= warm:
        return base_lr * step / warm
    span = schedule.total_steps - warm
    if span <= 0:
        return 0.0
    cycle_len = span / schedule.restarts
    t = min(step, schedule.total_steps) - warm
    k = min(int(t / cycle_len), schedule.restarts - 1)
    phase = (t - k * cycle_len) / cycle_len
    phase = min(phase, 1.0)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * phase))


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    step: int = 0
    loss_history: dict = field(default_factory=dict)

    def record(self, losses: dict):
        for m, value in losses.items():
            self.loss_history.setdefault(m, []).append(float(value))


@dataclass
class StepResult:
    losses: dict
    lr: float


def _worker_cap() -> int:
    raw = os.environ.get("PANGAEA_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _modality_losses(state, heads, batches) -> dict:
    """Losses per modality, built in fixed modality order.

    Graph construction may run on a thread pool (PANGAEA_THREADS); each
    modality builds an independent subgraph, and the dict is assembled in
    sorted order either way, so the reduction is deterministic.
    """
    order = sorted(batches, key=lambda m: m.value)
    workers = min(_worker_cap(), len(order))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futs = {m: pool.submit(modality_loss, state, heads[m], batches[m])
                    for m in order}
            return {m: futs[m].result() for m in order}
    return {m: modality_loss(state, heads[m], batches[m]) for m in order}


def pretrain_step_parallel(batches: dict, state: ModelState, heads: dict, opt: AdamW,
                           schedule: ScheduleConfig, tstate: TrainState) -> StepResult:
    """One update from the arithmetic mean of per-modality losses."""
    if not batches:
        raise ContractError("pretrain step needs at least one modality batch")
    losses = _modality_losses(state, heads, batches)
    total = None
    for m in sorted(losses, key=lambda m: m.value):
        total = losses[m] if total is None else ad.add(total, losses[m])
    total = ad.scale(total, 1.0 / len(losses))
    opt.zero_grad()
    ad.backward(total)
    lr = lr_at(tstate.step, schedule, opt.config.lr_base)
    opt.step(lr)
    tstate.step += 1
    out = {m: loss.item() for m, loss in losses.items()}
    tstate.record(out)
    return StepResult(losses=out, lr=lr)


def pretrain_step_ct(batches: dict, state: ModelState, heads: dict, opt: AdamW,
                     schedule: ScheduleConfig, tstate: TrainState) -> StepResult:
    """Comparison variant: sequential per-modality backward + update."""
    if not batches:
        raise ContractError("pretrain step needs at least one modality batch")
    lr = lr_at(tstate.step, schedule, opt.config.lr_base)
    out = {}
    for m in sorted(batches, key=lambda m: m.value):
        loss = modality_loss(state, heads[m], batches[m])
        opt.zero_grad()
        ad.backward(loss)
        opt.step(lr)
        out[m] = loss.item()
    tstate.step += 1
    tstate.record(out)
    return StepResult(losses=out, lr=lr)


def pretrain_loop(state: ModelState, heads: dict, batch_fn, schedule: ScheduleConfig,
                  opt: AdamW, steps: int, strategy: str = "parallel",
                  log_fn=None, tstate: TrainState | None = None) -> TrainState:
    """Run ``steps`` training steps; ``batch_fn(step) -> {modality: batch}``."""
    tstate = tstate or TrainState()
    step_fn = pretrain_step_parallel if strategy == "parallel" else pretrain_step_ct
    if strategy not in ("parallel", "ct"):
        raise ConfigError(f"unknown strategy {strategy!r}")
    for _ in range(steps):
        result = step_fn(batch_fn(tstate.step), state, heads, opt, schedule, tstate)
        if log_fn is not None:
            rec = {"step": tstate.step, "lr": result.lr}
            rec.update({f"loss.{m.value}": v for m, v in result.losses.items()})
            log_fn(rec)
    return tstate

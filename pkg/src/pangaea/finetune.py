"""Task fine-tuning: fresh head, full-model updates, per-epoch metric trace.

The body (tokenizer + blocks) starts from pre-trained weights or from
scratch for the no-pre-training baseline; the head is always newly
initialized. Classification trains with cross-entropy (or the two-class
reduction of a single-logit objective), regression with mean-square error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics as mx
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .pretrain import AdamW, OptimizerConfig
from .tokenizer import tokenize_batch
from .transformer import ModelState, apply_head, attach_head, forward
from .triplets import (ModalityKind, encode_graph, encode_pointcloud, encode_table,
                       encode_text, encode_timeseries)


@dataclass
class FinetuneConfig:
    head_out_dim: int
    lr: float = 2e-4
    epochs: int = 10
    loss_kind: str = "ce"          # ce | bce | mse
    batch_size: int = 32
    weight_decay: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.loss_kind not in ("ce", "bce", "mse"):
            raise ConfigError(f"unknown loss kind {self.loss_kind!r}")
        if self.loss_kind == "bce" and self.head_out_dim != 1:
            raise ConfigError("a single-logit objective needs head_out_dim 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class TaskData:
    """Supervised samples; ``X`` holds per-modality raw structures."""

    modality: ModalityKind
    X_train: list
    y_train: np.ndarray
    X_val: list
    y_val: np.ndarray
    task_kind: str = "classification"

    def __post_init__(self):
        self.y_train = np.asarray(self.y_train)
        self.y_val = np.asarray(self.y_val)
        if len(self.X_train) != self.y_train.size or len(self.X_val) != self.y_val.size:
            raise ContractError("sample and label counts differ")


def encode_sample(modality: ModalityKind, sample, rng: np.random.Generator,
                  vocab_size: int = 4096):
    if modality is ModalityKind.TABLE:
        return encode_table(sample, rng_seed=int(rng.integers(2 ** 31)))
    if modality is ModalityKind.TIMESERIES:
        return encode_timeseries(sample)
    if modality is ModalityKind.TEXT:
        return encode_text(sample, vocab_size=vocab_size)
    if modality is ModalityKind.GRAPH:
        anchor, neighbors = sample
        return encode_graph(anchor, neighbors)
    if modality is ModalityKind.POINTCLOUD:
        return encode_pointcloud(sample)
    from .triplets import encode_audio, encode_image
    return encode_image(sample) if modality is ModalityKind.IMAGE else encode_audio(sample)


def _batch_logits(state: ModelState, task: TaskData, samples, rng) -> Tensor:
    sets = [encode_sample(task.modality, s, rng, state.tokenizer.vocab_size)
            for s in samples]
    tokens, positions = tokenize_batch(sets, state.tokenizer)
    hidden, _ = forward(tokens, positions, state)
    return apply_head(hidden[:, 0, :], state.head)


def _batch_loss(logits: Tensor, labels: np.ndarray, loss_kind: str) -> Tensor:
    n = logits.shape[0]
    if loss_kind == "ce":
        return ad.cross_entropy(logits, labels.astype(np.int64))
    if loss_kind == "bce":
        # single logit z scored as the two-class problem [0, z]
        two = ad.concat([Tensor(np.zeros((n, 1))), logits], axis=1)
        return ad.cross_entropy(two, labels.astype(np.int64))
    return ad.mse_loss(ad.reshape(logits, (n,)), labels.astype(np.float64))


def predict(state: ModelState, task: TaskData, samples, config: FinetuneConfig,
            seed: int = 0):
    """Labels for classification, values for regression, plus ranking scores."""
    rng = np.random.default_rng(seed)
    logits = _batch_logits(state, task, samples, rng).data
    if config.loss_kind == "mse":
        return logits.reshape(-1), logits.reshape(-1)
    if config.loss_kind == "bce":
        scores = 1.0 / (1.0 + np.exp(-logits.reshape(-1)))
        return (scores > 0.5).astype(np.int64), scores
    labels = np.argmax(logits, axis=1)
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    scores = probs[:, 1] if logits.shape[1] == 2 else probs.max(axis=1)
    return labels, scores


def evaluate(state: ModelState, task: TaskData, config: FinetuneConfig,
             seed: int = 0) -> dict:
    labels, scores = predict(state, task, task.X_val, config, seed=seed)
    if task.task_kind == "regression":
        batch = mx.EvalBatch(task.y_val, labels, "regression")
        return {"mse": mx.metric_mse(batch), "mae": mx.metric_mae(batch),
                "rmse": mx.metric_rmse(batch)}
    batch = mx.EvalBatch(task.y_val, labels, "classification")
    out = {"acc": mx.metric_acc(batch)}
    classes = np.unique(task.y_val)
    if classes.size == 2 and set(classes) <= {0, 1}:
        out["f1"] = mx.metric_f1(batch, average="binary")
        try:
            out["auc"] = mx.metric_auc(mx.EvalBatch(task.y_val, scores, "ranking-score"))
        except Exception:
            pass
    else:
        out["f1_weighted"] = mx.metric_f1(batch, average="weighted")
    return out


@dataclass
class FinetuneResult:
    state: ModelState
    trace: list = field(default_factory=list)  # rows: {"epoch", "name", "value"}

    def series(self, name: str) -> list:
        return [r["value"] for r in self.trace if r["name"] == name]


def finetune(state: ModelState, task: TaskData, config: FinetuneConfig) -> FinetuneResult:
    """Train on the task; the head is re-initialized, the body carries over.

    Emits a metric trace with one row per metric per epoch, starting with
    the untrained (epoch 0) evaluation, so a zero-epoch call still reports
    the initialized model's numbers.
    """
    attach_head(state, config.head_out_dim, seed=config.seed + 1)
    opt = AdamW(state.named(), OptimizerConfig(lr_base=config.lr,
                                               weight_decay=config.weight_decay))
    rng = np.random.default_rng(config.seed)
    result = FinetuneResult(state=state)

    def log_eval(epoch: int, extra: dict | None = None):
        rows = evaluate(state, task, config, seed=config.seed)
        if extra:
            rows = {**rows, **extra}
        for name, value in rows.items():
            result.trace.append({"epoch": epoch, "name": name, "value": float(value)})

    log_eval(0)
    n = len(task.X_train)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            take = order[start:start + config.batch_size]
            logits = _batch_logits(state, task, [task.X_train[i] for i in take], rng)
            loss = _batch_loss(logits, task.y_train[take], config.loss_kind)
            opt.zero_grad()
            ad.backward(loss)
            opt.step(config.lr)
            epoch_losses.append(loss.item())
        log_eval(epoch, {"train_loss": float(np.mean(epoch_losses))})
    return result


def run_comparison(pretrained: ModelState, fresh: ModelState, task: TaskData,
                   config: FinetuneConfig) -> dict:
    """Identical budgets for the pre-trained model and the from-scratch baseline."""
    return {
        "pretrained": finetune(pretrained, task, config),
        "scratch": finetune(fresh, task, config),
    }

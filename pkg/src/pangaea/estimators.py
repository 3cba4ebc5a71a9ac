"""Estimator-style facades over the functional training stack.

These wrap the lower-level modules in the fit/transform/predict idiom so
the package drops into pipelines and model-selection tooling unchanged.
The functional API underneath stays the source of truth; nothing here
adds behavior beyond validation, state handling, and label bookkeeping.
"""

from __future__ import annotations

import copy

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_X_y

from .errors import ConfigError, ContractError
from .finetune import FinetuneConfig, TaskData, finetune, predict as task_predict
from .pretrain import (
    AdamW,
    OptimizerConfig,
    ScheduleConfig,
    build_graph_batch,
    build_image_batch,
    build_table_batch,
    build_text_batch,
    build_timeseries_batch,
    default_corruption,
    make_recon_head,
    pretrain_loop,
)
from .scaling import fit_scaling, predicted_y
from .transformer import ModelConfig, ModelState, init_model
from .triplets import (
    ModalityKind,
    encode_audio,
    encode_image,
    encode_pointcloud,
    encode_table,
    encode_text,
    encode_timeseries,
)


def _require_fitted(estimator, attr: str):
    if not hasattr(estimator, attr):
        raise NotFittedError(f"{type(estimator).__name__} is not fitted yet; "
                             "call fit first")


class ScalingLawModel(RegressorMixin, BaseEstimator):
    """Saturating growth curve y = 1 - (1-p)^x + c over modality counts."""

    def fit(self, X, y):
        X, y = check_X_y(X, y, ensure_min_features=1)
        if X.shape[1] != 1:
            raise ContractError("expected a single feature: the modality count")
        self.fit_ = fit_scaling(list(zip(X[:, 0], y)))
        self.p_ = self.fit_.p
        self.c_ = self.fit_.c
        self.residual_sse_ = self.fit_.residual_sse
        self.boundary_ = self.fit_.boundary
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        _require_fitted(self, "fit_")
        X = check_array(X)
        return np.asarray(predicted_y(self.p_, self.c_, X[:, 0]), dtype=np.float64)


class TripletSetEncoder(TransformerMixin, BaseEstimator):
    """Stateless sample-to-triplet-set transformer for one modality."""

    def __init__(self, modality="table", seed=0, vocab_size=4096):
        self.modality = modality
        self.seed = seed
        self.vocab_size = vocab_size

    def fit(self, X, y=None):
        self.modality_ = ModalityKind(self.modality)
        return self

    def transform(self, X):
        _require_fitted(self, "modality_")
        kind = self.modality_
        rng = np.random.default_rng(self.seed)
        out = []
        for sample in X:
            if kind is ModalityKind.TABLE:
                out.append(encode_table(np.asarray(sample, dtype=np.float64),
                                        rng_seed=int(rng.integers(2 ** 31))))
            elif kind is ModalityKind.TIMESERIES:
                out.append(encode_timeseries(np.asarray(sample, dtype=np.float64)))
            elif kind is ModalityKind.TEXT:
                out.append(encode_text(np.asarray(sample), vocab_size=self.vocab_size))
            elif kind is ModalityKind.IMAGE:
                out.append(encode_image(np.asarray(sample, dtype=np.float64)))
            elif kind is ModalityKind.AUDIO:
                out.append(encode_audio(np.asarray(sample, dtype=np.float64)))
            elif kind is ModalityKind.POINTCLOUD:
                out.append(encode_pointcloud(np.asarray(sample, dtype=np.float64)))
            else:
                anchor, neighbors = sample
                from .triplets import encode_graph
                out.append(encode_graph(np.asarray(anchor, dtype=np.float64),
                                        np.asarray(neighbors, dtype=np.float64)))
        return out


def _model_config(hidden_dim, n_blocks, n_heads, intermediate_dim, vocab_size,
                  topology) -> ModelConfig:
    return ModelConfig(n_blocks=n_blocks, n_heads=n_heads,
                       hidden_dim=hidden_dim, intermediate_dim=intermediate_dim,
                       vocab_size=vocab_size, global_topology=topology)


class ReconstructionPretrainer(BaseEstimator):
    """Masked-reconstruction pre-training over a dict of modality datasets.

    ``fit(X)`` takes {modality name: samples}: tables (n, d), windows
    (n, 256), token ids (n, 512), images (n, 224, 224, 3), and for graphs
    {"features": (nodes, d), "neighbors": (nodes, 32, d)}.
    """

    def __init__(self, steps=40, batch_size=8, hidden_dim=64, n_blocks=2,
                 n_heads=4, intermediate_dim=128, vocab_size=4096,
                 strategy="parallel", topology="rotary", lr=2e-4,
                 weight_decay=0.05, warmup_ratio=0.03, restarts=1, seed=0):
        self.steps = steps
        self.batch_size = batch_size
        self.hidden_dim = hidden_dim
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.intermediate_dim = intermediate_dim
        self.vocab_size = vocab_size
        self.strategy = strategy
        self.topology = topology
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_ratio = warmup_ratio
        self.restarts = restarts
        self.seed = seed

    def _make_batch(self, kind: ModalityKind, data, spec, rng):
        take = self.batch_size
        if kind is ModalityKind.GRAPH:
            feats, neigh = data["features"], data["neighbors"]
            idx = rng.choice(len(feats), size=min(take, len(feats)), replace=False)
            return build_graph_batch(feats[idx], neigh[idx], spec, rng)
        idx = rng.choice(len(data), size=min(take, len(data)), replace=False)
        if kind is ModalityKind.TABLE:
            return build_table_batch(data[idx], spec, rng)
        if kind is ModalityKind.TIMESERIES:
            return build_timeseries_batch(data[idx], spec, rng)
        if kind is ModalityKind.TEXT:
            return build_text_batch(data[idx], spec, rng, vocab_size=self.vocab_size)
        if kind is ModalityKind.IMAGE:
            return build_image_batch(data[idx], spec, rng)
        raise ConfigError(f"{kind.value} is not a pre-training modality")

    def fit(self, X, y=None):
        if not isinstance(X, dict) or not X:
            raise ContractError("expected a non-empty {modality: samples} dict")
        datasets = {ModalityKind(k): v for k, v in X.items()}
        specs = {k: default_corruption(k) for k in datasets}

        config = _model_config(self.hidden_dim, self.n_blocks, self.n_heads,
                               self.intermediate_dim, self.vocab_size, self.topology)
        state = init_model(config, seed=self.seed)
        heads = {}
        for i, k in enumerate(sorted(datasets, key=lambda m: m.value)):
            raw_len = None
            if k is ModalityKind.TABLE:
                raw_len = np.asarray(datasets[k]).shape[-1]
            elif k is ModalityKind.GRAPH:
                raw_len = np.asarray(datasets[k]["features"]).shape[-1]
            heads[k] = make_recon_head(state, k, seed=self.seed + 1 + i, raw_len=raw_len)

        rng = np.random.default_rng(self.seed + 99)

        def batch_fn(step):
            return {k: self._make_batch(k, datasets[k], specs[k], rng)
                    for k in sorted(datasets, key=lambda m: m.value)}

        schedule = ScheduleConfig(total_steps=self.steps,
                                  warmup_ratio=self.warmup_ratio,
                                  restarts=self.restarts)
        opt = AdamW(self._trainable(state, heads),
                    OptimizerConfig(lr_base=self.lr, weight_decay=self.weight_decay))
        history = pretrain_loop(state, heads, batch_fn, schedule, opt,
                                steps=self.steps, strategy=self.strategy)
        self.state_ = state
        self.heads_ = heads
        self.loss_history_ = history.loss_history
        self.final_losses_ = {k.value: v[-1] for k, v in history.loss_history.items()}
        return self

    @staticmethod
    def _trainable(state: ModelState, heads: dict) -> dict:
        params = dict(state.named())
        for kind, head in sorted(heads.items(), key=lambda kv: kv[0].value):
            for i, (w, b) in enumerate(head):
                params[f"recon.{kind.value}.{i}.w"] = w
                params[f"recon.{kind.value}.{i}.b"] = b
        return params


class _TaskEstimator(BaseEstimator):
    """Shared fine-tuning plumbing for the supervised facades."""

    def __init__(self, modality="table", pretrained=None, epochs=5, lr=1e-3,
                 batch_size=16, weight_decay=0.05, hidden_dim=64, n_blocks=2,
                 n_heads=4, intermediate_dim=128, vocab_size=4096, seed=0):
        self.modality = modality
        self.pretrained = pretrained
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.hidden_dim = hidden_dim
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.intermediate_dim = intermediate_dim
        self.vocab_size = vocab_size
        self.seed = seed

    def _start_state(self) -> ModelState:
        source = self.pretrained
        if isinstance(source, ReconstructionPretrainer):
            _require_fitted(source, "state_")
            source = source.state_
        if isinstance(source, ModelState):
            return copy.deepcopy(source)
        if source is not None:
            raise ContractError("pretrained must be a ReconstructionPretrainer, "
                                "a ModelState, or None")
        config = _model_config(self.hidden_dim, self.n_blocks, self.n_heads,
                               self.intermediate_dim, self.vocab_size, "rotary")
        return init_model(config, seed=self.seed)

    def _prepare(self, X, y):
        kind = ModalityKind(self.modality)
        if kind is ModalityKind.TABLE:
            X, y = check_X_y(X, y)
            samples = [row for row in X]
            self.n_features_in_ = X.shape[1]
        else:
            samples = list(X)
            y = np.asarray(y)
            if len(samples) != y.size:
                raise ContractError("sample and label counts differ")
        return kind, samples, y

    def _fit_task(self, task: TaskData, out_dim: int, loss_kind: str):
        state = self._start_state()
        config = FinetuneConfig(head_out_dim=out_dim, lr=self.lr,
                                epochs=self.epochs, loss_kind=loss_kind,
                                batch_size=self.batch_size,
                                weight_decay=self.weight_decay, seed=self.seed)
        result = finetune(state, task, config)
        self.state_ = result.state
        self.config_ = config
        self.task_ = task
        self.trace_ = result.trace
        return self


class TripletTaskClassifier(ClassifierMixin, _TaskEstimator):
    """Fine-tuned classifier over any single modality."""

    def fit(self, X, y):
        kind, samples, y = self._prepare(X, y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        task = TaskData(modality=kind, X_train=samples, y_train=encoded,
                        X_val=samples, y_val=encoded, task_kind="classification")
        return self._fit_task(task, out_dim=len(self.classes_), loss_kind="ce")

    def _scores(self, X):
        _require_fitted(self, "state_")
        kind = ModalityKind(self.modality)
        samples = [row for row in check_array(X)] if kind is ModalityKind.TABLE else list(X)
        labels, scores = task_predict(self.state_, self.task_, samples,
                                      self.config_, seed=self.seed)
        return np.asarray(labels, dtype=np.int64), np.asarray(scores)

    def predict(self, X):
        labels, _ = self._scores(X)
        return self.classes_[labels]

    def predict_proba(self, X):
        _require_fitted(self, "state_")
        from .finetune import _batch_logits
        kind = ModalityKind(self.modality)
        samples = [row for row in check_array(X)] if kind is ModalityKind.TABLE else list(X)
        logits = _batch_logits(self.state_, self.task_, samples,
                               np.random.default_rng(self.seed)).data
        shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
        return shifted / shifted.sum(axis=1, keepdims=True)


class TripletTaskRegressor(RegressorMixin, _TaskEstimator):
    """Fine-tuned single-output regressor over any single modality."""

    def fit(self, X, y):
        kind, samples, y = self._prepare(X, y)
        y = y.astype(np.float64)
        task = TaskData(modality=kind, X_train=samples, y_train=y,
                        X_val=samples, y_val=y, task_kind="regression")
        return self._fit_task(task, out_dim=1, loss_kind="mse")

    def predict(self, X):
        _require_fitted(self, "state_")
        kind = ModalityKind(self.modality)
        samples = [row for row in check_array(X)] if kind is ModalityKind.TABLE else list(X)
        values, _ = task_predict(self.state_, self.task_, samples,
                                 self.config_, seed=self.seed)
        return np.asarray(values, dtype=np.float64)

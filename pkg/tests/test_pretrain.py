import numpy as np
import pytest

from pangaea import autodiff as ad
from pangaea import pretrain as pt
from pangaea import transformer as tf
from pangaea.autodiff import Tensor
from pangaea.errors import (ConfigError, ContractError, DegenerateDataWarning,
                            ImputationError)
from pangaea.triplets import ModalityKind


def tiny_state(seed=0, **kw):
    cfg = dict(n_blocks=1, n_heads=2, hidden_dim=8, intermediate_dim=16, vocab_size=32)
    cfg.update(kw)
    return tf.init_model(tf.ModelConfig(**cfg), seed=seed)


# --- imputation ---

def test_impute_discrete_mode():
    got = pt.impute_missing([1.0, np.nan, 1.0, 2.0], "discrete")
    np.testing.assert_array_equal(got, [1, 1, 1, 2])


def test_impute_continuous_mean():
    got = pt.impute_missing([2.0, np.nan, 4.0], "continuous")
    np.testing.assert_array_equal(got, [2, 3, 4])


def test_impute_timeseries_zeros():
    got = pt.impute_missing([np.nan, 5.0], "timeseries")
    np.testing.assert_array_equal(got, [0, 5])


def test_impute_errors():
    with pytest.raises(ImputationError):
        pt.impute_missing([np.nan, np.nan], "discrete")
    with pytest.raises(ImputationError):
        pt.impute_missing([np.nan], "continuous")
    with pytest.raises(ConfigError):
        pt.impute_missing([1.0], "ordinal")


# --- normalization ---

def test_normalize_table_columns():
    rng = np.random.default_rng(0)
    data = rng.normal(3.0, 2.5, size=(200, 4))
    normed, stats = pt.normalize(data, ModalityKind.TABLE)
    np.testing.assert_allclose(normed.mean(axis=0), np.zeros(4), atol=1e-10)
    np.testing.assert_allclose(normed.std(axis=0), np.ones(4), atol=1e-10)
    assert not stats.flagged.any()


def test_normalize_constant_window_flags():
    with pytest.warns(DegenerateDataWarning):
        normed, stats = pt.normalize(np.full(256, 3.0), ModalityKind.TIMESERIES)
    np.testing.assert_array_equal(normed, np.zeros(256))
    assert stats.flagged


def test_normalize_graph_passthrough():
    x = np.random.default_rng(1).normal(size=(33, 5))
    normed, stats = pt.normalize(x, ModalityKind.GRAPH)
    np.testing.assert_array_equal(normed, x)
    assert stats is None


def test_normalize_image_constants():
    img = np.full((224, 224, 3), 0.75)
    normed, _ = pt.normalize(img, ModalityKind.IMAGE)
    np.testing.assert_allclose(normed, np.full_like(img, 0.5))


# --- corruption ---

def test_corrupt_identity_when_disabled():
    spec = pt.CorruptionSpec(ModalityKind.TABLE, mask_fraction=0.0, noise_variance=0.0)
    x = np.random.default_rng(2).normal(size=50)
    out, record = pt.corrupt(x, spec, np.random.default_rng(0))
    np.testing.assert_array_equal(out, x)
    assert not record.any()


def test_corrupt_numeric_honesty():
    spec = pt.default_corruption(ModalityKind.TABLE)
    x = np.random.default_rng(3).normal(size=2000) + 10.0
    out, record = pt.corrupt(x, spec, np.random.default_rng(1))
    assert (out[record] == 0.0).all()
    assert (out[~record] != x[~record]).all()  # noise moved every kept value
    resid = out[~record] - x[~record]
    assert abs(resid.var() - 0.1) < 0.02


def test_corrupt_numeric_mask_rate():
    spec = pt.default_corruption(ModalityKind.TIMESERIES)
    _, record = pt.corrupt(np.zeros(100_000), spec, np.random.default_rng(7))
    assert abs(record.mean() - 0.10) < 0.005


def test_corrupt_image_exact_counts():
    spec = pt.default_corruption(ModalityKind.IMAGE)
    _, record = pt.corrupt(196, spec, np.random.default_rng(5))
    assert record.sum() == 147 and (~record).sum() == 49


def test_corrupt_text_mask_id():
    spec = pt.CorruptionSpec(ModalityKind.TEXT, 0.15, mode="text-mask-id", mask_id=31)
    ids = np.random.default_rng(6).integers(0, 30, size=100_000)
    out, record = pt.corrupt(ids, spec, np.random.default_rng(2))
    assert (out[record] == 31).all()
    np.testing.assert_array_equal(out[~record], ids[~record])
    assert abs(record.mean() - 0.15) < 0.005
    with pytest.raises(ContractError):
        pt.corrupt(ids, pt.CorruptionSpec(ModalityKind.TEXT, 0.15, mode="text-mask-id"),
                   np.random.default_rng(0))


def test_corruption_spec_validation():
    with pytest.raises(ConfigError):
        pt.CorruptionSpec(ModalityKind.TABLE, mask_fraction=1.5)
    with pytest.raises(ConfigError):
        pt.CorruptionSpec(ModalityKind.TABLE, 0.1, noise_variance=-1)
    with pytest.raises(ConfigError):
        pt.default_corruption(ModalityKind.AUDIO)


# --- schedule ---

def test_lr_schedule_endpoints():
    sched = pt.ScheduleConfig(total_steps=1000, warmup_ratio=0.03)
    assert pt.lr_at(0, sched, 2e-4) == 0.0
    assert pt.lr_at(sched.warmup_steps, sched, 2e-4) == pytest.approx(2e-4)
    assert pt.lr_at(1000, sched, 2e-4) == pytest.approx(0.0, abs=1e-12)


def test_lr_schedule_midpoint_and_bounds():
    sched = pt.ScheduleConfig(total_steps=1030, warmup_ratio=0.03, restarts=1)
    warm = sched.warmup_steps
    mid = warm + (1030 - warm) // 2
    assert pt.lr_at(mid, sched, 2e-4) == pytest.approx(1e-4, rel=1e-2)
    lrs = [pt.lr_at(s, sched, 2e-4) for s in range(1031)]
    assert min(lrs) >= 0.0 and max(lrs) == pytest.approx(2e-4)


def test_lr_schedule_restarts():
    sched = pt.ScheduleConfig(total_steps=210, warmup_ratio=0.05, restarts=2)
    warm = sched.warmup_steps  # 10 (rounded)
    cycle = (210 - warm) / 2
    boundary = int(warm + cycle)
    assert pt.lr_at(boundary, sched, 1e-3) == pytest.approx(1e-3)
    assert pt.lr_at(boundary - 1, sched, 1e-3) < 1e-4


def test_schedule_validation():
    with pytest.raises(ConfigError):
        pt.ScheduleConfig(total_steps=0)
    with pytest.raises(ConfigError):
        pt.ScheduleConfig(total_steps=10, warmup_ratio=0.0)


# --- optimizer ---

def test_adamw_descends_quadratic():
    x = Tensor(np.array([5.0, -3.0]), requires_grad=True)
    opt = pt.AdamW({"x": x}, pt.OptimizerConfig(lr_base=0.1, weight_decay=0.0))
    for _ in range(300):
        opt.zero_grad()
        ad.backward(ad.sum_(ad.mul(x, x)))
        opt.step(0.1)
    assert np.abs(x.data).max() < 1e-2


def test_adamw_decoupled_decay_shrinks_parameters():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = Tensor(np.array([1.0]), requires_grad=True)
    opt = pt.AdamW({"x": x, "y": y}, pt.OptimizerConfig(weight_decay=0.5))
    opt.zero_grad()
    ad.backward(ad.sum_(ad.scale(x, 0.0)))  # zero grad for x, none for y
    opt.step(0.1)
    assert x.data[0] < 1.0        # decay applied alongside a (zero) gradient
    assert y.data[0] == 1.0       # untouched: no gradient this step


def test_adamw_skips_gradless_params():
    x = Tensor(np.array([2.0]), requires_grad=True)
    w = Tensor(np.array([4.0]), requires_grad=True)
    opt = pt.AdamW({"x": x, "w": w})
    opt.zero_grad()
    ad.backward(ad.sum_(ad.mul(x, x)))
    opt.step(1e-3)
    assert x.data[0] != 2.0 and w.data[0] == 4.0


# --- batches and losses ---

def make_batches(state, rng, modalities=(ModalityKind.TABLE, ModalityKind.TIMESERIES),
                 b=4, d=6):
    out = {}
    for m in modalities:
        spec = pt.default_corruption(m)
        if m is ModalityKind.TABLE:
            out[m] = pt.build_table_batch(rng.normal(size=(b, d)), spec, rng)
        elif m is ModalityKind.TIMESERIES:
            out[m] = pt.build_timeseries_batch(rng.normal(size=(b, 256)), spec, rng)
        elif m is ModalityKind.GRAPH:
            out[m] = pt.build_graph_batch(rng.normal(size=(b, d)),
                                          rng.normal(size=(b, 32, d)), spec, rng)
        elif m is ModalityKind.TEXT:
            ids = rng.integers(0, state.tokenizer.vocab_size - 1, size=(b, 512))
            out[m] = pt.build_text_batch(ids, spec, rng, state.tokenizer.vocab_size)
    return out


def make_heads(state, d=6, seed=9):
    return {
        ModalityKind.TABLE: pt.make_recon_head(state, ModalityKind.TABLE, seed, raw_len=d),
        ModalityKind.TIMESERIES: pt.make_recon_head(state, ModalityKind.TIMESERIES, seed + 1),
        ModalityKind.GRAPH: pt.make_recon_head(state, ModalityKind.GRAPH, seed + 2, raw_len=d),
        ModalityKind.TEXT: pt.make_recon_head(state, ModalityKind.TEXT, seed + 3),
        ModalityKind.IMAGE: pt.make_recon_head(state, ModalityKind.IMAGE, seed + 4),
    }


def test_image_batch_shapes():
    rng = np.random.default_rng(0)
    imgs = rng.random(size=(2, 224, 224, 3))
    batch = pt.build_image_batch(imgs, pt.default_corruption(ModalityKind.IMAGE), rng)
    assert batch.token_mask.shape == (2, 197)
    assert (batch.token_mask.sum(axis=1) == 147).all()
    assert not batch.token_mask[:, 0].any()
    assert batch.per_token_targets.shape == (2 * 147, 768)
    assert len(batch.slot_lists[0]) == 147


def test_text_batch_records_original_ids():
    rng = np.random.default_rng(1)
    ids = rng.integers(0, 31, size=(2, 512))
    batch = pt.build_text_batch(ids, pt.default_corruption(ModalityKind.TEXT), rng, 32)
    n_masked = sum(len(s) for s in batch.slot_lists)
    assert batch.per_token_targets.shape == (2 * n_masked,)
    s0 = batch.slot_lists[0]
    want = np.stack([ids[0, 2 * (s0 - 1)], ids[0, 2 * (s0 - 1) + 1]], axis=1).reshape(-1)
    np.testing.assert_array_equal(batch.per_token_targets[:2 * len(s0)], want)


def test_graph_batch_targets_are_anchors():
    rng = np.random.default_rng(2)
    anchors = rng.normal(size=(3, 5))
    batch = pt.build_graph_batch(anchors, rng.normal(size=(3, 32, 5)),
                                 pt.default_corruption(ModalityKind.GRAPH), rng)
    np.testing.assert_array_equal(batch.targets, anchors)
    assert all(len(s) == 32 for s in batch.sets)


def test_text_loss_uniform_logits_is_log_vocab():
    state = tiny_state(seed=3)
    head = pt.make_recon_head(state, ModalityKind.TEXT, seed=0)
    for w, b in head:
        w.data[:] = 0.0
        b.data[:] = 0.0
    rng = np.random.default_rng(4)
    ids = rng.integers(0, 31, size=(2, 512))
    batch = pt.build_text_batch(ids, pt.default_corruption(ModalityKind.TEXT), rng, 32)
    loss = pt.modality_loss(state, head, batch)
    assert loss.item() == pytest.approx(np.log(32.0), abs=1e-10)


def test_no_masked_positions_is_an_error():
    state = tiny_state(seed=5)
    head = pt.make_recon_head(state, ModalityKind.TEXT, seed=0)
    rng = np.random.default_rng(5)
    ids = rng.integers(0, 31, size=(1, 512))
    spec = pt.CorruptionSpec(ModalityKind.TEXT, 0.0, mode="text-mask-id", mask_id=31)
    batch = pt.build_text_batch(ids, spec, rng, 32)
    with pytest.raises(ContractError):
        pt.modality_loss(state, head, batch)


def test_mean_gradient_identity():
    """Parallel step's applied gradient == mean of per-modality gradients."""
    state = tiny_state(seed=6)
    heads = make_heads(state)
    rng = np.random.default_rng(7)
    batches = make_batches(state, rng)
    params = dict(state.named())
    for m, head in heads.items():
        for i, (w, b) in enumerate(head):
            params[f"rh.{m.value}.{i}.w"] = w
            params[f"rh.{m.value}.{i}.b"] = b

    per_modality = {}
    for m, batch in batches.items():
        ad.zero_grads(params)
        ad.backward(pt.modality_loss(state, heads[m], batch))
        per_modality[m] = {k: (None if p.grad is None else p.grad.copy())
                           for k, p in params.items()}

    ad.zero_grads(params)
    losses = [pt.modality_loss(state, heads[m], batches[m]) for m in sorted(batches, key=lambda m: m.value)]
    total = ad.scale(ad.add(losses[0], losses[1]), 0.5)
    ad.backward(total)

    for k, p in params.items():
        parts = [per_modality[m][k] for m in batches]
        expected = sum(np.zeros_like(p.data) if g is None else g for g in parts) / len(parts)
        got = p.grad if p.grad is not None else np.zeros_like(p.data)
        np.testing.assert_allclose(got, expected, atol=1e-10)


def test_parallel_step_updates_and_history():
    state = tiny_state(seed=8)
    heads = make_heads(state)
    rng = np.random.default_rng(9)
    batches = make_batches(state, rng)
    params = dict(state.named())
    for m, head in heads.items():
        for i, (w, b) in enumerate(head):
            params[f"rh.{m.value}.{i}.w"] = w
            params[f"rh.{m.value}.{i}.b"] = b
    opt = pt.AdamW(params)
    sched = pt.ScheduleConfig(total_steps=10)
    tstate = pt.TrainState()
    before = state.input_w.data.copy()
    res = pt.pretrain_step_parallel(batches, state, heads, opt, sched, tstate)
    assert set(res.losses) == set(batches)
    assert tstate.step == 1
    assert all(len(v) == 1 for v in tstate.loss_history.values())
    # step 0 has lr 0 under warmup, so run once more to see movement
    res2 = pt.pretrain_step_parallel(make_batches(state, rng), state, heads, opt, sched, tstate)
    assert res2.lr > 0
    assert not np.array_equal(state.input_w.data, before)
    with pytest.raises(ContractError):
        pt.pretrain_step_parallel({}, state, heads, opt, sched, tstate)


def test_ct_step_takes_one_update_per_modality():
    state = tiny_state(seed=10)
    heads = make_heads(state)
    rng = np.random.default_rng(11)
    opt = pt.AdamW(dict(state.named()))
    sched = pt.ScheduleConfig(total_steps=10)
    tstate = pt.TrainState()
    pt.pretrain_step_ct(make_batches(state, rng), state, heads, opt, sched, tstate)
    assert opt.t == 2 and tstate.step == 1


def test_ct_and_parallel_diverge():
    results = {}
    for strategy in ("parallel", "ct"):
        state = tiny_state(seed=12)
        heads = make_heads(state)
        sched = pt.ScheduleConfig(total_steps=10)
        opt = pt.AdamW(dict(state.named()))
        rng = np.random.default_rng(13)
        tstate = pt.TrainState()
        step = pt.pretrain_step_parallel if strategy == "parallel" else pt.pretrain_step_ct
        for _ in range(2):
            step(make_batches(state, rng), state, heads, opt, sched, tstate)
        results[strategy] = state.input_w.data.copy()
    assert not np.allclose(results["parallel"], results["ct"])


def test_pretrain_loop_converges_and_logs():
    state = tiny_state(seed=14)
    d = 6
    heads = {ModalityKind.TABLE: pt.make_recon_head(state, ModalityKind.TABLE, 1, raw_len=d)}
    params = dict(state.named())
    for i, (w, b) in enumerate(heads[ModalityKind.TABLE]):
        params[f"rh.table.{i}.w"] = w
        params[f"rh.table.{i}.b"] = b
    opt = pt.AdamW(params, pt.OptimizerConfig(lr_base=3e-3))
    sched = pt.ScheduleConfig(total_steps=400)
    data_rng = np.random.default_rng(15)
    # structured rows: a shared profile plus small noise, so masking is recoverable
    data = np.linspace(-1, 1, d) + data_rng.normal(scale=0.1, size=(64, d))
    spec = pt.default_corruption(ModalityKind.TABLE)

    def batch_fn(step):
        rng = np.random.default_rng(1000 + step)
        rows = data[rng.choice(64, size=8, replace=False)]
        return {ModalityKind.TABLE: pt.build_table_batch(rows, spec, rng)}

    logs = []
    tstate = pt.pretrain_loop(state, heads, batch_fn, sched, opt, steps=80,
                              log_fn=logs.append)
    hist = tstate.loss_history[ModalityKind.TABLE]
    assert len(hist) == 80 and len(logs) == 80
    assert np.mean(hist[-10:]) < np.mean(hist[:10])
    assert logs[0]["step"] == 1 and "loss.table" in logs[0] and "lr" in logs[0]


def test_threaded_losses_match_serial(monkeypatch):
    state = tiny_state(seed=16)
    heads = make_heads(state)
    rng_a = np.random.default_rng(17)
    batches = make_batches(state, rng_a)
    serial = {m: loss.item() for m, loss in
              pt._modality_losses(state, heads, batches).items()}
    monkeypatch.setenv("PANGAEA_THREADS", "4")
    threaded = {m: loss.item() for m, loss in
                pt._modality_losses(state, heads, batches).items()}
    assert serial == threaded

import itertools

import numpy as np
import pytest

from pangaea.errors import ContractError, DomainError, FitError
from pangaea.scaling import (
    PRETRAIN_MODALITIES,
    AggregateCurve,
    CombinationResult,
    ScalingFit,
    aggregate_by_cardinality,
    attention_affinity,
    fit_scaling,
    geometric_cdf,
    predicted_y,
)
from pangaea.triplets import ModalityKind


def test_geometric_cdf_matches_pmf_sum():
    for p in (0.05, 0.18, 0.5, 0.93):
        for k in range(0, 12):
            pmf_sum = sum(p * (1 - p) ** (i - 1) for i in range(1, k + 1))
            assert abs(geometric_cdf(p, k) - pmf_sum) < 1e-12


def test_geometric_cdf_domain():
    with pytest.raises(DomainError):
        geometric_cdf(-0.01, 3)
    with pytest.raises(DomainError):
        geometric_cdf(1.01, 3)
    with pytest.raises(DomainError):
        geometric_cdf(0.5, -1)
    assert geometric_cdf(0.0, 5) == 0.0
    assert geometric_cdf(1.0, 1) == 1.0


def test_predicted_y_known_values():
    assert predicted_y(0.18, 0.14, 0) == pytest.approx(0.14, abs=1e-15)
    assert predicted_y(0.18, 0.14, 1) == pytest.approx(0.32, abs=1e-12)


def test_predicted_y_saturates():
    xs = np.arange(0, 40)
    ys = predicted_y(0.3, 0.1, xs)
    assert np.all(np.diff(ys) >= 0)
    assert np.all(ys <= 1.0 + 0.1 + 1e-12)
    assert ys[-1] == pytest.approx(1.1, abs=1e-5)


def test_fit_recovers_noiseless_constants():
    xs = np.arange(6)
    ys = predicted_y(0.18, 0.14, xs)
    fit = fit_scaling(list(zip(xs, ys)))
    assert abs(fit.p - 0.18) < 1e-6
    assert abs(fit.c - 0.14) < 1e-6
    assert fit.residual_sse < 1e-12
    assert not fit.boundary


def test_fit_is_deterministic():
    pts = [(0, 0.21), (1, 0.35), (2, 0.44), (3, 0.50), (4, 0.55), (5, 0.57)]
    a = fit_scaling(pts)
    b = fit_scaling(pts)
    assert a.p == b.p and a.c == b.c and a.residual_sse == b.residual_sse


def test_fit_flat_points_hits_boundary():
    pts = [(x, 0.42) for x in range(6)]
    fit = fit_scaling(pts)
    assert fit.boundary
    assert fit.p < 1e-6
    assert fit.c == pytest.approx(0.42, abs=1e-6)


def test_fit_rejects_degenerate_inputs():
    with pytest.raises(FitError):
        fit_scaling([(2, 0.5)])
    with pytest.raises(FitError):
        fit_scaling([(3, 0.4), (3, 0.6), (3, 0.5)])
    with pytest.raises(FitError):
        fit_scaling([(0, 0.1), (1, float("nan"))])


def test_fit_recovery_under_noise():
    xs = np.arange(6)
    clean = predicted_y(0.18, 0.14, xs)
    hits = 0
    trials = 25
    for seed in range(trials):
        rng = np.random.default_rng(1000 + seed)
        ys = clean + rng.normal(scale=0.01, size=xs.size)
        fit = fit_scaling(list(zip(xs, ys)))
        if abs(fit.p - 0.18) <= 0.03 and abs(fit.c - 0.14) <= 0.03:
            hits += 1
    assert hits >= int(0.95 * trials)


def test_fit_predict_roundtrip():
    fit = ScalingFit(p=0.25, c=0.05, residual_sse=0.0, points=[])
    assert fit.predict(2) == pytest.approx(1 - 0.75**2 + 0.05)


def _full_sweep(score_fn, tasks=("cls", "reg")):
    out = []
    for r in range(0, 6):
        for subset in itertools.combinations(PRETRAIN_MODALITIES, r):
            out.append(CombinationResult(
                subset=frozenset(subset),
                scores={t: score_fn(t, frozenset(subset)) for t in tasks},
            ))
    return out


def test_combination_result_validates_subset():
    with pytest.raises(ContractError):
        CombinationResult(subset={ModalityKind.AUDIO}, scores={"t": 1.0})
    with pytest.raises(ContractError):
        CombinationResult(subset={ModalityKind.TABLE}, scores={})
    r = CombinationResult(subset=set(), scores={"t": 0.5})
    assert r.cardinality == 0


def test_aggregate_normalizes_and_averages():
    def score(task, subset):
        base = len(subset) * (2.0 if task == "cls" else 10.0)
        return base + 0.1 * sum(hash(m.value) % 7 for m in subset) / 7.0

    results = _full_sweep(score)
    curve = aggregate_by_cardinality(results)
    xs = [x for x, _ in curve.points]
    ys = [y for _, y in curve.points]
    assert xs == [0, 1, 2, 3, 4, 5]
    assert curve.missing == []
    assert all(0.0 <= y <= 1.0 for y in ys)
    assert ys[0] < ys[-1]
    assert np.all(np.diff(ys) > -1e-9)


def test_aggregate_is_order_invariant():
    def score(task, subset):
        return len(subset) + (0.3 if task == "cls" else -0.2) * len(subset) ** 2

    results = _full_sweep(score)
    forward = aggregate_by_cardinality(results)
    backward = aggregate_by_cardinality(list(reversed(results)))
    assert forward.points == backward.points


def test_aggregate_flags_missing_cardinality():
    results = [r for r in _full_sweep(lambda t, s: len(s) * 1.0) if r.cardinality != 3]
    curve = aggregate_by_cardinality(results)
    assert curve.missing == [3]
    assert [x for x, _ in curve.points] == [0, 1, 2, 4, 5]


def test_aggregate_rejects_mismatched_tasks():
    a = CombinationResult(subset={ModalityKind.TABLE}, scores={"cls": 1.0})
    b = CombinationResult(subset={ModalityKind.TEXT}, scores={"reg": 2.0})
    with pytest.raises(ContractError):
        aggregate_by_cardinality([a, b])
    with pytest.raises(ContractError):
        aggregate_by_cardinality([])


def _segments(counts):
    segs = []
    for m, n in counts:
        segs.extend([m] * n)
    return segs


def test_affinity_uniform_attention():
    segs = _segments([(ModalityKind.TABLE, 4), (ModalityKind.TEXT, 6)])
    length = len(segs)
    attn = [np.full((2, 3, length, length), 1.0 / length)]
    mat, order = attention_affinity(attn, segs)
    assert np.allclose(mat, 1.0 / length)
    assert order == [ModalityKind.TABLE, ModalityKind.TEXT]


def test_affinity_matches_quadruple_loop():
    rng = np.random.default_rng(7)
    segs = _segments([(ModalityKind.TABLE, 3), (ModalityKind.TEXT, 5),
                      (ModalityKind.GRAPH, 2)])
    length = len(segs)
    layers = [rng.random((2, 4, length, length)) for _ in range(3)]
    for lay in layers:
        lay /= lay.sum(axis=-1, keepdims=True)
    mat, order = attention_affinity(layers, segs)

    mean_attn = np.zeros((length, length))
    n = 0
    for lay in layers:
        for b in range(lay.shape[0]):
            for h in range(lay.shape[1]):
                mean_attn += lay[b, h]
                n += 1
    mean_attn /= n / len(layers) * len(layers)
    expect = np.zeros((3, 3))
    for i, mi in enumerate(order):
        for j, mj in enumerate(order):
            qs = [q for q in range(length) if segs[q] == mi]
            ks = [k for k in range(length) if segs[k] == mj]
            total = 0.0
            for q in qs:
                for k in ks:
                    total += mean_attn[q, k]
            expect[i, j] = total / (len(qs) * len(ks))
    assert np.allclose(mat, expect, atol=1e-12)


def test_affinity_concentrated_attention():
    segs = _segments([(ModalityKind.TABLE, 3), (ModalityKind.TEXT, 3)])
    length = len(segs)
    attn = np.zeros((1, 1, length, length))
    attn[..., :3] = 1.0 / 3.0  # every query attends only to table keys
    mat, order = attention_affinity([attn], segs)
    ti = order.index(ModalityKind.TABLE)
    assert mat[:, ti].min() > 0.3
    assert np.allclose(mat[:, 1 - ti], 0.0)


def test_affinity_layer_and_head_selection():
    segs = _segments([(ModalityKind.TABLE, 2), (ModalityKind.TEXT, 2)])
    length = len(segs)
    l0 = np.zeros((1, 2, length, length))
    l0[0, 0] = np.eye(length)
    l0[0, 1] = np.full((length, length), 1.0 / length)
    l1 = np.full((1, 2, length, length), 1.0 / length)
    full, _ = attention_affinity([l0, l1], segs)
    only_diag, _ = attention_affinity([l0, l1], segs, layers=[0], heads=[0])
    assert only_diag[0, 0] == pytest.approx(0.5)
    assert only_diag[0, 1] == pytest.approx(0.0)
    assert not np.allclose(full, only_diag)


def test_affinity_rejects_empty_segment_and_bad_shapes():
    segs = _segments([(ModalityKind.TABLE, 4)])
    attn = [np.full((1, 1, 4, 4), 0.25)]
    with pytest.raises(ContractError):
        attention_affinity(attn, segs, modalities=[ModalityKind.TABLE, ModalityKind.TEXT])
    with pytest.raises(ContractError):
        attention_affinity(attn, segs + [ModalityKind.TABLE])
    with pytest.raises(ContractError):
        attention_affinity([], segs)


def test_affinity_ignores_unlabeled_tokens():
    segs = [None] + _segments([(ModalityKind.TABLE, 2), (ModalityKind.TEXT, 2)])
    length = len(segs)
    attn = [np.full((1, 1, length, length), 1.0 / length)]
    mat, order = attention_affinity(attn, segs)
    assert mat.shape == (2, 2)
    assert np.allclose(mat, 1.0 / length)

import numpy as np
import pytest

from pangaea import autodiff as ad
from pangaea import tokenizer as tk
from pangaea import triplets as tp
from pangaea.autodiff import Tensor
from pangaea.errors import CapacityError, ContractError
from pangaea.tokenizer import init_tokenizer_params
from pangaea.triplets import ModalityKind, RawTriplet


@pytest.fixture(scope="module")
def params():
    return init_tokenizer_params(seed=0, vocab_size=64, point_hidden=16)


def test_embed_text_id_is_table_row(params):
    v = tk.embed_text_id(0, params)
    np.testing.assert_array_equal(v.data, params.word_table.data[0])
    a = tk.embed_text_id(5, params)
    b = tk.embed_text_id(5, params)
    np.testing.assert_array_equal(a.data, b.data)
    with pytest.raises(ContractError):
        tk.embed_text_id(64, params)


def test_word_table_update_is_sparse():
    """A gradient step driven by one id touches only that row."""
    p = init_tokenizer_params(seed=1, vocab_size=16)
    before = p.word_table.data.copy()
    loss = ad.sum_(ad.mul(tk.embed_text_id(7, p), tk.embed_text_id(7, p)))
    ad.backward(loss)
    p.word_table.data -= 0.1 * p.word_table.grad
    changed = np.any(p.word_table.data != before, axis=1)
    assert changed[7] and not changed[np.arange(16) != 7].any()


def test_point_group_permutation_invariant(params):
    rng = np.random.default_rng(3)
    g = rng.normal(size=(9, 3))
    base = tk.embed_point_group(g, params).data
    for seed in range(3):
        perm = np.random.default_rng(seed).permutation(9)
        np.testing.assert_allclose(tk.embed_point_group(g[perm], params).data, base)
    # duplicating an existing point can't change a max-pool
    np.testing.assert_allclose(
        tk.embed_point_group(np.vstack([g, g[4:5]]), params).data, base)


def test_point_group_single_point_and_empty(params):
    p = np.array([[0.3, -0.2, 0.9]])
    v = tk.embed_point_group(p, params).data
    h = np.asarray(p) @ params.point_w1.data + params.point_b1.data
    h = h / (1 + np.exp(-h)) @ params.point_w2.data + params.point_b2.data
    np.testing.assert_allclose(v, h[0], atol=1e-12)
    with pytest.raises(ContractError):
        tk.embed_point_group(np.zeros((0, 3)), params)


def test_tokenize_zero_parts_leaves_topology_only(params):
    t = RawTriplet(np.zeros(4), np.zeros(4), np.array([2, 5]), 0)
    saved = params.numeric_b.data.copy()
    params.numeric_b.data[:] = 0.0
    try:
        tok = tk.tokenize(t, ModalityKind.TABLE, params)
        want = params.topology_table.data[[2, 5]].mean(axis=0)
        np.testing.assert_allclose(tok.vector.data, want, atol=1e-12)
    finally:
        params.numeric_b.data[:] = saved


def test_tokenize_duplicate_local_index_is_plain_row(params):
    t = RawTriplet(np.zeros(2), np.zeros(2), np.array([9, 9]), 1)
    saved = params.numeric_b.data.copy()
    params.numeric_b.data[:] = 0.0
    try:
        tok = tk.tokenize(t, ModalityKind.TABLE, params)
        np.testing.assert_allclose(tok.vector.data, params.topology_table.data[9], atol=1e-12)
    finally:
        params.numeric_b.data[:] = saved


def test_tokenize_matches_straight_line_recomputation(params):
    rng = np.random.default_rng(8)
    t = RawTriplet(rng.normal(size=5), rng.normal(size=5), np.array([1, 4, 7]), 3)
    tok = tk.tokenize(t, ModalityKind.TABLE, params)
    row = np.zeros(768)
    row[:5] = t.num1
    row[384:389] = t.num2
    want = row @ params.numeric_w.data + params.numeric_b.data
    want = want + params.topology_table.data[[1, 4, 7]].mean(axis=0)
    np.testing.assert_allclose(tok.vector.data, want, atol=1e-12)
    assert tok.global_index == 3


def test_tokenize_padding_neutrality(params):
    rng = np.random.default_rng(2)
    vals = rng.normal(size=3)
    a = RawTriplet(vals, vals * 2, np.array([0, 1, 2]), 0)
    b = RawTriplet(np.concatenate([vals, [0, 0]]), np.concatenate([vals * 2, [0, 0]]),
                   np.array([0, 1, 2]), 0)
    va = tk.tokenize(a, ModalityKind.TABLE, params).vector.data
    vb = tk.tokenize(b, ModalityKind.TABLE, params).vector.data
    np.testing.assert_allclose(va, vb, atol=1e-15)


def test_tokenize_topology_permutation_invariance(params):
    rng = np.random.default_rng(5)
    t1 = RawTriplet(rng.normal(size=4), rng.normal(size=4), np.array([3, 11, 42]), 0)
    t2 = RawTriplet(t1.num1, t1.num2, np.array([42, 3, 11]), 0)
    np.testing.assert_allclose(
        tk.tokenize(t1, ModalityKind.TABLE, params).vector.data,
        tk.tokenize(t2, ModalityKind.TABLE, params).vector.data, atol=1e-15)


def test_tokenize_capacity_errors(params):
    with pytest.raises(CapacityError):
        tk.tokenize(RawTriplet(np.zeros(2), np.zeros(2), np.array([1000]), 0),
                    ModalityKind.TABLE, params)
    with pytest.raises(CapacityError):
        tk.tokenize(RawTriplet(np.zeros(385), np.zeros(385), np.array([0]), 0),
                    ModalityKind.TABLE, params)


def test_tokenize_set_prepends_recon(params):
    s = tp.encode_timeseries(np.random.default_rng(0).normal(size=256))
    toks = tk.tokenize_set(s, params)
    assert len(toks) == 9
    assert toks[0].global_index == 0
    np.testing.assert_array_equal(toks[0].vector.data, params.recon_token.data)
    s2 = tp.encode_timeseries(np.random.default_rng(1).normal(size=256))
    toks2 = tk.tokenize_set(s2, params)
    assert toks2[0].vector is toks[0].vector  # same shared parameter object


def test_empty_triplet_set_rejected():
    with pytest.raises(ContractError):
        tp.TripletSet(ModalityKind.TABLE, [])


def test_shared_parameters_across_modalities(params):
    """One storage object backs the numeric map for every modality path."""
    table_tok = tk.tokenize(RawTriplet([1.0], [2.0], [0], 0), ModalityKind.TABLE, params)
    text_set = tp.encode_text(np.arange(512) % 64, vocab_size=64)
    text_tok = tk.tokenize(text_set.triplets[0], ModalityKind.TEXT, params)
    leaves_a = {id(n) for n in ad.trace(ad.sum_(table_tok.vector)).nodes if n.is_leaf()}
    leaves_b = {id(n) for n in ad.trace(ad.sum_(text_tok.vector)).nodes if n.is_leaf()}
    assert id(params.numeric_w) in leaves_a and id(params.numeric_w) in leaves_b
    assert id(params.topology_table) in leaves_a and id(params.topology_table) in leaves_b


def batch_matches_loop(sets, params):
    tokens, positions = tk.tokenize_batch(sets, params)
    for bi, s in enumerate(sets):
        loop = tk.tokenize_set(s, params)
        assert positions.tolist() == [0] + [t.global_index for t in s]
        for li, tok in enumerate(loop):
            np.testing.assert_allclose(tokens.data[bi, li], tok.vector.data, atol=1e-12)


def test_batch_equals_loop_table(params):
    rng = np.random.default_rng(0)
    sets = [tp.encode_table(rng.normal(size=6), rng_seed=i) for i in range(3)]
    batch_matches_loop(sets, params)


def test_batch_equals_loop_text(params):
    rng = np.random.default_rng(1)
    sets = [tp.encode_text(rng.integers(0, 64, size=512), vocab_size=64) for _ in range(2)]
    batch_matches_loop(sets, params)


def test_batch_equals_loop_pointcloud(params):
    rng = np.random.default_rng(2)
    sets = [tp.encode_pointcloud(rng.normal(size=(8, 4, 3))) for _ in range(2)]
    batch_matches_loop(sets, params)


def test_batch_equals_loop_timeseries(params):
    rng = np.random.default_rng(3)
    sets = [tp.encode_timeseries(rng.normal(size=256)) for _ in range(2)]
    batch_matches_loop(sets, params)


def test_batch_rejects_mixed_sets(params):
    a = tp.encode_timeseries(np.zeros(256))
    b = tp.encode_table(np.zeros(4), 0)
    with pytest.raises(ContractError):
        tk.tokenize_batch([a, b], params)
    with pytest.raises(ContractError):
        tk.tokenize_batch([], params)


def test_apply_token_mask(params):
    rng = np.random.default_rng(4)
    sets = [tp.encode_timeseries(rng.normal(size=256)) for _ in range(2)]
    tokens, _ = tk.tokenize_batch(sets, params)
    mask = np.zeros((2, 9), dtype=bool)
    mask[0, 3] = True
    mask[1, 8] = True
    out = tk.apply_token_mask(tokens, mask, params)
    np.testing.assert_allclose(out.data[0, 3], params.mask_token.data)
    np.testing.assert_allclose(out.data[1, 8], params.mask_token.data)
    np.testing.assert_allclose(out.data[0, 4], tokens.data[0, 4])
    bad = np.zeros((2, 9), dtype=bool)
    bad[0, 0] = True
    with pytest.raises(ContractError):
        tk.apply_token_mask(tokens, bad, params)


def test_tokenizer_gradients_flow(params):
    """Numeric map, topology table and word table all get gradients."""
    p = init_tokenizer_params(seed=7, vocab_size=32)
    sets = [tp.encode_text(np.random.default_rng(0).integers(0, 32, size=512),
                           vocab_size=32)]
    tokens, _ = tk.tokenize_batch(sets, p)
    ad.backward(ad.mean(ad.mul(tokens, tokens)))
    assert p.numeric_w.grad is not None and np.abs(p.numeric_w.grad).sum() > 0
    assert p.topology_table.grad is not None and np.abs(p.topology_table.grad).sum() > 0
    assert p.word_table.grad is not None and np.abs(p.word_table.grad).sum() > 0
    assert p.recon_token.grad is not None

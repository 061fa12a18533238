import numpy as np
import pytest
from hypothesis import given, strategies as st

from hytrec.model import (
    Batch,
    LayerKind,
    ModelConfig,
    build_layer_schedule,
    count_parameters,
    forward,
    fuse_branches,
    init_model,
    long_branch_forward,
    predict_proba,
    predict_scores,
    short_branch_forward,
)
from hytrec.nn import layer_norm
from hytrec.train import gradcheck_model

S, L = LayerKind.SOFTMAX, LayerKind.LINEAR


def tiny(**kw):
    base = dict(vocab_size=20, d_model=8, n_layers_long=4, hybrid_ratio=3, n_heads=2, short_window=3,
                decay_period=3.0)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(rng, B, n, vocab, pad=None):
    items = rng.integers(0, vocab, (B, n))
    times = np.cumsum(rng.integers(0, 3, (B, n)), axis=1).astype(float)
    mask = np.ones((B, n), dtype=bool)
    if pad is not None:
        for b, p in enumerate(pad):
            mask[b, :p] = False
            items[b, :p] = 0
            times[b, :p] = times[b, -1] + 1
    return Batch(items, times, mask, times[:, -1] + 1, rng.integers(0, vocab, B))


# --- schedule ------------------------------------------------------------------


@pytest.mark.parametrize("n,r,expect", [(8, 7, [L] * 7 + [S]), (4, 3, [L, L, L, S]), (1, 5, [S]), (1, 1, [S])])
def test_schedule_examples(n, r, expect):
    assert list(build_layer_schedule(n, r).kinds) == expect


@given(st.integers(1, 12), st.integers(1, 8))
def test_schedule_counts(m, r):
    n = m * (r + 1)
    sched = build_layer_schedule(n, r)
    pos = sched.softmax_positions
    assert len(pos) == n // (r + 1)
    assert pos[-1] == n - 1
    assert all(b - a == r + 1 for a, b in zip(pos, pos[1:]))


@pytest.mark.parametrize("n,r", [(0, 3), (4, 0)])
def test_schedule_errors(n, r):
    with pytest.raises(ValueError):
        build_layer_schedule(n, r)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(short_window=0)
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"bogus": 1})
    c = tiny()
    assert ModelConfig.from_dict(c.to_dict()) == c


# --- parameter counts -------------------------------------------------------------


@pytest.mark.parametrize("d", [4, 8, 16])
def test_parameter_count_delta(d):
    # one extra linear layer in place of a softmax layer: TADN mixer (6d^2+9d+2) vs softmax (4d^2+6d)
    a = count_parameters(ModelConfig(d_model=d, n_heads=2, n_layers_long=4, hybrid_ratio=3))
    b = count_parameters(ModelConfig(d_model=d, n_heads=2, n_layers_long=4, hybrid_ratio=1))
    assert a - b == 2 * d * d + 3 * d + 2


def test_count_matches_initialised_model():
    c = tiny()
    assert init_model(c, 0).n_params() == count_parameters(c)


# --- long branch --------------------------------------------------------------------


def test_empty_history_is_zero_vector():
    m = init_model(tiny(), 0)
    out = long_branch_forward(m, np.zeros(0, dtype=int), np.zeros(0), 5.0)
    assert np.array_equal(out.data, np.zeros(8))


def test_bad_item_id():
    m = init_model(tiny(), 0)
    with pytest.raises(IndexError):
        long_branch_forward(m, np.array([3, 20]), np.array([0.0, 1.0]), 2.0)


def test_long_branch_append_then_mask(rng):
    m = init_model(tiny(), 1)
    items = rng.integers(0, 20, 7)
    times = np.arange(7.0)
    ref = long_branch_forward(m, items[None, :5], times[None, :5], np.array([9.0])).data
    # the same prefix with two extra events hidden under the mask at the left (padding) side
    padded_items = np.concatenate([[4, 9], items[:5]])[None]
    padded_times = np.concatenate([[0.0, 0.0], times[:5]])[None]
    mask = np.array([[False, False, True, True, True, True, True]])
    out = long_branch_forward(m, padded_items, padded_times, np.array([9.0]), mask).data
    np.testing.assert_allclose(out, ref, atol=1e-13)


def test_long_branch_single_event_is_finite():
    m = init_model(tiny(), 0)
    out = long_branch_forward(m, np.array([3]), np.array([1.0]), 2.0).data
    assert out.shape == (8,) and np.all(np.isfinite(out))


# --- short branch -------------------------------------------------------------------


def test_short_branch_single_item_depends_only_on_it():
    m = init_model(tiny(), 0)
    a = short_branch_forward(m, np.array([5])).data
    b = short_branch_forward(m, np.array([5])).data
    c = short_branch_forward(m, np.array([6])).data
    assert np.array_equal(a, b) and not np.allclose(a, c)


def test_short_branch_reaches_first_position():
    m = init_model(tiny(), 0)
    a = short_branch_forward(m, np.array([1, 2, 3])).data
    b = short_branch_forward(m, np.array([7, 2, 3])).data
    assert not np.allclose(a, b)


def test_short_branch_zero_weights_reduce_to_embedding():
    m = init_model(tiny(), 0)
    for name, t in m.params.items():
        if name.startswith("short.0."):
            t.data[...] = 0.0
    out = short_branch_forward(m, np.array([1, 2, 3])).data
    x = m.item_embedding.data[3] + m.position_embedding_short.data[2]
    np.testing.assert_allclose(out, layer_norm(x, *m.norm("short.final_norm")).data, atol=1e-14)


def test_short_branch_too_long():
    m = init_model(tiny(), 0)
    with pytest.raises(ValueError):
        short_branch_forward(m, np.array([1, 2, 3, 4]))


# --- fusion and prediction -----------------------------------------------------------


def test_fusion_endpoints(rng):
    m = init_model(tiny(), 0)
    a, b = rng.normal(size=8), rng.normal(size=8)
    assert np.array_equal(fuse_branches(m, a, b, gate=np.zeros(8)).data, a)
    assert np.array_equal(fuse_branches(m, a, b, gate=np.ones(8)).data, b)
    np.testing.assert_allclose(fuse_branches(m, a, a).data, a, atol=1e-15)


def test_fusion_strongly_negative_gate_selects_long(rng):
    m = init_model(tiny(), 0)
    m.params["branch_gate.bias"].data[...] = -800.0
    m.params["branch_gate.weight"].data[...] = 0.0
    a, b = rng.normal(size=8), rng.normal(size=8)
    np.testing.assert_allclose(fuse_branches(m, a, b).data, a, atol=1e-300)


def test_fusion_shape_mismatch():
    m = init_model(tiny(), 0)
    with pytest.raises(ValueError):
        fuse_branches(m, np.ones(8), np.ones(7))


def test_predict_zero_is_uniform():
    m = init_model(tiny(), 0)
    np.testing.assert_allclose(predict_proba(m, np.zeros(8)), np.full(20, 1 / 20), atol=1e-15)


def test_predict_argmax_geometry():
    m = init_model(tiny(vocab_size=8), 0)
    m.item_embedding.data[...] = np.eye(8)
    assert int(np.argmax(predict_scores(m, np.eye(8)[5]).data)) == 5


@given(st.integers(0, 2**31 - 1))
def test_probabilities_sum_to_one(seed):
    m = init_model(tiny(), seed % 7)
    p = predict_proba(m, np.random.default_rng(seed).normal(size=(3, 8)) * 5)
    assert np.abs(p.sum(-1) - 1).max() <= 1e-12


# --- end to end -------------------------------------------------------------------------


@pytest.mark.parametrize("variant", [dict(), dict(use_short_branch=False), dict(linear_kind="baseline")])
def test_end_to_end_causality(rng, variant):
    m = init_model(tiny(**variant), 2)
    items = rng.integers(0, 20, 10)
    times = np.arange(10.0)
    for t in range(1, 10):
        b1 = Batch(items[None, :t], times[None, :t], np.ones((1, t), bool), np.array([t + 0.0]), np.array([0]))
        other = items.copy()
        other[t:] = rng.integers(0, 20, 10 - t)
        b2 = Batch(other[None, :t], times[None, :t], np.ones((1, t), bool), np.array([t + 0.0]), np.array([0]))
        assert np.array_equal(forward(m, b1).data, forward(m, b2).data)


def test_batch_rows_independent(rng):
    m = init_model(tiny(), 3)
    batch = random_batch(rng, 4, 9, 20, pad=[0, 3, 5, 7])
    full = forward(m, batch).data
    for b in range(4):
        sub = Batch(batch.items[b:b + 1], batch.times[b:b + 1], batch.mask[b:b + 1], batch.query_time[b:b + 1],
                    batch.target[b:b + 1])
        np.testing.assert_allclose(forward(m, sub).data, full[b:b + 1], atol=1e-12)


def test_full_model_gradcheck(rng):
    m = init_model(tiny(), 0)
    batch = random_batch(rng, 2, 12, 20, pad=[0, 4])
    results = gradcheck_model(m, batch, tol=1e-4, step=1e-5)
    failed = [(r.group, r.rel_error) for r in results if not r.passed]
    assert not failed
    assert {r.group for r in results} >= {"item_embedding", "branch_gate", "long.0.tadn.gate_proj", "long.3.attn.q_proj"}

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hytrec import nn, tensor as T
from hytrec.tensor import GradientTape, Tensor, backward


def triple_loop(a, b):
    n, m = a.shape
    p = b.shape[1]
    out = np.zeros((n, p))
    for i in range(n):
        for j in range(p):
            s = 0.0
            for k in range(m):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def softmax_loop(q, k, v, causal=True):
    L, d = q.shape
    out = np.zeros_like(v)
    w = np.zeros((L, L))
    for t in range(L):
        hi = t + 1 if causal else L
        s = np.array([q[t] @ k[j] / np.sqrt(d) for j in range(hi)])
        e = np.exp(s - s.max())
        w[t, :hi] = e / e.sum()
        out[t] = w[t, :hi] @ v[:hi]
    return out, w


def linear_quadratic(q, k, v):
    phi = lambda x: np.where(x > 0, x + 1.0, np.exp(x))
    fq, fk = phi(q), phi(k)
    a = np.tril(fq @ fk.T)
    return (a @ v) / np.maximum(a.sum(1, keepdims=True), 1e-6)


# --- matmul -----------------------------------------------------------------


def test_matmul_identity():
    a = np.arange(4.0).reshape(2, 2)
    assert np.array_equal(T.matmul(np.eye(2), a).data, a)


def test_matmul_hand_example():
    out = T.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0], [1.0]]))
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_triple_loop(rng):
    a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    np.testing.assert_allclose(T.matmul(a, b).data, triple_loop(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_deterministic(rng):
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    assert np.array_equal(T.matmul(a, b).data, T.matmul(a, b).data)


def test_nonfinite_is_an_error():
    with pytest.raises(T.NonFiniteError):
        T.exp(np.array([1000.0]))


def test_missing_vjp_raises_on_record():
    x = Tensor(np.ones(3), requires_grad=True)
    with GradientTape():
        with pytest.raises(T.MissingDerivativeError):
            T.apply_op("not_a_primitive", np.ones(3), (x,))


# --- softmax attention --------------------------------------------------------


def test_softmax_single_position_returns_v(rng):
    q, k, v = (rng.normal(size=(1, 4)) for _ in range(3))
    assert np.array_equal(nn.softmax_attention(q, k, v).values.data, v)


def test_softmax_identical_keys_gives_running_mean(rng):
    L, d = 6, 3
    q, v = rng.normal(size=(L, d)), rng.normal(size=(L, d))
    k = np.tile(rng.normal(size=d), (L, 1))
    out = nn.softmax_attention(q, k, v).values.data
    expect = np.cumsum(v, 0) / np.arange(1, L + 1)[:, None]
    np.testing.assert_allclose(out, expect, atol=1e-12)


@pytest.mark.parametrize("causal", [True, False])
def test_softmax_matches_loop_oracle(rng, causal):
    q, k, v = (rng.normal(size=(16, 4)) for _ in range(3))
    res = nn.softmax_attention(q, k, v, causal=causal, return_weights=True)
    out, w = softmax_loop(q, k, v, causal)
    np.testing.assert_allclose(res.values.data, out, atol=1e-12)
    np.testing.assert_allclose(res.weights.data, w, atol=1e-12)
    assert np.abs(res.weights.data.sum(-1) - 1).max() <= 1e-12


@given(st.integers(1, 64), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_softmax_rows_stochastic(L, d, seed):
    r = np.random.default_rng(seed)
    q, k, v = (r.normal(size=(L, d)) * 3 for _ in range(3))
    w = nn.softmax_attention(q, k, v, return_weights=True).weights.data
    assert np.abs(w.sum(-1) - 1).max() <= 1e-12
    assert np.all(np.triu(w, 1) == 0)


def test_softmax_shape_mismatch():
    with pytest.raises(ValueError):
        nn.softmax_attention(np.ones((3, 2)), np.ones((4, 2)), np.ones((3, 2)))


# --- linear attention -----------------------------------------------------------


def test_linear_single_position_returns_v(rng):
    q, k, v = (rng.normal(size=(1, 4)) for _ in range(3))
    np.testing.assert_allclose(nn.linear_attention_baseline(q, k, v).data, v, rtol=1e-14)


@pytest.mark.parametrize("L", [1, 2, 7, 32])
def test_linear_matches_quadratic_oracle(rng, L):
    q, k, v = (rng.normal(size=(L, 5)) for _ in range(3))
    out = nn.linear_attention_baseline(q, k, v).data
    ref = linear_quadratic(q, k, v)
    assert np.linalg.norm(out - ref) <= 1e-8 * np.linalg.norm(ref)


@pytest.mark.parametrize("kernel", ["softmax", "linear"])
def test_causality_is_bitwise(rng, kernel):
    L, d = 20, 4
    q, k, v = (rng.normal(size=(L, d)) for _ in range(3))
    f = (lambda a, b, c: nn.softmax_attention(a, b, c).values.data) if kernel == "softmax" \
        else (lambda a, b, c: nn.linear_attention_baseline(a, b, c).data)
    base = f(q, k, v)
    for t in range(L - 1):
        q2, k2, v2 = q.copy(), k.copy(), v.copy()
        for x in (q2, k2, v2):
            x[t + 1:] += rng.normal(size=x[t + 1:].shape) * 5
        assert np.array_equal(f(q2, k2, v2)[: t + 1], base[: t + 1])


# --- layer norm ---------------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    out = nn.layer_norm(np.full((1, 5), 3.0), np.ones(5), np.zeros(5)).data
    assert np.array_equal(out, np.zeros((1, 5)))


def test_layer_norm_normalized_row():
    out = nn.layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2)).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-5)


def test_layer_norm_statistics(rng):
    # epsilon shrinks the variance to var / (var + 1e-5); rows at scale 100 keep it within 1e-6 of 1
    x = rng.normal(size=(10, 16)) * 100 + 2
    y = nn.layer_norm(x, np.ones(16), np.zeros(16)).data
    assert np.abs(y.mean(-1)).max() <= 1e-10
    var = x.var(-1)
    np.testing.assert_allclose(y.var(-1), var / (var + 1e-5), atol=1e-12)
    assert np.abs(y.var(-1) - 1).max() <= 1e-6


# --- gradients of primitives --------------------------------------------------------


def _numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


@pytest.mark.parametrize("op", ["softmax", "linear", "layer_norm", "silu", "l2", "causal_mean", "take"])
def test_primitive_vjps(rng, op):
    L, d = 5, 3
    xs = [rng.normal(size=(L, d)) for _ in range(3)]
    mask = np.array([False, True, True, False, True])
    w = rng.normal(size=(L, d))
    table = rng.normal(size=(6, d))
    ids = np.array([0, 3, 3, 5, 1])

    def build(ts):
        if op == "softmax":
            return nn.softmax_attention(*ts, key_mask=mask).values
        if op == "linear":
            return nn.linear_attention_baseline(*ts)
        if op == "layer_norm":
            return nn.layer_norm(ts[0], ts[1][0], ts[2][0])
        if op == "silu":
            return T.silu(ts[0])
        if op == "l2":
            return T.l2_normalize(ts[0])
        if op == "causal_mean":
            return T.causal_mean(ts[0], mask)
        return T.take(ts[0], ids)

    arrays = [table] if op == "take" else xs
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with GradientTape() as tape:
        out = build(ts)
        loss = T.sum(T.mul(out, w))
    grads = backward(tape, loss, ts)
    for t, a in zip(ts, arrays):
        num = _numeric_grad(lambda: float((build([Tensor(x) for x in arrays]).data * w).sum()), a)
        np.testing.assert_allclose(grads[t], num, atol=1e-7, rtol=1e-6)


def test_split_merge_heads_roundtrip(rng):
    x = rng.normal(size=(2, 5, 8))
    h = nn.split_heads(Tensor(x), 4)
    assert h.shape == (2, 4, 5, 2)
    assert np.array_equal(nn.merge_heads(h).data, x)

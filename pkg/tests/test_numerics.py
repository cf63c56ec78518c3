import math
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from convrag import numerics as nx
from convrag.errors import DimensionError, MaskError, NumericError, TokenIndexError
from convrag.numerics import Tensor

from gradcheck import analytic_and_numeric, relative_error


def T(x, grad=False):
    return Tensor(np.array(x, dtype=float), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        out = nx.matmul(T(np.eye(2)), T([[1, 2], [3, 4]]))
        assert out.values.tolist() == [[1, 2], [3, 4]]

    def test_zero_annihilator(self):
        out = nx.matmul(T([[1, 1], [1, 1]]), T(np.zeros((2, 2))))
        assert out.values.tolist() == [[0, 0], [0, 0]]

    def test_hand_product(self):
        out = nx.matmul(T([[1, 2], [3, 4]]), T([[5, 6], [7, 8]]))
        assert out.values.tolist() == [[19, 22], [43, 50]]

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nx.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_allclose(nx.softmax_rows(T([[1, 1, 1]])).values, [[1 / 3] * 3], atol=1e-15)

    def test_ln2_row(self):
        out = nx.softmax_rows(T([[0.0, math.log(2)]])).values
        np.testing.assert_allclose(out, [[1 / 3, 2 / 3]], atol=1e-15)

    def test_single_element(self):
        assert nx.softmax_rows(T([[7.5]])).values.tolist() == [[1.0]]

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            nx.softmax_rows(T([[0.0, float("nan")]]))

    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
                      elements=st.floats(-1e4, 1e4)))
    def test_rows_sum_to_one(self, x):
        y = nx.softmax_rows(T(x)).values
        assert (y >= 0).all()
        np.testing.assert_allclose(y.sum(axis=1), 1.0, rtol=0, atol=1e-12)


class TestCrossEntropy:
    def test_uniform_is_log_v(self):
        for V in (2, 7, 256):
            loss = nx.cross_entropy(T(np.zeros((3, V))), [0, V - 1, 1 % V]).item()
            assert loss == pytest.approx(math.log(V), abs=1e-12)

    def test_saturated(self):
        logits = np.zeros((2, 5))
        logits[0, 3] = logits[1, 1] = 40.0
        assert nx.cross_entropy(T(logits), [3, 1]).item() < 1e-10

    def test_hand_value(self):
        loss = nx.cross_entropy(T([[0.0, math.log(3)]]), [0]).item()
        assert loss == pytest.approx(math.log(4), abs=1e-12)
        assert loss == pytest.approx(1.3863, abs=1e-4)

    def test_target_out_of_range(self):
        with pytest.raises(TokenIndexError):
            nx.cross_entropy(T(np.zeros((1, 3))), [3])

    def test_weights(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        full = nx.cross_entropy(T(x), [0, 1, 2]).item()
        w = nx.cross_entropy(T(x), [0, 1, 2], weights=[1 / 3] * 3).item()
        assert w == pytest.approx(full, abs=1e-14)


class TestMaskedAttention:
    def setup_method(self):
        rng = np.random.default_rng(1)
        self.q, self.k, self.v = (T(rng.normal(size=(3, 2))) for _ in range(3))

    def test_single_allowed_position_copies_value(self):
        mask = np.array([[1, 0, 0], [1, 0, 0], [0, 0, 1]], dtype=bool)
        out = nx.masked_attention(self.q, self.k, self.v, mask).values
        np.testing.assert_array_equal(out[0], self.v.values[0])
        np.testing.assert_array_equal(out[1], self.v.values[0])
        np.testing.assert_array_equal(out[2], self.v.values[2])

    def test_identical_keys_average_values(self):
        k = self.k.values.copy()
        k[1] = k[0]
        mask = np.array([[1, 0, 0], [1, 1, 0], [1, 1, 1]], dtype=bool)
        out = nx.masked_attention(self.q, T(k), self.v, mask).values
        np.testing.assert_allclose(out[1], self.v.values[:2].mean(axis=0), atol=1e-15)

    def test_hand_causal_t2(self):
        # d=1: row 0 sees only itself; row 1 weights softmax([q1 k0, q1 k1])
        q, k, v = T([[1.0], [2.0]]), T([[0.5], [1.5]]), T([[10.0], [20.0]])
        out = nx.masked_attention(q, k, v, np.tril(np.ones((2, 2), bool))).values
        s0, s1 = 2.0 * 0.5, 2.0 * 1.5
        w1 = math.exp(s1) / (math.exp(s0) + math.exp(s1))
        assert out[0, 0] == 10.0
        assert out[1, 0] == pytest.approx(10.0 * (1 - w1) + 20.0 * w1, abs=1e-12)

    def test_empty_row_is_an_error(self):
        mask = np.array([[1, 0, 0], [0, 0, 0], [1, 1, 1]], dtype=bool)
        with pytest.raises(MaskError):
            nx.masked_attention(self.q, self.k, self.v, mask)

    def test_disallowed_positions_have_no_influence(self):
        mask = np.array([[1, 0, 0], [1, 1, 0], [1, 0, 1]], dtype=bool)
        probe = []
        base = nx.masked_attention(self.q, self.k, self.v, mask, probe).values
        assert (probe[0][~mask] == 0.0).all()
        k, v = self.k.values.copy(), self.v.values.copy()
        k[1] += 100.0
        v[1] -= 55.0
        # row 2 does not see position 1
        out = nx.masked_attention(self.q, T(k), T(v), mask).values
        assert out[2].tobytes() == base[2].tobytes()
        assert out[0].tobytes() == base[0].tobytes()


def _rand(rng, *shape):
    return T(rng.normal(size=shape), grad=True)


def _weighted(x, w):
    return nx.total(nx.matmul(x, w))


@pytest.mark.parametrize("op", [
    "matmul", "transpose", "add", "add_bias", "scale", "gelu", "layer_norm", "softmax_rows",
    "cross_entropy", "cross_entropy_weighted", "masked_attention", "embedding", "take_rows",
    "concat_rows", "concat_cols", "slice_cols", "weighted_sum",
])
def test_gradients_match_finite_differences(op):
    rng = np.random.default_rng(zlib.crc32(op.encode()))
    a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
    w = T(rng.normal(size=(4, 3)))
    vec = T(rng.normal(size=4), True)
    vec2 = T(rng.normal(size=4), True)
    mask = np.array([[1, 0, 0], [1, 1, 0], [0, 1, 1]], dtype=bool)
    table = _rand(rng, 6, 4)
    c = _rand(rng, 4, 3)
    cases = {
        "matmul": ([a, c], lambda: _weighted(nx.matmul(a, c), T(rng_fixed(3, 2)))),
        "transpose": ([a], lambda: _weighted(nx.transpose(a), T(rng_fixed(3, 5)))),
        "add": ([a, b], lambda: _weighted(nx.add(a, b), w)),
        "add_bias": ([a, vec], lambda: _weighted(nx.add_bias(a, vec), w)),
        "scale": ([a], lambda: _weighted(nx.scale(a, -1.7), w)),
        "gelu": ([a], lambda: _weighted(nx.gelu(a), w)),
        "layer_norm": ([a, vec, vec2], lambda: _weighted(nx.layer_norm(a, vec, vec2), w)),
        "softmax_rows": ([a], lambda: _weighted(nx.softmax_rows(a), w)),
        "cross_entropy": ([a], lambda: nx.cross_entropy(a, [1, 3, 0])),
        "cross_entropy_weighted": ([a], lambda: nx.cross_entropy(a, [1, 3, 0], [0.2, 0.5, 0.3])),
        "masked_attention": ([a, b, _rand(rng, 3, 4)], None),
        "embedding": ([table], lambda: _weighted(nx.embedding(table, [0, 3, 3, 5]),
                                                 T(rng_fixed(4, 2)))),
        "take_rows": ([a], lambda: _weighted(nx.take_rows(a, [2, 0, 2]), w)),
        "concat_rows": ([a, b], lambda: _weighted(nx.concat_rows([a, b]), w)),
        "concat_cols": ([a, b], lambda: _weighted(nx.concat_cols([a, b]), T(rng_fixed(8, 2)))),
        "slice_cols": ([a], lambda: _weighted(nx.slice_cols(a, 1, 3), T(rng_fixed(2, 2)))),
        "weighted_sum": ([a, b], lambda: nx.weighted_sum(
            [nx.total(a), _weighted(b, w)], [0.5, -2.0])),
    }
    tensors, fn = cases[op]
    if op == "masked_attention":
        q, k, v = tensors
        fn = lambda: _weighted(nx.masked_attention(q, k, v, mask), w)  # noqa: E731
    an, nu = analytic_and_numeric(fn, tensors)
    assert relative_error(an, nu) < 1e-4


def rng_fixed(*shape):
    return np.random.default_rng(99).normal(size=shape)


def test_no_tape_means_no_recording():
    a = T(np.ones((2, 2)), grad=True)
    out = nx.matmul(a, a)
    assert not out.requires_grad
    with nx.Tape() as tape:
        out = nx.matmul(a, a)
    assert out.requires_grad and len(tape) == 1


def test_tape_replays_in_reverse_topological_order():
    a = T(np.ones((2, 2)), grad=True)
    with nx.Tape() as tape:
        b = nx.matmul(a, a)
        c = nx.add(b, a)
        loss = nx.total(nx.add(c, b))
    ops = [op for op, _, _ in tape.records]
    assert ops == ["matmul", "add", "add", "total"]
    tape.backward(loss)
    # d/da of sum(a@a + a + a@a): 2 * (1 @ a.T + a.T @ 1) + 1
    ones = np.ones((2, 2))
    np.testing.assert_allclose(a.grad, 2 * (ones @ a.values.T + a.values.T @ ones) + 1)


def test_tensor_invariants():
    t = Tensor(np.zeros((2, 3)))
    assert int(np.prod(t.shape)) == t.values.size
    with pytest.raises(DimensionError):
        t.accumulate(np.zeros((3, 2)))
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))

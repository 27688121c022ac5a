import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from docnmt import tensor as T
from docnmt.errors import ContractError, DimensionError, NumericError
from docnmt.tensor import Tensor

from .gradcheck import numerical_gradient, relative_error


def t64(x, grad=False):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        m = [[1.0, 2.0], [3.0, 4.0]]
        np.testing.assert_array_equal((t64(np.eye(2)) @ t64(m)).data, m)

    def test_zero(self):
        out = t64(np.zeros((2, 2))) @ t64(np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(out.data, np.zeros((2, 3)))

    def test_hand_computed(self):
        # 1*5 + 2*6 = 17 ; 3*5 + 4*6 = 39
        out = t64([[1, 2], [3, 4]]) @ t64([[5], [6]])
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_shape_mismatch_names_both(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            t64(np.ones((2, 3))) @ t64(np.ones((2, 3)))

    def test_gradient_rule(self):
        rng = np.random.default_rng(0)
        a, b = t64(rng.normal(size=(3, 4)), True), t64(rng.normal(size=(4, 2)), True)
        g = rng.normal(size=(3, 2))
        (a @ b).backward(g)
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)

    def test_batched_weight_gradient(self):
        rng = np.random.default_rng(1)
        x, w = t64(rng.normal(size=(2, 3, 4)), True), t64(rng.normal(size=(4, 5)), True)
        (x @ w).sum().backward()
        loss = lambda: float((x.data @ w.data).sum())
        np.testing.assert_allclose(w.grad, numerical_gradient(loss, w.data), rtol=1e-6)
        np.testing.assert_allclose(x.grad, numerical_gradient(loss, x.data), rtol=1e-6)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax(t64([0.0, 0.0])).data, [0.5, 0.5])

    def test_large_values_stable(self):
        out = T.softmax(t64([1000.0, 1000.0, 1000.0])).data
        np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-15)

    def test_matches_high_precision(self):
        import mpmath

        mpmath.mp.dps = 50
        exps = [mpmath.e ** k for k in (1, 2, 3)]
        expected = [float(e / sum(exps)) for e in exps]
        np.testing.assert_allclose(T.softmax(t64([1.0, 2.0, 3.0])).data, expected, rtol=1e-14)

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            T.softmax(t64([0.0, np.nan]))

    def test_mask_gives_exact_zero(self):
        out = T.softmax(t64([[1.0, 2.0, 3.0]]), mask=np.array([[False, True, False]]))
        assert out.data[0, 1] == 0.0
        assert abs(out.data.sum() - 1) < 1e-15

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
                  elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, x):
        out = T.softmax(Tensor(x), axis=-1).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestLayerNorm:
    ones = t64(np.ones(2))
    zeros = t64(np.zeros(2))

    def test_constant_column_is_zero(self):
        out = T.layer_norm(t64([[3.0, 3.0]]), self.ones, self.zeros)
        np.testing.assert_array_equal(out.data, [[0.0, 0.0]])

    def test_unit_variance_column(self):
        # mean 0, variance 1: output = x / sqrt(1 + 1e-6)
        out = T.layer_norm(t64([[1.0, -1.0]]), self.ones, self.zeros)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_zero_gain_gives_bias(self):
        rng = np.random.default_rng(2)
        bias = t64([0.3, -0.7])
        out = T.layer_norm(t64(rng.normal(size=(4, 2))), self.zeros, bias)
        np.testing.assert_array_equal(out.data, np.broadcast_to(bias.data, (4, 2)))

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (3, 6), elements=st.floats(-100, 100)))
    def test_output_mean_zero(self, x):
        out = T.layer_norm(Tensor(x), t64(np.ones(6)), t64(np.zeros(6))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)

    def test_gradients(self):
        rng = np.random.default_rng(3)
        x = t64(rng.normal(size=(2, 3, 5)), True)
        g, b = t64(rng.normal(size=5), True), t64(rng.normal(size=5), True)
        w = rng.normal(size=(2, 3, 5))
        (T.layer_norm(x, g, b) * Tensor(w)).sum().backward()
        loss = lambda: float((T.layer_norm(Tensor(x.data), Tensor(g.data), Tensor(b.data)).data * w).sum())
        for p in (x, g, b):
            assert relative_error(p.grad, numerical_gradient(loss, p.data)) < 1e-7


class TestBackward:
    def test_sum_of_product(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 1))
        w = t64(rng.normal(size=(2, 3)), True)
        (w @ t64(x)).sum().backward()
        # every row of dW equals x^T
        np.testing.assert_allclose(w.grad, np.broadcast_to(x.T, (2, 3)))

    def test_disconnected_parameter(self):
        p, q = t64([1.0, 2.0], True), t64([3.0], True)
        (q * q).sum().backward()
        assert p.grad is None or np.all(p.grad == 0)

    def test_square(self):
        p = t64(3.0, True)
        (p ** 2).backward()
        assert p.grad == pytest.approx(6.0)

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            (t64([1.0, 2.0], True) * 2.0).backward()

    def test_every_graph_node_gets_grad(self):
        a = t64([1.0, 2.0], True)
        b = a * 3.0
        c = T.exp(b)
        c.sum().backward()
        assert all(t.grad is not None for t in (a, b, c))

    def test_shared_subexpression_accumulates(self):
        a = t64(2.0, True)
        b = a * a
        (b + b).backward()
        assert a.grad == pytest.approx(8.0)

    def test_determinism(self):
        rng = np.random.default_rng(5)
        x, w = rng.normal(size=(4, 6)), rng.normal(size=(6, 6))

        def run():
            return T.softmax(T.relu(t64(x) @ t64(w)), axis=-1).data

        assert np.array_equal(run(), run())

    def test_no_grad_skips_graph(self):
        a = t64([1.0], True)
        with T.no_grad():
            b = a * 2.0
        assert not b.requires_grad


UNARY = {
    "exp": T.exp,
    "sigmoid": T.sigmoid,
    "relu": T.relu,
    "log_softmax": lambda t: T.log_softmax(t, axis=-1),
    "softmax": lambda t: T.softmax(t, axis=-1),
    "transpose": lambda t: t.transpose(1, 0),
    "reshape": lambda t: t.reshape(6),
    "mean": lambda t: t.mean(axis=0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    rng = np.random.default_rng(6)
    fn = UNARY[name]
    x = t64(rng.normal(size=(2, 3)) + 0.05, True)
    out = fn(x)
    w = rng.normal(size=out.shape)
    (out * Tensor(w)).sum().backward()
    loss = lambda: float((fn(Tensor(x.data)).data * w).sum())
    assert relative_error(x.grad, numerical_gradient(loss, x.data)) < 1e-7


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_broadcast_binary_gradients(op):
    rng = np.random.default_rng(7)
    fn = getattr(T, op)
    a = t64(rng.normal(size=(2, 3, 4)), True)
    b = t64(rng.uniform(0.5, 1.5, size=(4,)), True)
    fn(a, b).sum().backward()
    loss = lambda: float(fn(Tensor(a.data), Tensor(b.data)).data.sum())
    for p in (a, b):
        assert relative_error(p.grad, numerical_gradient(loss, p.data)) < 1e-7


def test_concat_and_index_select_gradients():
    rng = np.random.default_rng(8)
    a, b = t64(rng.normal(size=(2, 3)), True), t64(rng.normal(size=(1, 3)), True)
    w = rng.normal(size=(4, 3))
    idx = [2, 0, 2, 1]
    (T.index_select(T.concat([a, b], 0), idx, 0) * Tensor(w)).sum().backward()
    loss = lambda: float((np.concatenate([a.data, b.data])[idx] * w).sum())
    for p in (a, b):
        assert relative_error(p.grad, numerical_gradient(loss, p.data)) < 1e-7


def test_cross_entropy_matches_log_softmax():
    rng = np.random.default_rng(9)
    logits = t64(rng.normal(size=(2, 3, 5)), True)
    targets = rng.integers(0, 5, size=(2, 3))
    weights = np.array([[1, 1, 0], [1, 0, 0]], dtype=np.float64)
    loss = T.cross_entropy(logits, targets, weights)
    logp = T.log_softmax(Tensor(logits.data)).data
    expected = -sum(logp[i, j, targets[i, j]] * weights[i, j] for i in range(2) for j in range(3))
    assert loss.item() == pytest.approx(expected, rel=1e-12)
    loss.backward()
    fn = lambda: float(T.cross_entropy(Tensor(logits.data), targets, weights).data)
    assert relative_error(logits.grad, numerical_gradient(fn, logits.data)) < 1e-7
    assert np.all(logits.grad[0, 2] == 0)


def test_uniform_logits_loss_is_log_vocab():
    v = 7
    loss = T.cross_entropy(t64(np.zeros((1, 4, v))), np.zeros((1, 4), int), np.ones((1, 4)))
    assert loss.item() / 4 == pytest.approx(math.log(v))


def test_embedding_out_of_range():
    with pytest.raises(ContractError):
        T.embedding_lookup(t64(np.zeros((3, 2))), [0, 3])

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from blockvit import numerics as nx
from blockvit.errors import DimensionError, DomainError, LabelError
from blockvit.gradcheck import gradcheck
from blockvit.numerics import ComputationTape, Tensor

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False, width=64)


def leaf(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


class TestTensor:
    def test_shape_and_size(self):
        t = Tensor(np.zeros((2, 3)))
        assert t.shape == (2, 3) and t.size == 6 and t.ndim == 2

    def test_default_dtype_is_32_bit(self):
        assert Tensor([1, 2]).dtype == np.float32

    def test_float_input_keeps_width(self):
        assert Tensor(np.array([1.0])).dtype == np.float64

    def test_precision_context(self):
        with nx.precision(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert nx.get_default_dtype() == np.float32

    def test_frozen_leaf_gets_no_grad(self):
        a = leaf([1.0, 2.0])
        b = Tensor(np.array([3.0, 4.0]), requires_grad=False)
        (a * b).sum().backward()
        assert b.grad is None
        np.testing.assert_array_equal(a.grad, [3.0, 4.0])

    def test_grad_shape_matches(self):
        a = leaf(np.ones((3, 4)))
        (a * 2.0).sum().backward()
        assert a.grad.shape == a.shape


class TestBackward:
    def test_square_derivative(self):
        x = leaf(3.0)
        (x * x).backward()
        assert x.grad == pytest.approx(6.0)

    def test_repeated_backward_accumulates(self):
        x = leaf(3.0)
        (x * x).backward()
        (x * x).backward()
        assert x.grad == pytest.approx(12.0)

    def test_non_scalar_loss_rejected(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(DimensionError):
            (x * 2.0).backward()

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with nx.no_grad():
            y = x * 2.0
        assert y.requires_grad is False

    def test_tape_replay_matches_fresh_backward(self):
        rng = np.random.default_rng(0)
        a = leaf(rng.standard_normal((3, 4)))
        b = leaf(rng.standard_normal((4, 2)))
        loss = nx.softmax(nx.matmul(a, b), axis=-1).log().sum()
        tape = ComputationTape.from_output(loss)
        grads = tape.replay(loss, np.ones((), dtype=np.float64))
        loss.backward()
        np.testing.assert_array_equal(grads[id(a)][1], a.grad)
        np.testing.assert_array_equal(grads[id(b)][1], b.grad)

    def test_broadcast_gradient_reduced(self):
        a = leaf(np.ones((2, 3)))
        b = leaf(np.ones(3))
        (a * b).sum().backward()
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])


class TestMatmul:
    def test_identity(self):
        b = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(nx.matmul(np.eye(3), b).data, b)

    def test_hand_example(self):
        out = nx.matmul(Tensor(np.array([[1.0, 2], [3, 4]])), Tensor(np.array([[1.0], [1.0]])))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_grad_of_sum_is_row_broadcast_of_column_sums(self):
        rng = np.random.default_rng(1)
        a = leaf(rng.standard_normal((3, 4)))
        b = rng.standard_normal((4, 5))
        nx.matmul(a, Tensor(b)).sum().backward()
        np.testing.assert_allclose(a.grad, np.tile(b.sum(axis=1), (3, 1)), rtol=1e-12)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nx.softmax(Tensor(np.full(4, 2.5)), temperature=0.3).data, 0.25, rtol=1e-6)

    def test_hand_example(self):
        out = nx.softmax(Tensor(np.array([0.0, math.log(3.0)])))
        np.testing.assert_allclose(out.data, [0.25, 0.75], rtol=1e-6)

    def test_small_temperature_one_hot(self):
        out = nx.softmax(Tensor(np.array([1.0, 2.0])), temperature=1e-3)
        np.testing.assert_allclose(out.data, [0.0, 1.0], atol=1e-6)

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_bad_temperature(self, t):
        with pytest.raises(DomainError):
            nx.softmax(Tensor(np.zeros(3)), temperature=t)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite),
           st.floats(0.05, 5.0))
    def test_rows_sum_to_one(self, x, t):
        out = nx.softmax(Tensor(x), axis=-1, temperature=t).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)

    def test_log_softmax_consistent(self):
        x = np.random.default_rng(3).standard_normal((4, 5))
        np.testing.assert_allclose(np.exp(nx.log_softmax(Tensor(x), temperature=0.7).data),
                                   nx.softmax(Tensor(x), temperature=0.7).data, rtol=1e-12)


class TestLayerNorm:
    def test_constant_input(self):
        out = nx.layer_norm(Tensor(np.full((2, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_hand_example(self):
        out = nx.layer_norm(Tensor(np.array([1.0, 3.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [-1.0, 1.0], rtol=1e-6)

    def test_axis_mismatch(self):
        with pytest.raises(DimensionError):
            nx.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(2, 16)),
                  elements=st.floats(-50, 50, width=32)))
    def test_zero_mean(self, x):
        d = x.shape[-1]
        out = nx.layer_norm(Tensor(x), Tensor(np.ones(d, np.float32)), Tensor(np.zeros(d, np.float32))).data
        assert np.all(np.abs(out.mean(axis=-1)) < 1e-5)

    def test_gradient_32_bit(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((3, 6)).astype(np.float32), requires_grad=True)
        g = Tensor(rng.standard_normal(6).astype(np.float32), requires_grad=True)
        b = Tensor(rng.standard_normal(6).astype(np.float32), requires_grad=True)
        w = rng.standard_normal((3, 6)).astype(np.float32)
        res = gradcheck(lambda: (nx.layer_norm(x, g, b) * w).sum(), [x, g, b], probes=20, h=1e-2)
        assert res.passed(1e-3)


class TestGelu:
    def test_zero(self):
        assert nx.gelu(Tensor(np.array([0.0]))).data[0] == 0.0

    def test_large_x_identity(self):
        assert nx.gelu(Tensor(np.array([30.0]))).data[0] == pytest.approx(30.0)

    def test_value_at_one(self):
        # 0.5 * (1 + tanh(sqrt(2/pi) * (1 + 0.044715)))
        expected = 0.5 * (1 + math.tanh(math.sqrt(2 / math.pi) * 1.044715))
        assert nx.gelu(Tensor(np.array([1.0]))).data[0] == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.8412, abs=1e-4)

    def test_documented_constant(self):
        assert nx.GELU_CONSTANT == pytest.approx(math.sqrt(2 / math.pi), rel=1e-15)


class TestCrossEntropy:
    def test_perfect_logits(self):
        logits = Tensor(np.array([[100.0, 0.0, 0.0]]))
        assert nx.cross_entropy(logits, [0]).item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_logits(self):
        logits = Tensor(np.zeros((3, 5)))
        assert nx.cross_entropy(logits, [0, 2, 4]).item() == pytest.approx(math.log(5), rel=1e-6)

    def test_weighted_hand_example(self):
        loss = nx.cross_entropy(Tensor(np.zeros((1, 2))), [0], np.array([2.0, 1.0]))
        assert loss.item() == pytest.approx(2 * math.log(2), rel=1e-6)

    @pytest.mark.parametrize("bad", [[-1], [3]])
    def test_label_range(self, bad):
        with pytest.raises(LabelError):
            nx.cross_entropy(Tensor(np.zeros((1, 3))), bad)


class TestPrimitiveGradients:
    """Directional finite differences in 64-bit for every primitive."""

    @pytest.mark.parametrize("name", ["add", "sub", "mul", "div", "exp", "log", "sqrt", "matmul", "softmax",
                                      "log_softmax", "layer_norm", "gelu", "l2_normalize", "getitem", "concat",
                                      "transpose", "mean", "cross_entropy"])
    def test_primitive(self, name):
        rng = np.random.default_rng(abs(hash(name)) % 2**32)
        a = leaf(rng.uniform(0.5, 2.0, (3, 4)))
        b = leaf(rng.uniform(0.5, 2.0, (3, 4)))
        w = rng.standard_normal((3, 4))
        ops = {
            "add": lambda: ((a + b) * w).sum(),
            "sub": lambda: ((a - b) * w).sum(),
            "mul": lambda: ((a * b) * w).sum(),
            "div": lambda: ((a / b) * w).sum(),
            "exp": lambda: (nx.exp(a) * w).sum(),
            "log": lambda: (nx.log(a) * w).sum(),
            "sqrt": lambda: (nx.sqrt(a) * w).sum(),
            "matmul": lambda: (nx.matmul(a, b.T) * w[:, :3]).sum(),
            "softmax": lambda: (nx.softmax(a, temperature=0.7) * w).sum(),
            "log_softmax": lambda: (nx.log_softmax(a, temperature=0.3) * w).sum(),
            "layer_norm": lambda: (nx.layer_norm(a, b[0], b[1]) * w).sum(),
            "gelu": lambda: (nx.gelu(a - b) * w).sum(),
            "l2_normalize": lambda: (nx.l2_normalize(a - b) * w).sum(),
            "getitem": lambda: (a[np.array([0, 2, 2])] * w[:3]).sum() + a[1:, 2].sum(),
            "concat": lambda: (nx.concat([a, b], axis=1) * np.concatenate([w, w], axis=1)).sum(),
            "transpose": lambda: (a.transpose(1, 0) * w.T).sum(),
            "mean": lambda: (a.mean(axis=0) * w[0]).sum(),
            "cross_entropy": lambda: nx.cross_entropy(a * b, [0, 3, 1], np.array([1.0, 2.0, 0.5, 1.5])),
        }
        res = gradcheck(ops[name], [a, b], probes=10)
        assert res.passed(1e-7), res.max_rel_err


class TestDeterminism:
    def test_identical_runs_bitwise(self):
        def run():
            rng = np.random.default_rng(7)
            a = Tensor(rng.standard_normal((4, 8)).astype(np.float32), requires_grad=True)
            w = Tensor(rng.standard_normal((8, 3)).astype(np.float32), requires_grad=True)
            loss = nx.cross_entropy(nx.gelu(nx.matmul(a, w)), [0, 1, 2, 0])
            loss.backward()
            return loss.data.copy(), a.grad.copy(), w.grad.copy()

        for x, y in zip(run(), run()):
            assert np.array_equal(x, y)

import math

import numpy as np
import pytest

from babelkit import tape as T
from babelkit.precision import FP16
from babelkit.tape import DiffTape, NotOnTapeError, ShapeError, Tensor, record_forward


class TestForwardExamples:
    def test_scalar_matmul(self):
        tp = DiffTape()
        out = T.matmul(tp.constant([[2.0]]), tp.constant([[3.0]]))
        assert out.data == np.array([[6.0]])

    def test_mean(self):
        assert T.mean(Tensor([1.0, 2.0, 3.0, 4.0])).item() == 2.5

    def test_softmax_symmetry(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_shape_error_names_primitive(self):
        tp = DiffTape()
        with pytest.raises(ShapeError, match="matmul"):
            T.matmul(tp.constant(np.ones((2, 3))), tp.constant(np.ones((2, 3))))
        with pytest.raises(ShapeError, match="add"):
            T.add(tp.constant(np.ones(3)), tp.constant(np.ones(4)))

    def test_record_forward_returns_taped_output(self):
        tp = DiffTape()
        out = record_forward(tp, lambda a, b: T.add(T.mul(a, b), a), [1.0, 2.0], 3.0)
        np.testing.assert_array_equal(out.data, [4.0, 8.0])
        assert out.tape is tp

    def test_record_forward_rejects_untaped_output(self):
        tp = DiffTape()
        with pytest.raises(NotOnTapeError):
            record_forward(tp, lambda a: Tensor(a.data), [1.0])


class TestBackwardExamples:
    def test_square(self):
        tp = DiffTape()
        x = tp.parameter(3.0, "x")
        out = T.mul(x, x)
        assert tp.backward(out)["x"] == 6.0

    def test_mean_of_x_2x(self):
        tp = DiffTape()
        x = tp.parameter(1.0, "x")
        out = T.mean(T.add(T.mul(x, np.array([1.0, 0.0])), T.mul(x, np.array([0.0, 2.0]))))
        assert tp.backward(out)["x"] == 1.5

    def test_softmax_cross_entropy_uniform(self):
        # d/dlogits of -log softmax(logits)[0] at uniform = p - onehot
        tp = DiffTape()
        logits = tp.parameter([1.0, 1.0, 1.0], "logits")
        loss = T.mul(T.gather(T.log(T.softmax(logits)), [0]), -1.0)
        g = tp.backward(T.mean(loss))["logits"]
        np.testing.assert_allclose(g, [-2 / 3, 1 / 3, 1 / 3], atol=1e-12)

    def test_untouched_parameter_gets_zeros(self):
        tp = DiffTape()
        x = tp.parameter(2.0, "x")
        tp.parameter(np.ones((2, 2)), "unused")
        g = tp.backward(T.mul(x, x))
        np.testing.assert_array_equal(g["unused"], np.zeros((2, 2)))

    def test_frozen_leaf_zero_gradient(self):
        tp = DiffTape()
        x = tp.parameter(3.0, "x")
        w = tp.parameter(5.0, "w", trainable=False)
        g = tp.backward(T.mul(x, w))
        assert g["x"] == 5.0
        assert g["w"] == 0.0

    def test_non_scalar_output_rejected(self):
        tp = DiffTape()
        x = tp.parameter([1.0, 2.0], "x")
        with pytest.raises(ShapeError):
            tp.backward(T.mul(x, 2.0))

    def test_foreign_output_rejected(self):
        tp = DiffTape()
        with pytest.raises(NotOnTapeError):
            tp.backward(Tensor(1.0))

    def test_gather_accumulates_duplicate_indices(self):
        tp = DiffTape()
        x = tp.parameter([1.0, 2.0], "x")
        out = T.mean(T.gather(x, [0, 0, 1]))
        np.testing.assert_allclose(tp.backward(out)["x"], [2 / 3, 1 / 3])

    def test_matmul_reshape_chain(self):
        tp = DiffTape()
        w = tp.parameter(np.arange(6.0).reshape(2, 3), "w")
        out = T.mean(T.reshape(T.matmul(np.ones((1, 2)), w), (3,)))
        np.testing.assert_allclose(tp.backward(out)["w"], np.full((2, 3), 1 / 3))


class TestFiniteDifferenceAllPrimitives:
    CASES = [
        ("matmul", lambda x: T.mean(T.matmul(x, np.arange(6.0).reshape(3, 2))), (2, 3)),
        ("add", lambda x: T.mean(T.add(x, 1.5)), (4,)),
        ("mul", lambda x: T.mean(T.mul(x, x)), (4,)),
        ("mean_axis", lambda x: T.mean(T.mean(x, axis=1, keepdims=True)), (3, 2)),
        ("relu", lambda x: T.mean(T.relu(x)), (5,)),
        ("softmax", lambda x: T.mean(T.mul(T.softmax(x), np.arange(4.0))), (4,)),
        ("log", lambda x: T.mean(T.log(x)), (4,)),
        ("gather", lambda x: T.mean(T.gather(x, [2, 0])), (4,)),
        ("reshape", lambda x: T.mean(T.mul(T.reshape(x, (6,)), np.arange(6.0))), (2, 3)),
    ]

    @pytest.mark.parametrize("name,f,shape", CASES, ids=[c[0] for c in CASES])
    def test_primitive_gradients(self, name, f, shape):
        from babelkit.checks import finite_diff_check

        rng = np.random.default_rng(42)
        for trial in range(10):
            point = rng.standard_normal(shape)
            if name == "log":
                point = np.abs(point) + 0.5
            if name == "relu":
                point += np.sign(point) * 0.05  # stay off the kink
            assert finite_diff_check(f, point) < 1e-4


class TestReplayAndPrecision:
    def _program(self, tp, mode_data):
        x = tp.parameter(mode_data, "x")
        h = T.relu(T.matmul(x, np.arange(9.0).reshape(3, 3) / 7))
        return T.mean(T.log(T.add(T.softmax(h), 1.0)))

    def test_replay_bit_identical_exact(self):
        tp = DiffTape()
        self._program(tp, np.random.default_rng(3).standard_normal((2, 3)))
        assert tp.replay()

    def test_replay_bit_identical_fp16(self):
        tp = DiffTape(FP16)
        self._program(tp, np.random.default_rng(3).standard_normal((2, 3)))
        assert tp.replay()

    def test_fp16_tape_quantizes_outputs(self):
        tp = DiffTape(FP16)
        out = T.mul(tp.parameter(1.0, "x"), 1.0001)
        assert out.item() == 1.0  # 1.0001 rounds to 1.0 in fp16

    def test_overflow_sets_contaminated(self):
        tp = DiffTape(FP16)
        x = tp.parameter(60000.0, "x")
        out = T.mul(x, 2.0)
        assert out.item() == math.inf
        assert out.contaminated
        assert not x.contaminated

    def test_duplicate_parameter_name_rejected(self):
        tp = DiffTape()
        tp.parameter(1.0, "x")
        with pytest.raises(ValueError, match="duplicate"):
            tp.parameter(2.0, "x")

    def test_cross_tape_mixing_rejected(self):
        a, b = DiffTape(), DiffTape()
        xa = a.parameter(1.0, "x")
        xb = b.parameter(1.0, "x")
        with pytest.raises(ValueError, match="different tape"):
            T.add(xa, xb)

    def test_gradients_quantized_under_fp16(self):
        tp = DiffTape(FP16)
        x = tp.parameter(1.0, "x")
        g = tp.backward(T.mul(x, 3.14159))
        # gradient equals the (quantized) constant 3.14159 -> fp16 grid
        assert g["x"] == np.float64(np.float16(3.14159))

    def test_tapeless_tensors_compute_forward_only(self):
        out = T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])
        assert out.tape is None

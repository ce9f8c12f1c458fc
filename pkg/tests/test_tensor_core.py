import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from aaf import ops
from aaf.gradcheck import gradcheck, gradcheck_params
from aaf.tensor import GradTape, ShapeError, TapeError, Tensor, backward, sgd_step

SMALL = st.floats(-2, 2, allow_nan=False, allow_infinity=False)


def maps(shape):
    return hnp.arrays(np.float64, shape, elements=SMALL)


class TestMatmul:
    def test_identity(self):
        out = ops.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[5], [7]]))
        np.testing.assert_array_equal(out.data, [[5], [7]])

    def test_hand_arithmetic(self):
        assert ops.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_gradient_flows_to_both(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.uniform(-2, 2, (3, 4)))
        b = Tensor(rng.uniform(-2, 2, (4, 2)))
        errs = gradcheck_params(lambda: ops.sum(ops.matmul(a, b)), {"a": a, "b": b})
        assert max(errs.values()) <= 1e-8


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)

    def test_direct_evaluation(self):
        e2 = np.exp(2.0)
        np.testing.assert_allclose(ops.softmax(Tensor([0.0, 2.0])).data, [1 / (1 + e2), e2 / (1 + e2)],
                                   rtol=1e-14)
        np.testing.assert_allclose(ops.softmax(Tensor([0.0, 2.0])).data, [0.1192, 0.8808], atol=5e-5)

    def test_no_overflow(self):
        out = ops.softmax(Tensor([1000.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_array_equal(out, [0.5, 0.5])

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            ops.softmax(Tensor(np.ones((2, 2))), axis=2)

    @given(maps((3, 5)), st.sampled_from([0, 1, -1, -2]))
    def test_sums_to_one_and_positive(self, x, axis):
        out = ops.softmax(Tensor(x * 50), axis=axis).data
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-12)


class TestElementwise:
    def test_mul(self):
        assert ops.elementwise("mul", Tensor([1, 2]), Tensor([3, 4])).data.tolist() == [3.0, 8.0]

    def test_self_subtraction(self):
        x = Tensor(np.random.default_rng(1).normal(size=(4, 3)))
        assert not ops.elementwise("sub", x, x).data.any()

    def test_channel_broadcast(self):
        fmap = Tensor(np.arange(12.0).reshape(2, 2, 3))
        vec = Tensor(np.array([[[1.0, 2.0, 3.0]]]))
        out = ops.elementwise("mul", fmap, vec)
        np.testing.assert_array_equal(out.data, fmap.data * np.array([1.0, 2.0, 3.0]))

    def test_not_broadcastable(self):
        with pytest.raises(ShapeError):
            ops.elementwise("add", Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            ops.elementwise("pow", Tensor([1.0]), Tensor([1.0]))


class TestConcat:
    def test_arity_adds(self):
        assert ops.concat_channels([Tensor(np.ones((5, 4))), Tensor(np.ones((5, 4)))]).shape == (5, 8)

    def test_single_part_identity(self):
        t = Tensor(np.ones((2, 3)))
        assert ops.concat_channels([t]) is t

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            ops.concat_channels([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))])

    @given(maps((4, 6)), st.lists(st.integers(1, 3), min_size=1, max_size=3))
    def test_split_then_concat_is_bit_exact(self, x, widths):
        total = int(np.sum(widths))
        t = Tensor(np.resize(x, (4, total)))
        back = ops.concat_channels(ops.split_channels(t, widths))
        assert np.array_equal(back.data, t.data)


class TestGlobalPool:
    def test_max(self):
        assert ops.global_pool(Tensor([[2, 1], [0, 5]]), "max").data.tolist() == [[2.0, 5.0]]

    def test_avg(self):
        assert ops.global_pool(Tensor([[2, 1], [0, 5]]), "avg").data.tolist() == [[1.0, 3.0]]

    def test_single_position(self):
        v = Tensor([[3.0, -1.0]])
        for mode in ("max", "avg"):
            np.testing.assert_array_equal(ops.global_pool(v, mode).data, v.data)

    def test_max_gradient_goes_to_first_argmax(self):
        x = Tensor([[1.0, 4.0], [1.0, 4.0], [0.0, 2.0]], requires_grad=True)
        with GradTape() as tape:
            loss = ops.sum(ops.global_pool(x, "max"))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [[1, 1], [0, 0], [0, 0]])

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            ops.global_pool(Tensor(np.ones((2, 2))), "min")


class TestPointwiseLinear:
    def test_identity_weights(self):
        x = Tensor(np.random.default_rng(2).normal(size=(5, 3)))
        out = ops.pointwise_linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_weights_give_bias(self):
        out = ops.pointwise_linear(Tensor(np.ones((4, 3))), Tensor(np.zeros((3, 2))), Tensor([1.5, -2.0]))
        np.testing.assert_array_equal(out.data, np.tile([1.5, -2.0], (4, 1)))

    def test_matches_matmul(self):
        rng = np.random.default_rng(3)
        x, w = rng.normal(size=(1, 3)), rng.normal(size=(3, 2))
        out = ops.pointwise_linear(Tensor(x), Tensor(w))
        np.testing.assert_allclose(out.data, x @ w, rtol=1e-15)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ops.pointwise_linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with GradTape() as tape:
            loss = ops.sum(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_product_rule(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=4), requires_grad=True)
        y = Tensor(rng.normal(size=4))
        with GradTape():
            loss = ops.sum(ops.mul(x, y))
            backward(loss)
        np.testing.assert_array_equal(x.grad, y.data)

    def test_shared_input_accumulates_once_per_call(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with GradTape() as tape:
            loss = ops.sum(ops.add(ops.mul(x, x), x))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, 2 * x.data + 1)

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with GradTape() as tape:
            y = ops.scale(x, 2.0)
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_without_tape(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = ops.sum(x)
        with pytest.raises(TapeError):
            backward(loss)

    def test_reset_clears_record(self):
        x = Tensor([1.0], requires_grad=True)
        with GradTape() as tape:
            loss = ops.sum(ops.scale(x, 3.0))
        tape.backward(loss)
        tape.reset()
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_separate_tapes_in_threads(self):
        results = {}

        def work(i):
            x = Tensor(np.full(3, float(i)), requires_grad=True)
            with GradTape() as tape:
                loss = ops.sum(ops.mul(x, x))
            tape.backward(loss)
            results[i] = x.grad

        threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for i in range(4):
            np.testing.assert_array_equal(results[i], np.full(3, 2.0 * i))


class TestGradcheck:
    def test_linear_is_exact(self):
        x = Tensor(np.random.default_rng(5).uniform(-2, 2, 6))
        w = Tensor(np.random.default_rng(6).uniform(-2, 2, 6))
        assert gradcheck(lambda t: ops.sum(ops.mul(t, w)), x) <= 1e-10

    def test_softmax_sum(self):
        x = Tensor(np.random.default_rng(7).uniform(-2, 2, 5))
        assert gradcheck(lambda t: ops.sum(ops.softmax(t)), x) <= 1e-6

    def test_detects_wrong_gradient(self):
        x = Tensor(np.random.default_rng(8).uniform(-2, 2, 4))

        def wrong(t):
            out = ops.mul(t, t)
            from aaf.tensor import record

            return ops.sum(record(out.data, (out,), lambda g: (3 * g,)))

        assert gradcheck(wrong, x) > 1e-2


class TestSgd:
    def test_arithmetic(self):
        p = Tensor([1.0])
        p.grad = np.array([2.0])
        sgd_step([p], 0.1)
        assert p.data[0] == pytest.approx(0.8, abs=1e-15)
        assert p.grad is None

    def test_zero_lr(self):
        p = Tensor([1.0, -3.0])
        p.grad = np.array([5.0, 5.0])
        sgd_step([p], 0.0)
        np.testing.assert_array_equal(p.data, [1.0, -3.0])

    def test_steps_compose(self):
        p = Tensor([1.0])
        for _ in range(2):
            p.grad = np.array([2.0])
            sgd_step([p], 0.1)
        assert p.data[0] == pytest.approx(1.0 - 2 * 0.1 * 2.0, abs=1e-15)

    def test_missing_grad(self):
        with pytest.raises(TapeError, match="w"):
            sgd_step([Tensor([1.0], name="w")], 0.1)


def test_forward_is_deterministic():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 4, 3))

    def run():
        t = Tensor(x)
        return ops.softmax(ops.matmul(t, ops.swap_last(t)), axis=-2).data

    assert np.array_equal(run(), run())


def test_zero_extent_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones((0, 3)))

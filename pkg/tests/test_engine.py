"""Tensor engine: op values, tape semantics, gradient checks, Adam, RNG."""

import numpy as np
import pytest

from dfvq import Adam, AdamState, NumericError, Rng, ShapeError, TapeError, Tensor, adam_step, grad_check, record
from dfvq import tensor as T


class TestTensorBasics:
    def test_shape_data_invariant(self):
        t = Tensor(np.arange(12.0).reshape(3, 4))
        assert t.shape == (3, 4)
        assert t.size == 12

    def test_nonfinite_input_rejected(self):
        with pytest.raises(NumericError):
            Tensor([1.0, np.inf])

    def test_nonfinite_op_output_rejected(self):
        with pytest.raises(NumericError):
            T.log(Tensor([0.0]))
        with pytest.raises(NumericError):
            T.div(Tensor([1.0]), Tensor([0.0]))

    def test_elementwise_values(self):
        a = Tensor([1.0, 2.0])
        b = Tensor([3.0, 5.0])
        assert np.array_equal((a + b).data, [4.0, 7.0])
        assert np.array_equal((a * b).data, [3.0, 10.0])
        assert np.array_equal((b - a).data, [2.0, 3.0])
        assert np.array_equal((b / a).data, [3.0, 2.5])

    def test_broadcast_backward_sums(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((1, 3)), requires_grad=True)
        with record() as tape:
            out = (a * b).sum()
        tape.backward(out)
        assert a.grad.shape == (2, 3)
        assert b.grad.shape == (1, 3)
        assert np.array_equal(b.grad, [[2.0, 2.0, 2.0]])


class TestTape:
    def test_backward_visits_reverse_order_once(self):
        x = Tensor([2.0], requires_grad=True)
        with record() as tape:
            y = x * x
            z = (y * x).sum()  # x**3
        tape.backward(z)
        assert np.allclose(x.grad, [12.0])  # 3 x^2

    def test_unrecorded_root_rejected(self):
        x = Tensor([2.0], requires_grad=True)
        with record() as tape:
            y = (x * x).sum()
        stray = (y * x).sum()  # built after the tape closed
        with pytest.raises(TapeError):
            tape.backward(stray)

    def test_second_backward_rejected(self):
        x = Tensor([2.0], requires_grad=True)
        with record() as tape:
            y = (x * x).sum()
        tape.backward(y)
        with pytest.raises(TapeError):
            tape.backward(y)

    def test_nonscalar_root_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with record() as tape:
            y = x * x
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_no_tape_means_no_recording(self):
        x = Tensor([2.0], requires_grad=True)
        y = (x * x).sum()
        assert y.requires_grad
        assert x.grad is None


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        b = Tensor(np.zeros(1))
        out = T.conv2d(x, w, b, stride=1, padding=0)
        assert np.array_equal(out.data, x.data)

    def test_direct_summation_oracle(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        w = Tensor(np.ones((1, 1, 2, 2)))
        out = T.conv2d(x, w, Tensor(np.zeros(1)), stride=1, padding=0)
        assert out.shape == (1, 1, 1, 1)
        assert out.data.reshape(()) == 10.0

    def test_output_shape_formula(self):
        x = Tensor(np.zeros((1, 1, 4, 4)))
        w = Tensor(np.zeros((2, 1, 3, 3)))
        out = T.conv2d(x, w, None, stride=2, padding=1)
        assert out.shape == (1, 2, 2, 2)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))))

    def test_kernel_does_not_fit_raises(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))

    def test_linear_in_input(self):
        # conv(a+b) == conv(a) + conv(b) for bias 0
        rng = Rng(11)
        a = Tensor(rng.normal((1, 2, 6, 6)))
        b = Tensor(rng.normal((1, 2, 6, 6)))
        w = Tensor(rng.normal((3, 2, 3, 3)))
        lhs = T.conv2d(Tensor(a.data + b.data), w, None, 1, 1).data
        rhs = T.conv2d(a, w, None, 1, 1).data + T.conv2d(b, w, None, 1, 1).data
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_determinism(self):
        rng = Rng(5)
        x = rng.normal((2, 3, 8, 8))
        w = rng.normal((4, 3, 3, 3))
        out1 = T.conv2d(Tensor(x), Tensor(w), None, 2, 1).data
        out2 = T.conv2d(Tensor(x), Tensor(w), None, 2, 1).data
        assert np.array_equal(out1, out2)


class TestGradCheck:
    def test_square_sum_analytic(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with record() as tape:
            y = (x * x).sum()
        tape.backward(y)
        assert np.array_equal(x.grad, [2.0, 4.0, 6.0])
        err = grad_check(lambda t: t * t, [Tensor([1.0, 2.0, 3.0])], eps=1e-5)
        assert err <= 1e-6

    def test_conv_relu_chain(self):
        rng = Rng(7)
        x = Tensor(rng.normal((1, 2, 5, 5)))
        w = Tensor(rng.normal((3, 2, 3, 3)) * 0.5)
        b = Tensor(rng.normal(3) * 0.1)
        err = grad_check(lambda xx, ww, bb: T.relu(T.conv2d(xx, ww, bb, 2, 1)), [x, w, b])
        assert err <= 1e-4

    @pytest.mark.parametrize("op", [
        T.relu, T.sigmoid, T.tanh, T.exp,
        lambda t: T.leaky_relu(t, 0.2),
        lambda t: T.softmax(t, axis=-1),
        lambda t: T.log_softmax(t, axis=-1),
    ])
    def test_unary_ops(self, op):
        rng = Rng(3)
        x = Tensor(rng.normal((4, 5)) + 0.1)
        probe = Tensor(rng.normal((4, 5)))  # keeps the summed output non-degenerate
        assert grad_check(lambda t: op(t) * probe, [x]) <= 1e-4

    def test_matmul_and_reshape(self):
        rng = Rng(9)
        a = Tensor(rng.normal((3, 4)))
        b = Tensor(rng.normal((4, 2)))
        assert grad_check(lambda x, y: T.matmul(x, y), [a, b]) <= 1e-4
        assert grad_check(lambda x: T.reshape(x, (2, 6)).transpose((1, 0)), [a.data.copy()]) <= 1e-4

    def test_embedding_and_gather(self):
        rng = Rng(13)
        table = Tensor(rng.normal((6, 4)))
        ids = np.array([0, 2, 2, 5])
        assert grad_check(lambda t: T.embedding(t, ids), [table]) <= 1e-4
        x = Tensor(rng.normal((4, 3)))
        idx = np.array([0, 2, 1, 1])
        assert grad_check(lambda t: T.gather_last(t, idx), [x]) <= 1e-4

    def test_upsample_and_concat(self):
        rng = Rng(21)
        x = Tensor(rng.normal((1, 2, 3, 3)))
        assert grad_check(lambda t: T.nearest_upsample(t, 2), [x]) <= 1e-4
        a = Tensor(rng.normal((2, 3)))
        b = Tensor(rng.normal((2, 2)))
        assert grad_check(lambda u, v: T.concat([u, v], axis=1), [a, b]) <= 1e-4


class TestAdam:
    def test_zero_gradient_leaves_param(self):
        p = np.array([1.5, -2.0])
        state = AdamState(lr=0.1)
        new, state = adam_step([p], [np.zeros(2)], state)
        assert np.array_equal(new[0], p)

    def test_first_step_magnitude(self):
        # bias-corrected m_hat / (sqrt(v_hat)+eps) == sign(g) on step 1, up to eps
        p = np.array([0.0])
        g = np.array([0.5])
        new, _ = adam_step([p], [g], AdamState(lr=0.1))
        assert abs(new[0][0] - (-0.1)) < 1e-6

    def test_determinism(self):
        rng = Rng(2)
        p = rng.normal(5)
        g = rng.normal(5)
        a, _ = adam_step([p.copy()], [g.copy()], AdamState(lr=0.01))
        b, _ = adam_step([p.copy()], [g.copy()], AdamState(lr=0.01))
        assert np.array_equal(a[0], b[0])

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            adam_step([np.zeros(3)], [np.zeros(4)], AdamState())

    def test_nonfinite_grad_raises(self):
        with pytest.raises(NumericError):
            adam_step([np.zeros(2)], [np.array([1.0, np.nan])], AdamState())

    def test_stateful_wrapper_tracks_moments(self):
        p = Tensor(np.ones(3), requires_grad=True)
        opt = Adam([p], lr=0.05)
        for _ in range(3):
            p.grad = np.ones(3)
            opt.step()
            opt.zero_grad()
        assert opt.state.step == 3
        assert np.all(p.data < 1.0)


class TestRng:
    def test_same_seed_same_stream(self):
        a = Rng(0).uniform(1000)
        b = Rng(0).uniform(1000)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(0).uniform(100), Rng(1).uniform(100))

    def test_uniform_mean(self):
        u = Rng(42).uniform(100_000)
        assert 0.49 <= u.mean() <= 0.51
        assert u.min() >= 0.0 and u.max() < 1.0

    def test_normal_moments(self):
        z = Rng(7).normal(100_000)
        assert abs(z.mean()) < 0.02
        assert abs(z.std() - 1.0) < 0.02

    def test_integers_range(self):
        v = Rng(3).integers(2, 9, 1000)
        assert v.min() >= 2 and v.max() < 9

    def test_spawn_independent(self):
        root = Rng(5)
        a = root.spawn(0).uniform(50)
        b = root.spawn(1).uniform(50)
        assert not np.array_equal(a, b)
        assert np.array_equal(a, Rng(5).spawn(0).uniform(50))

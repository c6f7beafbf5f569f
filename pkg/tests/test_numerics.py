"""Autodiff ops against hand values and the finite-difference oracle."""

import math

import numpy as np
import pytest

from seqdet3d.errors import (
    MissingGradientError,
    NondeterministicObjectiveError,
    ShapeMismatchError,
)
from seqdet3d.numerics import (
    ParamStore,
    Tensor,
    adam_step,
    atan2,
    bilinear_sample,
    clip_value,
    concat,
    conv2d_3x3,
    cosine_lr,
    exp,
    grad_check,
    huber,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    pow_const,
    relu,
    reshape,
    softmax,
    take_col,
    take_per_row,
    take_rows,
    tsum,
)
from seqdet3d.numerics.tensor import mul

RNG = np.random.default_rng(2024)


def check_op(build, arrays, tol=1e-6):
    """Assert reverse-mode gradients of a composed op match central FD."""
    store = ParamStore()
    for name, arr in arrays.items():
        store.add(name, arr)
    err, _ = grad_check(store, lambda: build(store))
    assert err < tol, f"gradient mismatch: {err}"


class TestForwardValues:
    def test_linear_identity(self):
        x = Tensor(RNG.normal(size=(4, 3)))
        y = linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(y.data, x.data)

    def test_linear_zero_weights_bias_only(self):
        x = Tensor(RNG.normal(size=(5, 2)))
        beta = np.array([1.5, -2.0, 0.25])
        y = linear(x, Tensor(np.zeros((2, 3))), Tensor(beta))
        np.testing.assert_array_equal(y.data, np.tile(beta, (5, 1)))

    def test_linear_hand_case(self):
        y = linear(Tensor([[1.0, 2.0]]), Tensor([[1.0, 1.0], [1.0, -1.0]]), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(y.data, [[3.0, -1.0]])

    def test_linear_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(5)))

    def test_conv_dirac_identity(self):
        x = Tensor(RNG.normal(size=(6, 7, 2)))
        k = np.zeros((3, 3, 2, 2))
        k[1, 1] = np.eye(2)
        y = conv2d_3x3(x, Tensor(k), Tensor(np.zeros(2)))
        np.testing.assert_allclose(y.data, x.data)

    def test_conv_ones_kernel_interior(self):
        c = 0.75
        x = Tensor(np.full((5, 5, 1), c))
        y = conv2d_3x3(x, Tensor(np.ones((3, 3, 1, 1))), Tensor(np.zeros(1)))
        assert math.isclose(y.data[2, 2, 0], 9 * c, abs_tol=1e-12)
        # corner sees only 4 cells
        assert math.isclose(y.data[0, 0, 0], 4 * c, abs_tol=1e-12)

    def test_conv_against_loop_oracle(self):
        x = RNG.normal(size=(5, 5, 1))
        k = RNG.normal(size=(3, 3, 1, 1))
        b = RNG.normal(size=(1,))
        y = conv2d_3x3(Tensor(x), Tensor(k), Tensor(b)).data
        padded = np.zeros((7, 7, 1))
        padded[1:-1, 1:-1] = x
        for i in range(5):
            for j in range(5):
                acc = b[0]
                for di in range(3):
                    for dj in range(3):
                        acc += padded[i + di, j + dj, 0] * k[di, dj, 0, 0]
                assert math.isclose(y[i, j, 0], acc, abs_tol=1e-12)

    def test_bilinear_at_cell_center(self):
        m = Tensor(RNG.normal(size=(4, 4, 3)))
        out = bilinear_sample(m, np.array([[2.0, 1.0]]))
        np.testing.assert_array_equal(out.data[0], m.data[2, 1])

    def test_bilinear_midpoint_average(self):
        m = Tensor(RNG.normal(size=(4, 4, 2)))
        out = bilinear_sample(m, np.array([[1.0, 1.5]]))
        np.testing.assert_allclose(out.data[0], 0.5 * (m.data[1, 1] + m.data[1, 2]))

    def test_bilinear_hand_weights(self):
        m = Tensor(RNG.normal(size=(4, 4, 2)))
        out = bilinear_sample(m, np.array([[1.25, 2.75]]))
        expected = (
            0.75 * 0.25 * m.data[1, 2]
            + 0.75 * 0.75 * m.data[1, 3]
            + 0.25 * 0.25 * m.data[2, 2]
            + 0.25 * 0.75 * m.data[2, 3]
        )
        np.testing.assert_allclose(out.data[0], expected)

    def test_bilinear_out_of_bounds_zero(self):
        m = Tensor(np.ones((3, 3, 1)))
        out = bilinear_sample(m, np.array([[-5.0, 1.0], [1.0, 10.0]]))
        np.testing.assert_array_equal(out.data, np.zeros((2, 1)))

    def test_bilinear_border_partial(self):
        m = Tensor(np.ones((3, 3, 1)))
        # half a cell outside the top edge: only 50% weight lands inside
        out = bilinear_sample(m, np.array([[-0.5, 1.0]]))
        np.testing.assert_allclose(out.data[0], [0.5])

    def test_bilinear_rejects_nonfinite(self):
        m = Tensor(np.ones((3, 3, 1)))
        with pytest.raises(ValueError):
            bilinear_sample(m, np.array([[np.nan, 0.0]]))

    def test_softmax_uniform(self):
        out = softmax(Tensor(np.zeros((2, 4))))
        np.testing.assert_allclose(out.data, np.full((2, 4), 0.25))

    def test_softmax_two_class(self):
        out = softmax(Tensor([[0.0, math.log(3.0)]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-15)

    def test_softmax_shift_invariance(self):
        x = RNG.normal(size=(3, 5))
        a = softmax(Tensor(x)).data
        b = softmax(Tensor(x + 7.25)).data
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_softmax_sums_to_one(self):
        x = RNG.uniform(-50, 50, size=(100, 6))
        s = softmax(Tensor(x)).data
        np.testing.assert_allclose(s.sum(axis=-1), np.ones(100), atol=1e-12)

    def test_log_softmax_matches_softmax(self):
        x = RNG.normal(size=(4, 3)) * 10
        np.testing.assert_allclose(
            np.exp(log_softmax(Tensor(x)).data), softmax(Tensor(x)).data, atol=1e-12)

    def test_huber_branches(self):
        t = Tensor([0.5, -0.5, 2.0, -3.0])
        np.testing.assert_allclose(huber(t, 1.0).data, [0.125, 0.125, 1.5, 2.5])

    def test_atan2_values(self):
        out = atan2(Tensor([0.6, 1.0]), Tensor([0.8, 0.0]))
        np.testing.assert_allclose(out.data, [math.atan2(0.6, 0.8), math.pi / 2])

    def test_detach_blocks_gradient(self):
        store = ParamStore()
        p = store.add("p", np.array([2.0]))
        loss = tsum(mul(p.detach(), p))
        loss.backward()
        # only the live branch contributes: d/dp (c * p) = c = 2
        np.testing.assert_allclose(p.grad, [2.0])

    def test_backward_accumulates_on_leaves(self):
        store = ParamStore()
        p = store.add("p", np.array([3.0]))
        tsum(mul(p, p)).backward()
        tsum(mul(p, p)).backward()
        np.testing.assert_allclose(p.grad, [12.0])
        store.zero_grad()
        assert p.grad is None


class TestGradients:
    def test_add_broadcast(self):
        check_op(lambda s: tsum(mul(s["a"] + s["b"], s["a"])),
                 {"a": RNG.normal(size=(3, 4)), "b": RNG.normal(size=(4,))})

    def test_mul_scalar_and_neg(self):
        check_op(lambda s: tsum(-(2.5 * s["a"]) + s["a"] / 4.0),
                 {"a": RNG.normal(size=(2, 3))})

    def test_relu(self):
        check_op(lambda s: tsum(relu(s["a"])),
                 {"a": RNG.normal(size=(3, 3)) + 0.05})

    def test_exp_log(self):
        check_op(lambda s: tsum(log(exp(s["a"]) + 1.0)),
                 {"a": RNG.normal(size=(4,))})

    def test_pow_const(self):
        check_op(lambda s: tsum(pow_const(s["a"], 2.0)),
                 {"a": RNG.normal(size=(5,))})
        check_op(lambda s: tsum(pow_const(s["a"], 0.25)),
                 {"a": RNG.uniform(0.5, 2.0, size=(5,))})

    def test_clip_value(self):
        check_op(lambda s: tsum(clip_value(s["a"], -0.5, 0.5)),
                 {"a": np.array([-2.0, -0.2, 0.1, 3.0])})

    def test_atan2_grad(self):
        check_op(lambda s: tsum(atan2(s["y"], s["x"])),
                 {"y": RNG.uniform(0.5, 1.5, size=(4,)),
                  "x": RNG.uniform(0.5, 1.5, size=(4,))})

    def test_huber_grad(self):
        check_op(lambda s: tsum(huber(s["a"], 1.0)),
                 {"a": np.array([0.3, -0.6, 2.0, -4.0])})

    def test_matmul_grad(self):
        check_op(lambda s: tsum(matmul(s["a"], s["b"])),
                 {"a": RNG.normal(size=(3, 4)), "b": RNG.normal(size=(4, 2))})

    def test_linear_grad(self):
        w_out = RNG.normal(size=(3, 1))
        check_op(lambda s: tsum(matmul(reshape(linear(s["x"], s["w"], s["b"]), (8, 3)),
                                       Tensor(w_out))),
                 {"x": RNG.normal(size=(2, 4, 2)),
                  "w": RNG.normal(size=(2, 3)),
                  "b": RNG.normal(size=(3,))})

    def test_conv_grad(self):
        weights = RNG.normal(size=(4, 4, 2))
        check_op(lambda s: tsum(mul(conv2d_3x3(s["x"], s["k"], s["b"]), Tensor(weights))),
                 {"x": RNG.normal(size=(4, 4, 3)),
                  "k": RNG.normal(size=(3, 3, 3, 2)),
                  "b": RNG.normal(size=(2,))})

    def test_bilinear_grad(self):
        pts = np.array([[0.5, 0.5], [1.25, 2.75], [-0.25, 1.0], [3.75, 3.75], [2.0, 2.0]])
        weights = RNG.normal(size=(5, 2))
        check_op(lambda s: tsum(mul(bilinear_sample(s["m"], pts), Tensor(weights))),
                 {"m": RNG.normal(size=(4, 4, 2))})

    def test_softmax_grad(self):
        weights = RNG.normal(size=(3, 4))
        check_op(lambda s: tsum(mul(softmax(s["a"]), Tensor(weights))),
                 {"a": RNG.normal(size=(3, 4))})

    def test_log_softmax_grad(self):
        weights = RNG.normal(size=(3, 4))
        check_op(lambda s: tsum(mul(log_softmax(s["a"]), Tensor(weights))),
                 {"a": RNG.normal(size=(3, 4))})

    def test_concat_reshape_grad(self):
        check_op(lambda s: tsum(pow_const(concat([s["a"], reshape(s["b"], (2, 2))], axis=1), 2.0)),
                 {"a": RNG.normal(size=(2, 3)), "b": RNG.normal(size=(4,))})

    def test_take_ops_grad(self):
        idx = np.array([0, 2, 2, 1])
        cols = np.array([1, 0, 2, 1])
        check_op(lambda s: tsum(take_per_row(take_rows(s["t"], idx), cols))
                 + tsum(take_col(s["t"], 0)),
                 {"t": RNG.normal(size=(3, 3))})

    def test_mean_grad(self):
        check_op(lambda s: mean(pow_const(s["a"], 2.0)),
                 {"a": RNG.normal(size=(3, 5))})


class TestGradCheckHarness:
    def test_quadratic_exact(self):
        store = ParamStore()
        store.add("p", RNG.uniform(0.5, 2.0, size=(4, 3)))
        err, per = grad_check(store, lambda: tsum(pow_const(store["p"], 2.0)))
        assert err < 1e-10
        assert set(per) == {"p"}

    def test_constant_objective(self):
        store = ParamStore()
        store.add("p", RNG.normal(size=(3,)))
        err, _ = grad_check(store, lambda: Tensor(1.5))
        assert err < 1e-10

    def test_nondeterministic_objective_detected(self):
        store = ParamStore()
        store.add("p", np.array([1.0]))
        state = {"n": 0}

        def objective():
            state["n"] += 1
            return tsum(store["p"] * float(state["n"]))

        with pytest.raises(NondeterministicObjectiveError):
            grad_check(store, objective)


class TestAdam:
    def test_first_step_is_signed_lr(self):
        store = ParamStore()
        p = store.add("p", np.array([1.0, -2.0, 3.0]))
        p.grad = np.array([0.5, -4.0, 1e-3])
        adam_step(store, lr=0.01)
        delta = p.data - np.array([1.0, -2.0, 3.0])
        np.testing.assert_allclose(delta, -0.01 * np.sign([0.5, -4.0, 1e-3]), rtol=1e-4)

    def test_zero_gradient_fixed_point(self):
        store = ParamStore()
        p = store.add("p", np.array([1.0, 2.0]))
        p.grad = np.zeros(2)
        adam_step(store, lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_missing_gradient_rejected(self):
        store = ParamStore()
        store.add("p", np.array([1.0]))
        with pytest.raises(MissingGradientError):
            adam_step(store, lr=0.1)

    def test_two_steps_match_hand_recurrence(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        store = ParamStore()
        p = store.add("p", np.array([2.0]))

        # hand-unrolled Adam on f(x) = x^2, grad 2x
        x, m, v = 2.0, 0.0, 0.0
        for t in (1, 2):
            g = 2.0 * x
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)

        for _ in range(2):
            store.zero_grad()
            loss = tsum(pow_const(p, 2.0))
            loss.backward()
            adam_step(store, lr=lr, beta1=b1, beta2=b2, eps=eps)
        np.testing.assert_allclose(p.data, [x], atol=1e-12)


class TestCosineSchedule:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(1e-3, 0, 1000) == 1e-3
        assert math.isclose(cosine_lr(1e-3, 500, 1000), 5e-4, abs_tol=1e-18)
        assert math.isclose(cosine_lr(1e-3, 1000, 1000), 0.0, abs_tol=1e-18)

    def test_clamps_past_horizon(self):
        assert cosine_lr(1e-3, 5000, 1000) == cosine_lr(1e-3, 1000, 1000)

    def test_monotone_decreasing(self):
        values = [cosine_lr(1.0, t, 100) for t in range(101)]
        assert all(a >= b for a, b in zip(values, values[1:]))

"""Primitive ops, tape gradients, and the RNG contract."""
import subprocess
import sys
import warnings

import numpy as np
import pytest

from medmamba.errors import ShapeError
from medmamba.numerics import (BnState, Rng, Tape, Tensor, batchnorm1d, conv1d,
                               debug_nonfinite, div, dwconv1d, elementwise,
                               expm1_over_x, gelu, grad_check, layernorm,
                               matmul, mul, silu, softmax, softplus, sum_)
from medmamba.numerics import ops


class TestMatmul:
    def test_identity(self):
        b = np.arange(6, dtype=float).reshape(2, 3)
        out = matmul(Tensor(np.eye(2)), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_hand_product(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_zero_annihilates(self):
        out = matmul(Tensor(np.zeros((3, 4))), Tensor(np.random.rand(4, 2)))
        np.testing.assert_array_equal(out.data, np.zeros((3, 2)))

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_gradient_recorded(self):
        a = Tensor([[1.0, 2.0]])
        b = Tensor([[3.0], [4.0]])
        with Tape() as tape:
            out = sum_(matmul(a, b))
        ga, gb = tape.gradients(out, [a, b])
        np.testing.assert_allclose(ga, [[3.0, 4.0]])
        np.testing.assert_allclose(gb, [[1.0], [2.0]])


class TestConv1d:
    def test_patch_lengths_for_stride_equals_kernel(self):
        x = Tensor(np.random.rand(1, 256))
        w = Tensor(np.random.rand(4, 1, 5))
        assert conv1d(x, w, stride=5).shape == (4, 51)

    def test_pointwise_identity(self):
        x = np.random.rand(3, 10)
        w = np.zeros((3, 3, 1))
        w[np.arange(3), np.arange(3), 0] = 1.0
        out = conv1d(Tensor(x), Tensor(w), stride=1)
        np.testing.assert_allclose(out.data, x)

    def test_hand_convolution_with_padding(self):
        out = conv1d(Tensor([[1.0, 2.0, 3.0]]), Tensor([[[1.0, 1.0, 1.0]]]),
                     stride=1, pad=1)
        np.testing.assert_allclose(out.data, [[3.0, 6.0, 5.0]])

    def test_empty_output_error(self):
        with pytest.raises(ShapeError, match="empty output"):
            conv1d(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 1, 5))))

    @pytest.mark.parametrize("k", [2, 5, 25])
    def test_output_length_exhaustive_stride_equals_kernel(self, k):
        w = Tensor(np.ones((1, 1, k)))
        for length in range(k, 513):
            out = conv1d(Tensor(np.ones((1, length))), w, stride=k)
            assert out.shape == (1, (length - k) // k + 1), length

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(0)
        params = {"x": Tensor(rng.normal(size=(2, 11))),
                  "w": Tensor(rng.normal(size=(3, 2, 4)))}
        cot = rng.normal(size=(3, 5))

        def f(p):
            return sum_(mul(conv1d(p["x"], p["w"], stride=2, pad=1), Tensor(cot)))

        assert grad_check(f, params, tol_rel=1e-6).passed

    def test_dwconv_gradient_matches_fd(self):
        rng = np.random.default_rng(1)
        params = {"x": Tensor(rng.normal(size=(3, 9))),
                  "w": Tensor(rng.normal(size=(3, 5)))}
        cot = rng.normal(size=(3, 9))

        def f(p):
            return sum_(mul(dwconv1d(p["x"], p["w"], pad=2), Tensor(cot)))

        assert grad_check(f, params, tol_rel=1e-6).passed


class TestElementwise:
    def test_softplus_at_zero(self):
        assert softplus(Tensor(0.0)).item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_softplus_overflow_branch(self):
        assert softplus(Tensor(1000.0)).item() == 1000.0

    def test_silu_at_zero(self):
        assert silu(Tensor(0.0)).item() == 0.0

    def test_gelu_saturation(self):
        assert gelu(Tensor(10.0)).item() == pytest.approx(10.0, abs=1e-9)
        assert gelu(Tensor(-10.0)).item() == pytest.approx(0.0, abs=1e-9)

    def test_dispatcher(self):
        assert elementwise("tanh", Tensor(0.5)).item() == pytest.approx(np.tanh(0.5))
        assert elementwise("add", Tensor(1.0), Tensor(2.0)).item() == 3.0
        with pytest.raises(KeyError):
            elementwise("nope", Tensor(1.0))

    def test_div_by_zero_propagates_inf(self):
        out = div(Tensor([1.0, -1.0]), Tensor([0.0, 0.0]))
        assert np.isposinf(out.data[0]) and np.isneginf(out.data[1])

    def test_div_debug_flag_warns(self):
        debug_nonfinite(True)
        try:
            with pytest.warns(RuntimeWarning):
                div(Tensor(1.0), Tensor(0.0))
        finally:
            debug_nonfinite(False)

    def test_expm1_over_x_branch_agreement(self):
        # exact and series formulas evaluated at the crossover point
        x = 1e-4
        exact = np.expm1(x) / x
        series = 1.0 + 0.5 * x
        assert abs(exact - series) < 1e-8
        assert expm1_over_x(Tensor(x / 2)).item() == pytest.approx(1 + x / 4, abs=1e-12)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        out = layernorm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)),
                        Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_unit_variance_row(self):
        out = layernorm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-4)

    def test_beta_offset_on_constant_row(self):
        out = layernorm(Tensor([2.0, 2.0]), Tensor(np.ones(2)),
                        Tensor(np.full(2, 7.0)))
        np.testing.assert_allclose(out.data, 7.0)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            layernorm(Tensor([1.0]), Tensor([1.0]), Tensor([0.0]), eps=0.0)


class TestBatchNorm:
    def test_eval_with_init_stats_is_identity_and_warns(self):
        state = BnState.create(2)
        x = Tensor(np.random.default_rng(0).normal(size=(3, 2, 4)))
        with pytest.warns(RuntimeWarning):
            out = batchnorm1d(x, state, mode="eval")
        np.testing.assert_allclose(out.data, x.data / np.sqrt(1 + 1e-5), atol=1e-12)

    def test_train_on_standardized_batch_is_near_identity(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(8, 3, 16))
        x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)
        state = BnState.create(3)
        out = batchnorm1d(Tensor(x), state, mode="train")
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_population_variance_convention(self):
        state = BnState.create(1)
        x = Tensor(np.array([0.0, 2.0]).reshape(2, 1, 1))
        out = batchnorm1d(x, state, mode="train")
        np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 1.0], atol=1e-5)
        # running estimate uses the unbiased variance: 0.9*1 + 0.1*(1 * 2/1)
        np.testing.assert_allclose(state.running_var.data, [0.9 + 0.1 * 2.0])
        np.testing.assert_allclose(state.running_mean.data, [0.1])
        assert float(state.batches.data) == 1.0

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(2)
        state = BnState.create(2)
        params = {"x": Tensor(rng.normal(size=(3, 2, 5))),
                  "g": state.gamma, "b": state.beta}
        cot = rng.normal(size=(3, 2, 5))

        def f(p):
            return sum_(mul(batchnorm1d(p["x"], state, mode="train"), Tensor(cot)))

        assert grad_check(f, params, tol_rel=1e-6).passed


class TestSoftmax:
    def test_uniform_input(self):
        out = softmax(Tensor(np.zeros(7)))
        np.testing.assert_allclose(out.data, 1 / 7)

    def test_closed_form(self):
        out = softmax(Tensor([0.0, np.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 6))
        a = softmax(Tensor(x)).data
        b = softmax(Tensor(x + 123.456)).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        out = softmax(Tensor(rng.normal(scale=20, size=(50, 9))))
        assert np.all(out.data > 0)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)


class TestGradCheck:
    def test_square_function(self):
        params = {"x": Tensor(3.0)}
        report = grad_check(lambda p: mul(p["x"], p["x"]), params)
        assert report.passed
        with Tape() as tape:
            y = mul(params["x"], params["x"])
        assert tape.gradients(y, [params["x"]])[0] == pytest.approx(6.0)

    def test_broken_gradient_is_named(self):
        def bad_exp(x):
            e = np.exp(x.data)
            out = Tensor(e)
            ops._record(out, (x,), lambda g: (g * (e + 1.0),))  # wrong on purpose
            return out

        params = {"theta": Tensor([0.3, -0.2])}
        report = grad_check(lambda p: sum_(bad_exp(p["theta"])), params)
        assert not report.passed
        assert report.failures == ["theta"]
        assert "theta" in report.summary()

    def test_nonfinite_gradient_is_named(self):
        params = {"w": Tensor([0.0])}
        report = grad_check(lambda p: sum_(div(Tensor([1.0]), p["w"])), params)
        assert not report.passed and "w" in report.failures

    def test_composed_graph_matches_fd(self):
        rng = np.random.default_rng(5)
        params = {"w1": Tensor(rng.normal(size=(4, 3))),
                  "w2": Tensor(rng.normal(size=(2, 3, 3))),
                  "g": Tensor(rng.normal(size=4)),
                  "b": Tensor(rng.normal(size=4))}
        x = Tensor(rng.normal(size=(2, 5, 3)))
        cot = rng.normal(size=(2, 5, 4))

        def f(p):
            h = matmul(x, ops.transpose(p["w2"], (0, 2, 1)))
            h = matmul(ops.tanh(h), ops.transpose(p["w1"]))
            h = layernorm(h, p["g"], p["b"])
            h = softmax(h, axis=-1)
            return sum_(mul(h, Tensor(cot)))

        assert grad_check(f, params, tol_rel=1e-4).passed

    def test_nonparticipating_tensor_gets_zero(self):
        a, b = Tensor([1.0, 2.0]), Tensor([4.0])
        with Tape() as tape:
            out = sum_(mul(a, a))
        gb = tape.gradients(out, [b])[0]
        np.testing.assert_array_equal(gb, [0.0])


class TestRng:
    def test_same_seed_same_stream(self):
        a = Rng(41).split("x").normal((5,))
        b = Rng(41).split("x").normal((5,))
        np.testing.assert_array_equal(a, b)

    def test_split_is_order_independent(self):
        r1 = Rng(7)
        _ = r1.split("a").normal((3,))
        t1 = r1.split("b").normal((3,))
        r2 = Rng(7)
        t2 = r2.split("b").normal((3,))
        np.testing.assert_array_equal(t1, t2)

    def test_cross_process_determinism(self):
        code = ("from medmamba.numerics import Rng;"
                "print(repr(Rng(41).split('proc').normal((4,)).tolist()))")
        outs = {subprocess.run([sys.executable, "-c", code], capture_output=True,
                               text=True, check=True).stdout for _ in range(2)}
        assert len(outs) == 1
        local = repr(Rng(41).split("proc").normal((4,)).tolist()) + "\n"
        assert outs == {local}

    def test_permutation_and_bernoulli_shapes(self):
        rng = Rng(3)
        perm = rng.split("p").permutation(10)
        assert sorted(perm.tolist()) == list(range(10))
        mask = rng.split("m").bernoulli(0.5, (100,))
        assert mask.dtype == bool and 0 < mask.sum() < 100

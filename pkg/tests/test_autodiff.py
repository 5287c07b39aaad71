"""Differentiation engine: primitive gradients, shape rules, parameter sets."""

import numpy as np
import pytest

from vlbidesign import autodiff as ad


def grad_of(fn, x0):
    t = ad.Tensor(np.asarray(x0, dtype=np.float64), requires_grad=True)
    out = fn(t)
    ad.backward(out, [t])
    return out.data, t.grad


class TestBasics:
    def test_square_value_and_gradient(self):
        val, g = grad_of(lambda t: t * t, 3.0)
        assert val == 9.0
        assert g == 6.0

    def test_sigmoid_gradient_at_zero(self):
        _, g = grad_of(ad.sigmoid, 0.0)
        assert g == pytest.approx(0.25, abs=1e-15)

    def test_tanh_chain_rule(self):
        _, g = grad_of(lambda t: ad.tanh(3.0 * t), 0.0)
        assert g == pytest.approx(3.0, abs=1e-15)

    def test_linear_matmul_gradient(self):
        w = ad.Tensor(np.ones((2, 2)), requires_grad=True)
        x = ad.Tensor(np.ones((2, 2)))
        loss = ad.tsum(w @ x)
        ad.backward(loss, [w])
        assert np.array_equal(w.grad, np.full((2, 2), 2.0))

    def test_unreachable_parameter_gets_zero_gradient(self):
        w = ad.Tensor(np.ones(3), requires_grad=True)
        x = ad.Tensor(np.full(3, 2.0), requires_grad=True)
        loss = ad.tsum(x * x)
        ad.backward(loss, [w, x])
        assert np.array_equal(w.grad, np.zeros(3))
        assert np.array_equal(x.grad, np.full(3, 4.0))

    def test_backward_requires_scalar(self):
        t = ad.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ad.AutodiffError):
            ad.backward(t + 1.0, [t])

    def test_gradient_linearity_is_exact(self):
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=5)
        t = ad.Tensor(x0.copy(), requires_grad=True)
        ad.backward(ad.tsum(ad.sin(t)), [t])
        g1 = t.grad.copy()
        t.grad = None
        ad.backward(ad.tsum(t * t), [t])
        g2 = t.grad.copy()
        t.grad = None
        ad.backward(ad.tsum(ad.sin(t)) + ad.tsum(t * t), [t])
        assert np.array_equal(t.grad, g1 + g2)

    def test_repeated_backward_identical(self):
        rng = np.random.default_rng(1)
        t = ad.Tensor(rng.normal(size=(3, 3)), requires_grad=True)

        def run():
            t.grad = None
            ad.backward(ad.tsum(ad.sigmoid(t @ t)), [t])
            return t.grad.copy()

        assert np.array_equal(run(), run())

    def test_shape_mismatch_rejected(self):
        a = ad.Tensor(np.ones((2, 3)))
        b = ad.Tensor(np.ones((4, 5)))
        with pytest.raises(ad.AutodiffError):
            _ = a @ b

    def test_division_by_zero_rejected(self):
        a = ad.Tensor(np.ones(3))
        with pytest.raises(ad.AutodiffError):
            _ = a / ad.Tensor(np.array([1.0, 0.0, 2.0]))

    def test_stable_sigmoid_extremes(self):
        t = ad.Tensor(np.array([-1000.0, 1000.0]), requires_grad=True)
        out = ad.sigmoid(t)
        assert np.array_equal(out.data, [0.0, 1.0])
        ad.backward(ad.tsum(out), [t])
        assert np.all(np.isfinite(t.grad))


class TestFiniteDifferences:
    def test_quadratic_form_near_exact(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(4, 4))
        t = ad.Tensor(rng.normal(size=(4, 1)), requires_grad=True)
        rep = ad.finite_diff_check(
            lambda: ad.tsum(ad.transpose(t) @ (ad.as_tensor(a) @ t)), [t])
        assert rep.max_rel_error < 1e-6

    def test_sigmoid_matmul_composite(self):
        rng = np.random.default_rng(3)
        w = ad.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        x = ad.as_tensor(rng.normal(size=(4, 2)))
        rep = ad.finite_diff_check(lambda: ad.tsum(ad.sigmoid(w @ x)), [w])
        assert rep.max_rel_error < 1e-4

    @pytest.mark.parametrize("name,fn", [
        ("add", lambda a, b: a + b),
        ("sub", lambda a, b: a - b),
        ("mul", lambda a, b: a * b),
        ("div", lambda a, b: a / (b * b + 1.0)),
        ("sigmoid", lambda a, b: ad.sigmoid(a * b)),
        ("tanh", lambda a, b: ad.tanh(a + b)),
        ("relu_shifted", lambda a, b: ad.relu(a + 10.0) * b),
        ("abs_shifted", lambda a, b: ad.absolute(a + 10.0) + b),
        ("sqrt", lambda a, b: ad.sqrt(a * a + b * b + 1.0)),
        ("sin", lambda a, b: ad.sin(a) * ad.cos(b)),
        ("mean", lambda a, b: ad.tmean(a * b)),
    ])
    def test_primitive_gradients_at_random_points(self, name, fn):
        rng = np.random.default_rng(hash(name) % 2 ** 31)
        worst = 0.0
        for _ in range(10):
            a = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            b = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            rep = ad.finite_diff_check(lambda: ad.tsum(fn(a, b)), [a, b])
            worst = max(worst, rep.max_rel_error)
        assert worst < 1e-4

    def test_axis_reductions(self):
        rng = np.random.default_rng(4)
        t = ad.Tensor(rng.normal(size=(3, 4, 5)), requires_grad=True)
        for axis in (0, 1, 2, (0, 2), None):
            rep = ad.finite_diff_check(
                lambda: ad.tsum(ad.sigmoid(ad.tsum(t, axis=axis))), [t])
            assert rep.max_rel_error < 1e-4, axis

    def test_reshape_transpose_concat_slice(self):
        rng = np.random.default_rng(5)
        a = ad.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        b = ad.Tensor(rng.normal(size=(4, 2)), requires_grad=True)

        def prog():
            c = ad.concat([a.reshape(4, 6), b], axis=1)      # (4, 8)
            d = ad.transpose(c)[1:5, :]                      # (4, 4)
            return ad.tsum(ad.tanh(d.reshape(16)))

        rep = ad.finite_diff_check(prog, [a, b])
        assert rep.max_rel_error < 1e-4

    def test_fancy_index_gather_accumulates(self):
        t = ad.Tensor(np.arange(4.0), requires_grad=True)
        idx = np.array([0, 0, 3, 1, 0])
        out = ad.tsum(t[idx])
        ad.backward(out, [t])
        assert np.array_equal(t.grad, [3.0, 1.0, 0.0, 1.0])

    def test_conv_and_resample_gradients(self):
        rng = np.random.default_rng(6)
        x = ad.Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
        w = ad.Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.3, requires_grad=True)

        def prog():
            y = ad.conv2d(x, w)                      # (2, 4, 8, 8)
            y = ad.downsample2(ad.sigmoid(y))        # (2, 4, 4, 4)
            y = ad.upsample2(y)                      # (2, 4, 8, 8)
            return ad.tmean(y * y)

        rep = ad.finite_diff_check(prog, [w, x], max_entries_per_param=40,
                                   rng=np.random.default_rng(0))
        assert rep.max_rel_error < 1e-4

    def test_max_reduction_tie_flagged(self):
        t = ad.Tensor(np.array([[1.0, 1.0, 0.0]]), requires_grad=True)
        rep = ad.finite_diff_check(lambda: ad.tsum(ad.tmax(t, axis=1)), [t])
        assert rep.nonsmooth

    def test_max_reduction_gradient_off_tie(self):
        rng = np.random.default_rng(7)
        t = ad.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        rep = ad.finite_diff_check(lambda: ad.tsum(ad.tmax(t, axis=1)), [t])
        assert not rep.nonsmooth
        assert rep.max_rel_error < 1e-6


class TestParameterSet:
    def test_names_unique(self):
        ps = ad.ParameterSet()
        ps.add("w", np.zeros(3))
        with pytest.raises(ad.AutodiffError):
            ps.add("w", np.zeros(3))

    def test_every_parameter_graded_after_backward(self):
        ps = ad.ParameterSet()
        a = ps.add("a", np.ones(3))
        b = ps.add("b", np.ones(3))
        ad.backward(ad.tsum(a * 2.0), ps.tensors())
        assert np.array_equal(a.grad, np.full(3, 2.0))
        assert np.array_equal(b.grad, np.zeros(3))

    def test_state_round_trip(self):
        rng = np.random.default_rng(8)
        ps = ad.ParameterSet()
        ps.add("w", rng.normal(size=(2, 3)))
        ps.add("b", rng.normal(size=3))
        state = ps.state_arrays()
        ps2 = ad.ParameterSet()
        ps2.add("w", np.zeros((2, 3)))
        ps2.add("b", np.zeros(3))
        ps2.load_state_arrays(state)
        assert np.array_equal(ps2["w"].data, state["w"])
        with pytest.raises(KeyError):
            ps2.load_state_arrays({"nope": np.zeros(1)})

    def test_constants_untouched_by_backward(self):
        c = ad.Tensor(np.ones(3))
        t = ad.Tensor(np.ones(3), requires_grad=True)
        ad.backward(ad.tsum(c * t), [t])
        assert c.grad is None

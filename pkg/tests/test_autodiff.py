import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conceptsurv import autodiff as ad
from conceptsurv.autodiff import ParameterSet, ShapeError, Tensor, forward_backward, gradient_check

N_POINTS = 100


def linear_functional(fn, shapes, seed):
    """Program ``sum(c * fn(*params))`` with fixed random ``c``."""
    rng = np.random.default_rng(seed)
    params = ParameterSet({f"x{i}": rng.normal(size=s) for i, s in enumerate(shapes)})
    out_shape = fn(*[Tensor(params[f"x{i}"]) for i in range(len(shapes))]).shape
    c = rng.normal(size=out_shape)

    def program(P):
        return ad.tsum(fn(*[P[f"x{i}"] for i in range(len(shapes))]) * c)

    return program, params


OPS = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 1), (3, 4)]),
    "mul": (lambda a, b: a * b, [(2, 3), (2, 3)]),
    "div": (lambda a, b: a / (ad.exp(b) + 0.5), [(2, 3), (3,)]),
    "neg": (lambda a: -a, [(5,)]),
    "power": (lambda a: ad.power(ad.exp(a), 1.5), [(4,)]),
    "relu": (ad.relu, [(3, 5)]),
    "sigmoid": (ad.sigmoid, [(3, 5)]),
    "exp": (ad.exp, [(6,)]),
    "log": (lambda a: ad.log(ad.exp(a) + 0.1), [(6,)]),
    "clamp_min": (lambda a: ad.clamp_min(a, 0.1), [(3, 5)]),
    "softmax": (lambda a: ad.softmax(a, axis=1), [(3, 5)]),
    "log_softmax": (lambda a: ad.log_softmax(a, axis=0), [(4, 3)]),
    "sum_axis": (lambda a: ad.tsum(a, axis=1, keepdims=True), [(3, 4)]),
    "mean": (lambda a: ad.mean(a, axis=0), [(3, 4)]),
    "reshape": (lambda a: ad.reshape(a, (4, 3)), [(2, 6)]),
    "transpose": (lambda a: ad.transpose(a, (1, 0, 2)), [(2, 3, 2)]),
    "take": (lambda a: ad.take(a, ([0, 2, 2], [1, 0, 1])), [(3, 2)]),
    "getitem": (lambda a: a[:, 1:3], [(3, 4)]),
    "concatenate": (lambda a, b: ad.concatenate([a, b], axis=1), [(2, 3), (2, 2)]),
    "cumsum": (lambda a: ad.cumsum(a, axis=1), [(3, 5)]),
    "matmul": (ad.matmul, [(3, 4), (4, 2)]),
    "matvec": (ad.matmul, [(3, 4), (4,)]),
    "affine": (ad.affine, [(3, 4), (4, 2), (2,)]),
    "conv2d": (lambda x, w, b: ad.conv2d(x, w, b), [(2, 5, 5, 2), (3, 3, 2, 3), (3,)]),
    "conv2d_stride": (lambda x, w: ad.conv2d(x, w, stride=2), [(1, 7, 7, 1), (3, 3, 1, 2)]),
    "maxpool2d": (lambda x: ad.maxpool2d(x, 2), [(2, 4, 4, 3)]),
    "maxpool2d_crop": (lambda x: ad.maxpool2d(x, 2), [(1, 5, 5, 1)]),
    "sq_distance": (lambda a, b: ad.sq_distance(a, b), [(3, 4), (5, 4)]),
    "sq_distance_scaled": (lambda a, b, s: ad.sq_distance(a, b, ad.exp(s)), [(3, 4), (5, 4), (4,)]),
}


class TestOpGradients:
    @pytest.mark.parametrize("name", sorted(OPS))
    def test_random_points(self, name):
        fn, shapes = OPS[name]
        worst = 0.0
        for seed in range(N_POINTS):
            program, params = linear_functional(fn, shapes, seed)
            res = gradient_check(program, params)
            worst = max(worst, res.max_rel_error)
        assert worst < 1e-4, f"{name}: {worst}"


class TestForwardBackward:
    def test_square(self):
        params = ParameterSet({"x": np.array(3.0)})
        (out,), grads = forward_backward(lambda P: P["x"] * P["x"], params)
        assert out == 9.0
        assert grads["x"] == 6.0

    def test_constant_program(self):
        params = ParameterSet({"x": np.ones(3), "y": np.ones((2, 2))})
        _, grads = forward_backward(lambda P: Tensor(4.0), params)
        assert_array_equal(grads["x"], 0)
        assert_array_equal(grads["y"], 0)

    def test_frozen_parameters_get_no_gradient(self):
        params = ParameterSet({"x": np.ones(3), "y": np.ones(3)}, frozen=["y"])
        _, grads = forward_backward(lambda P: ad.tsum(P["x"] * P["y"]), params)
        assert set(grads) == {"x"}

    def test_non_scalar_loss(self):
        params = ParameterSet({"x": np.ones(3)})
        with pytest.raises(ShapeError, match="scalar"):
            forward_backward(lambda P: P["x"] * 2, params)

    def test_inputs_passed(self):
        params = ParameterSet({"w": np.array([1.0, 2.0])})
        (out,), grads = forward_backward(lambda P, x: ad.tsum(P["w"] * x), params, (np.array([3.0, 4.0]),))
        assert out == 11.0
        assert_array_equal(grads["w"], [3.0, 4.0])

    def test_multiple_outputs(self):
        params = ParameterSet({"x": np.array(2.0)})
        outs, grads = forward_backward(lambda P: (P["x"] * 3, P["x"] * P["x"]), params, loss_index=1)
        assert outs == [6.0, 4.0]
        assert grads["x"] == 4.0

    def test_softmax_cross_entropy_composite(self):
        rng = np.random.default_rng(0)
        params = ParameterSet({"w": rng.normal(size=(4, 3)), "b": rng.normal(size=3)})
        x = rng.normal(size=(6, 4))
        y = rng.integers(0, 3, 6)

        def program(P):
            logp = ad.log_softmax(ad.affine(x, P["w"], P["b"]), axis=1)
            return -ad.mean(logp[np.arange(6), y])

        assert ad.finite_difference_check(program, params, step=1e-5) < 1e-4

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        params = ParameterSet({"w": rng.normal(size=(3, 3, 1, 2))})
        x = rng.normal(size=(2, 6, 6, 1))
        prog = lambda P: ad.tsum(ad.maxpool2d(ad.relu(ad.conv2d(x, P["w"])), 2))  # noqa: E731
        a = forward_backward(prog, params)
        b = forward_backward(prog, params)
        assert a[0][0].tobytes() == b[0][0].tobytes()
        assert a[1]["w"].tobytes() == b[1]["w"].tobytes()

    def test_batch_linearity(self):
        rng = np.random.default_rng(2)
        params = ParameterSet({"w": rng.normal(size=(4, 2))})
        x = rng.normal(size=(5, 4))

        def per_sample(i):
            return lambda P: ad.tsum(ad.sigmoid(ad.matmul(x[i : i + 1], P["w"])))

        total = forward_backward(lambda P: ad.tsum(ad.sigmoid(ad.matmul(x, P["w"]))), params)[1]["w"]
        summed = sum(forward_backward(per_sample(i), params)[1]["w"] for i in range(5))
        assert np.max(np.abs(total - summed)) <= 1e-12


class TestGradientCheck:
    def test_square_precise(self):
        params = ParameterSet({"x": np.array(3.0)})
        assert ad.finite_difference_check(lambda P: P["x"] * P["x"], params, step=1e-5) < 1e-8

    def test_relu_kink_excluded(self):
        params = ParameterSet({"x": np.array([0.0, 1.5, -2.0])})
        res = gradient_check(lambda P: ad.tsum(ad.relu(P["x"])), params)
        assert res.n_kinks == 1
        assert res.n_unresolved == 1  # the dead unit leaves the loss bitwise unchanged
        assert res.n_checked == 1
        assert res.max_rel_error < 1e-8

    def test_flat_loss_with_wrong_gradient_is_caught(self):
        def phantom(a):
            a = ad.tensor(a)
            return ad._node(np.zeros(()), (a,), lambda g: (g * np.ones_like(a.data),), "phantom")

        res = gradient_check(lambda P: phantom(P["x"]) + 1.0, ParameterSet({"x": np.ones(3)}))
        assert res.n_unresolved == 0
        assert res.max_rel_error == 1.0

    def test_roundoff_only_coordinate_unresolved(self):
        # a translation leaves the loss unchanged up to rounding; the analytic gradient is exactly 0
        x = np.random.default_rng(0).normal(size=50)
        params = ParameterSet({"s": np.array(0.3)})
        res = gradient_check(lambda P: ad.tsum((x + P["s"] - ad.tsum(x + P["s"]) * (1 / 50)) ** 2), params, step=1e-4)
        assert res.n_checked + res.n_unresolved + res.n_kinks == 1
        assert res.max_rel_error < 1e-4

    def test_relu_subgradient_zero(self):
        params = ParameterSet({"x": np.array([0.0])})
        _, g = forward_backward(lambda P: ad.tsum(ad.relu(P["x"])), params)
        assert g["x"][0] == 0.0

    def test_detects_wrong_gradient(self):
        def bad_square(a):
            a = ad.tensor(a)
            return ad._node(a.data**2, (a,), lambda g: (g * a.data,), "bad_square")

        params = ParameterSet({"x": np.array([1.0, 2.0])})
        assert ad.finite_difference_check(lambda P: ad.tsum(bad_square(P["x"])), params) > 0.4

    def test_max_coords(self):
        params = ParameterSet({"x": np.ones(50)})
        res = gradient_check(lambda P: ad.tsum(P["x"] * P["x"]), params, max_coords=7)
        assert res.n_checked == 7

    def test_bad_step(self):
        with pytest.raises(ValueError):
            gradient_check(lambda P: ad.tsum(P["x"]), ParameterSet({"x": np.ones(2)}), step=0.0)


class TestShapeErrors:
    @pytest.mark.parametrize(
        "fn,op",
        [
            (lambda: ad.matmul(np.ones((2, 3)), np.ones((4, 2))), "matmul"),
            (lambda: ad.add(np.ones((2, 3)), np.ones((4,))), "add"),
            (lambda: ad.conv2d(np.ones((1, 5, 5, 2)), np.ones((3, 3, 1, 4))), "conv2d"),
            (lambda: ad.conv2d(np.ones((5, 5, 2)), np.ones((3, 3, 2, 4))), "conv2d"),
            (lambda: ad.sq_distance(np.ones((2, 3)), np.ones((2, 4))), "sq_distance"),
            (lambda: ad.concatenate([np.ones((2, 3)), np.ones((3, 2))], axis=0), "concatenate"),
            (lambda: ad.maxpool2d(np.ones((4, 4)), 2), "maxpool2d"),
        ],
    )
    def test_error_names_op(self, fn, op):
        with pytest.raises(ShapeError, match=op):
            fn()


class TestOpValues:
    def test_conv_matches_direct(self):
        rng = np.random.default_rng(3)
        x, w, b = rng.normal(size=(2, 6, 5, 3)), rng.normal(size=(3, 2, 3, 4)), rng.normal(size=4)
        out = ad.conv2d(x, w, b, stride=2).data
        ref = np.zeros((2, 2, 2, 4))
        for n in range(2):
            for i in range(2):
                for j in range(2):
                    patch = x[n, 2 * i : 2 * i + 3, 2 * j : 2 * j + 2, :]
                    ref[n, i, j] = np.tensordot(patch, w, axes=3) + b
        assert_allclose(out, ref, atol=1e-12)

    def test_maxpool_values(self):
        x = np.arange(16.0).reshape(1, 4, 4, 1)
        assert_array_equal(ad.maxpool2d(x, 2).data[0, :, :, 0], [[5, 7], [13, 15]])

    def test_maxpool_ties_first_max(self):
        params = ParameterSet({"x": np.ones((1, 2, 2, 1))})
        _, g = forward_backward(lambda P: ad.tsum(ad.maxpool2d(P["x"], 2)), params)
        assert_array_equal(g["x"].ravel(), [1, 0, 0, 0])

    def test_sigmoid_stable(self):
        out = ad.sigmoid(np.array([-800.0, 0.0, 800.0])).data
        assert_allclose(out, [0.0, 0.5, 1.0])

    def test_softmax_stable(self):
        out = ad.softmax(np.array([[1000.0, 1000.0]]), axis=1).data
        assert_allclose(out, [[0.5, 0.5]])

    def test_sq_distance(self):
        a, b = np.array([[0.0, 0.0]]), np.array([[3.0, 4.0], [1.0, 0.0]])
        assert_allclose(ad.sq_distance(a, b).data, [[25.0, 1.0]])
        assert_allclose(ad.sq_distance(a, b, np.array([1.0, 0.5])).data, [[17.0, 1.0]])


class TestParameterSet:
    def test_duplicate_name(self):
        p = ParameterSet({"a": np.ones(2)})
        with pytest.raises(KeyError):
            p.add("a", np.zeros(2))

    def test_copy_is_deep(self):
        p = ParameterSet({"a": np.ones(2)})
        q = p.copy()
        q.arrays["a"][0] = 5
        assert p["a"][0] == 1

import numpy as np
import pytest

from selfkp import autodiff as ad


def _param(rng, shape, name=None):
    return ad.Tensor(rng.normal(size=shape), requires_grad=True,
                     dtype=np.float64, name=name)


def check(build, params, tol=1e-4):
    report = ad.finite_diff_check(lambda _: build(), params, tolerance=tol)
    assert report.passed, f"max rel err {report.max_rel_err}"
    return report


class TestElementwise:
    def test_add_sub_mul_values(self):
        a = ad.Tensor([1.0, 2.0])
        b = ad.Tensor([3.0, 5.0])
        assert np.allclose(ad.add(a, b).data, [4, 7])
        assert np.allclose(ad.sub(a, b).data, [-2, -3])
        assert np.allclose(ad.mul(a, b).data, [3, 10])

    def test_shape_mismatch_rejected(self):
        a = ad.Tensor(np.zeros(3))
        b = ad.Tensor(np.zeros(4))
        with pytest.raises(ad.ShapeMismatch):
            ad.add(a, b)
        with pytest.raises(ad.ShapeMismatch):
            ad.mul(a, b)

    def test_affine_value(self):
        x = ad.Tensor([1.0, -2.0])
        assert np.allclose(ad.affine(x, 2.0, 1.0).data, [3, -3])

    def test_relu_value(self):
        x = ad.Tensor([-1.0, 0.0, 2.0])
        assert np.allclose(ad.relu(x).data, [0, 0, 2])

    def test_gradients(self):
        rng = np.random.default_rng(0)
        x = _param(rng, (3, 4))
        y = _param(rng, (3, 4))
        check(lambda: ad.reduce_sum(ad.mul(ad.add(x, y), ad.sub(x, y))), [x, y])
        check(lambda: ad.reduce_sum(ad.exp(ad.affine(x, 0.3, 0.1))), [x])
        check(lambda: ad.reduce_sum(ad.log(ad.exp(x), eps=1e-9)), [x])
        # relu kink avoided: values bounded away from 0
        z = ad.Tensor(rng.normal(size=(3, 4)) + 3.0, requires_grad=True,
                      dtype=np.float64)
        check(lambda: ad.reduce_sum(ad.relu(z)), [z])


class TestReductionsAndShaping:
    def test_reduce_values(self):
        x = ad.Tensor(np.arange(6.0).reshape(2, 3))
        assert ad.reduce_sum(x).item() == 15.0
        assert ad.reduce_mean(x).item() == 2.5
        assert np.allclose(ad.reduce_sum(x, axis=0).data, [3, 5, 7])

    def test_reshape_roundtrip(self):
        rng = np.random.default_rng(1)
        x = _param(rng, (2, 6))
        y = ad.reshape(x, (3, 4))
        assert y.data.shape == (3, 4)
        check(lambda: ad.reduce_sum(ad.mul(ad.reshape(x, (3, 4)),
                                           ad.reshape(x, (3, 4)))), [x])

    def test_reshape_size_mismatch(self):
        with pytest.raises(ad.ShapeMismatch):
            ad.reshape(ad.Tensor(np.zeros((2, 3))), (4, 2))

    def test_linear_and_dot_gradients(self):
        rng = np.random.default_rng(2)
        x = _param(rng, (5, 3))
        w = _param(rng, (3, 4))
        b = _param(rng, (4,))
        check(lambda: ad.reduce_sum(ad.mul(ad.linear(x, w, b),
                                           ad.linear(x, w, b))), [x, w, b])
        a = _param(rng, (2, 3, 4))
        c = _param(rng, (2, 5, 4))
        check(lambda: ad.reduce_sum(ad.dot(a, c)), [a, c])

    def test_dot_value(self):
        a = ad.Tensor(np.eye(3)[None])
        b = ad.Tensor(np.eye(3)[None] * 2.0)
        sim = ad.dot(a, b)
        assert np.allclose(sim.data[0], np.eye(3) * 2.0)


class TestNormalizers:
    def test_channel_softmax_sums_to_one(self):
        rng = np.random.default_rng(3)
        x = ad.Tensor(rng.normal(size=(2, 3, 5)))
        p = ad.channel_softmax(x)
        assert np.allclose(p.data.sum(axis=-1), 1.0)

    def test_softmax_gradient(self):
        rng = np.random.default_rng(4)
        x = _param(rng, (2, 5))
        t = rng.normal(size=(2, 5))
        check(lambda: ad.reduce_sum(ad.mul(ad.channel_softmax(x),
                                           ad.Tensor(t, dtype=np.float64))), [x])

    def test_l2_normalize_unit_norm(self):
        rng = np.random.default_rng(5)
        x = ad.Tensor(rng.normal(size=(4, 7)))
        n = ad.l2_normalize(x)
        assert np.allclose((n.data ** 2).sum(axis=-1), 1.0, atol=1e-6)

    def test_l2_normalize_gradient(self):
        rng = np.random.default_rng(6)
        x = _param(rng, (3, 6))
        t = rng.normal(size=(3, 6))
        check(lambda: ad.reduce_sum(ad.mul(ad.l2_normalize(x),
                                           ad.Tensor(t, dtype=np.float64))), [x])


class TestConvPoolBn:
    def test_conv2d_gradient(self):
        rng = np.random.default_rng(7)
        x = _param(rng, (2, 6, 8, 3))
        w = _param(rng, (3, 3, 3, 4))
        b = _param(rng, (4,))
        check(lambda: ad.reduce_sum(ad.mul(ad.conv2d(x, w, b),
                                           ad.conv2d(x, w, b))), [x, w, b])

    def test_conv2d_identity_kernel(self):
        x = ad.Tensor(np.random.default_rng(8).normal(size=(1, 5, 5, 1)))
        w = np.zeros((3, 3, 1, 1))
        w[1, 1, 0, 0] = 1.0
        y = ad.conv2d(x, ad.Tensor(w))
        assert np.allclose(y.data, x.data, atol=1e-6)

    def test_maxpool_halves_and_grad(self):
        rng = np.random.default_rng(9)
        x = _param(rng, (1, 4, 6, 2))
        y = ad.maxpool2(x)
        assert y.data.shape == (1, 2, 3, 2)
        m = ad.Tensor(rng.normal(size=(1, 2, 3, 2)), dtype=np.float64)
        check(lambda: ad.reduce_sum(ad.mul(ad.maxpool2(x), m)), [x])

    def test_batchnorm_train_normalizes(self):
        rng = np.random.default_rng(10)
        x = ad.Tensor(rng.normal(2.0, 3.0, size=(4, 5, 6, 3)))
        gamma = ad.Tensor(np.ones(3), requires_grad=True)
        beta = ad.Tensor(np.zeros(3), requires_grad=True)
        state = ad.BatchNormState.create(3)
        y = ad.batchnorm(x, gamma, beta, state, mode="train")
        flat = y.data.reshape(-1, 3)
        assert np.allclose(flat.mean(axis=0), 0.0, atol=1e-5)
        assert np.allclose(flat.std(axis=0), 1.0, atol=1e-3)

    def test_batchnorm_eval_uses_running_stats(self):
        rng = np.random.default_rng(11)
        gamma = ad.Tensor(np.ones(2, dtype=np.float32))
        beta = ad.Tensor(np.zeros(2, dtype=np.float32))
        state = ad.BatchNormState.create(2)
        for _ in range(50):
            x = ad.Tensor(rng.normal(1.0, 2.0, size=(8, 4, 4, 2)).astype(np.float32))
            ad.batchnorm(x, gamma, beta, state, mode="train")
        x = ad.Tensor(np.full((1, 2, 2, 2), 1.0, dtype=np.float32))
        y = ad.batchnorm(x, gamma, beta, state, mode="eval")
        # input at the running mean maps near zero
        assert np.all(np.abs(y.data) < 0.5)

    def test_batchnorm_gradient(self):
        rng = np.random.default_rng(12)
        x = _param(rng, (3, 4, 4, 2))
        gamma = _param(rng, (2,))
        beta = _param(rng, (2,))
        state = ad.BatchNormState.create(2, dtype=np.float64)
        m = ad.Tensor(rng.normal(size=(3, 4, 4, 2)), dtype=np.float64)

        def f():
            st = ad.BatchNormState.create(2, dtype=np.float64)
            return ad.reduce_sum(ad.mul(ad.batchnorm(x, gamma, beta, st), m))

        check(f, [x, gamma, beta])


class TestEngine:
    def test_backward_requires_scalar(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        y = ad.affine(x, 2.0)
        with pytest.raises(ValueError):
            ad.backward(y)

    def test_multi_consumer_sums_contributions(self):
        x = ad.Tensor(np.asarray(3.0), requires_grad=True)
        y = ad.mul(x, x)                         # dy/dx = 2x = 6
        ad.backward(y)
        assert np.allclose(x.grad, 6.0)

    def test_grad_accumulates_across_backwards(self):
        x = ad.Tensor(np.asarray(1.0), requires_grad=True)
        ad.backward(ad.affine(x, 2.0))
        ad.backward(ad.affine(x, 3.0))
        assert np.allclose(x.grad, 5.0)

    def test_graph_freed_by_default(self):
        x = ad.Tensor(np.asarray(1.0), requires_grad=True)
        y = ad.exp(x)
        ad.backward(y)
        assert y.node is None

    def test_multi_root_backward_with_retained_graph(self):
        x = ad.Tensor(np.asarray(2.0), requires_grad=True)
        shared = ad.mul(x, x)
        r1 = ad.affine(shared, 1.0)
        r2 = ad.affine(shared, 3.0)
        ad.backward(r1, free=False)
        g1 = x.grad.copy()
        x.zero_grad()
        ad.backward(r2)
        assert np.allclose(g1, 4.0)
        assert np.allclose(x.grad, 12.0)

    def test_forward_primitive_dispatch(self):
        a = ad.Tensor([1.0, 2.0])
        b = ad.Tensor([3.0, 4.0])
        out = ad.forward_primitive("add", [a, b])
        assert np.allclose(out.data, [4, 6])
        with pytest.raises(ad.UnknownPrimitive):
            ad.forward_primitive("does-not-exist", [a])

    def test_finite_diff_reports_failure(self):
        x = ad.Tensor(np.asarray(1.0), requires_grad=True, dtype=np.float64)

        def wrong():
            y = ad.exp(x)
            y.node.backward = lambda g: [np.zeros_like(g)]  # sabotage
            return y

        report = ad.finite_diff_check(lambda _: wrong(), [x])
        assert not report.passed

    def test_float32_default_float64_preserved(self):
        assert ad.Tensor([1, 2]).data.dtype == np.float32
        assert ad.Tensor(np.zeros(2, dtype=np.float64)).data.dtype == np.float64

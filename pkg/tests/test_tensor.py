"""Tensor core: autodiff, convolution, batch norm, SVD, optimizers and kernel backends."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrnas import _kernels
from lrnas.errors import ContractError, DimensionError, NumericError
from lrnas.tensor import (
    SGD,
    Adam,
    BatchNormState,
    ReduceOnPlateau,
    Tensor,
    avg_pool2d,
    batch_norm,
    concat,
    conv2d,
    cross_entropy,
    gumbel_softmax,
    kl_div,
    log_softmax,
    max_pool2d,
    mse_loss,
    no_grad,
    softmax,
    stack,
    svd,
)
from oracles import gram_singular_values, naive_conv2d, numeric_grad, rel_error

F64 = np.float64


def t64(a, grad=True):
    return Tensor(np.array(a, dtype=F64), requires_grad=grad, dtype=F64)


def check_grad(build, arrays, tol=1e-3):
    """Compare autodiff gradients of scalar ``build(*tensors)`` against central differences."""
    tensors = [t64(a) for a in arrays]
    build(*tensors).backward()
    analytic = [t.grad for t in tensors]

    def value():
        with no_grad():
            return build(*[Tensor(a, dtype=F64) for a in arrays]).item()

    numeric = numeric_grad(value, arrays)
    for a, n in zip(analytic, numeric):
        assert rel_error(a, n) < tol


def random_conv_case(rng):
    groups = int(rng.choice([1, 2, 4]))
    c = groups * int(rng.integers(1, 3))
    f = groups * int(rng.integers(1, 3))
    kh, kw = int(rng.choice([1, 2, 3])), int(rng.choice([1, 3]))
    sh, sw = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    ph, pw = int(rng.integers(0, 2)), int(rng.integers(0, 2))
    h, w = int(rng.integers(kh, 7)), int(rng.integers(kw, 7))
    x = rng.standard_normal((2, c, h, w))
    wt = rng.standard_normal((f, c // groups, kh, kw))
    b = rng.standard_normal(f) if rng.random() < 0.5 else None
    return x, wt, b, (sh, sw), (ph, pw), groups


class TestAutodiffBasics:
    def test_broadcast_add_mul_accumulates(self):
        a = t64(np.ones((2, 3)))
        b = t64(np.arange(3.0))
        ((a * b + b) * 2.0).sum().backward()
        np.testing.assert_allclose(a.grad, 2 * np.broadcast_to(np.arange(3.0), (2, 3)))
        np.testing.assert_allclose(b.grad, 2 * 2 * (1 + 1) * np.ones(3))  # two rows, (a + 1) each

    def test_zero_d_indexing_keeps_scalar_shape(self):
        w = t64(np.arange(4.0))
        assert w[1].shape == ()
        (w[1] * 3.0 + w[3]).backward()
        np.testing.assert_allclose(w.grad, [0, 3, 0, 1])

    def test_reused_node_sums_both_paths(self):
        x = t64(2.0)
        y = x * x
        (y + y).backward()
        assert x.grad == pytest.approx(8.0)

    def test_no_grad_records_nothing(self):
        x = t64(np.ones(3))
        with no_grad():
            y = (x * 2).sum()
        assert not y.requires_grad

    def test_item_rejects_non_scalar(self):
        with pytest.raises(ContractError):
            Tensor(np.ones(2)).item()

    @pytest.mark.parametrize(
        "build",
        [
            lambda a, b: (a @ b).sum(),
            lambda a, b: ((a - b.T) ** 2).mean(),
            lambda a, b: (a / (b.T * b.T + 1.0)).sum(),
            lambda a, b: (a.exp() + (a * a + 1.0).log()).sum() + b.abs().sum(),
            lambda a, b: (a * a + 0.5).sqrt().var(axis=0).sum() + b.transpose(1, 0).reshape(-1)[2],
            lambda a, b: concat([a, b.T], axis=1).relu().sum() + stack([a, a]).mean(),
        ],
    )
    def test_elementary_ops_match_finite_differences(self, build):
        rng = np.random.default_rng(1)
        check_grad(build, [rng.standard_normal((3, 4)), rng.standard_normal((4, 3))], tol=1e-6)


class TestConv2d:
    def test_matches_direct_loop_oracle_on_50_geometries(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            x, w, b, stride, pad, groups = random_conv_case(rng)
            got = conv2d(t64(x, False), t64(w, False), None if b is None else t64(b, False), stride, pad, groups)
            ref, _ = naive_conv2d(x, w, b, stride, pad, groups)
            np.testing.assert_allclose(got.data, ref, rtol=1e-10, atol=1e-10)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        for _ in range(6):
            x, w, b, stride, pad, groups = random_conv_case(rng)
            arrays = [x, w] + ([] if b is None else [b])
            proj = rng.standard_normal(naive_conv2d(x, w, b, stride, pad, groups)[0].shape)

            def build(*ts):
                out = conv2d(ts[0], ts[1], ts[2] if len(ts) > 2 else None, stride, pad, groups)
                return (out * Tensor(proj, dtype=F64)).sum()

            check_grad(build, arrays)

    def test_float32_default_dtype(self):
        out = conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 2, 3, 3))), padding=1)
        assert out.dtype == np.float32
        assert out.shape == (1, 3, 4, 4)

    @pytest.mark.parametrize(
        "xshape,wshape,groups",
        [((1, 3, 5, 5), (4, 3, 3, 3), 2), ((1, 4, 5, 5), (4, 3, 3, 3), 1), ((1, 4, 2, 2), (4, 4, 3, 3), 1)],
    )
    def test_shape_errors(self, xshape, wshape, groups):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.zeros(xshape)), Tensor(np.zeros(wshape)), groups=groups)


class TestBatchNorm:
    def test_train_mode_statistics_and_running_update(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((8, 3, 4, 4)).astype(np.float32) * 2 + 1
        st_ = BatchNormState(3, momentum=0.1)
        out = batch_norm(Tensor(x), st_, training=True)
        mean, var = x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))
        np.testing.assert_allclose(st_.batch_mean, mean, rtol=1e-6)
        np.testing.assert_allclose(st_.batch_std, np.sqrt(var), rtol=1e-6)
        np.testing.assert_allclose(st_.running_mean, 0.1 * mean, rtol=1e-5)
        np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * var, rtol=1e-5)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-5)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), var / (var + 1e-5), rtol=1e-4)

    def test_zero_momentum_freezes_buffers(self):
        st_ = BatchNormState(2)
        batch_norm(Tensor(np.random.default_rng(0).standard_normal((4, 2, 3, 3))), st_, training=True, momentum=0.0)
        np.testing.assert_array_equal(st_.running_mean, 0)
        np.testing.assert_array_equal(st_.running_var, 1)

    def test_eval_mode_uses_running_buffers(self):
        st_ = BatchNormState(2)
        st_.running_mean[:] = [1.0, -1.0]
        st_.running_var[:] = [4.0, 0.25]
        out = batch_norm(Tensor(np.ones((1, 2, 1, 1))), st_, training=False)
        np.testing.assert_allclose(out.data.ravel(), [0.0, 2.0 / np.sqrt(0.25 + 1e-5)], rtol=1e-5)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, training):
        rng = np.random.default_rng(4)
        st_ = BatchNormState(3, dtype=F64)
        st_.running_mean[:] = rng.standard_normal(3)
        st_.running_var[:] = rng.uniform(0.5, 2, 3)
        x = rng.standard_normal((4, 3, 2, 2))
        gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
        proj = rng.standard_normal(x.shape)

        def build(xt, g, b):
            st_.gamma, st_.beta = g, b
            return (batch_norm(xt, st_, training=training, momentum=0.0) * Tensor(proj, dtype=F64)).sum()

        check_grad(build, [x, gamma, beta])

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            batch_norm(Tensor(np.zeros((1, 3, 2, 2))), BatchNormState(2))


class TestPoolingAndLosses:
    def test_pools_against_numpy(self):
        x = np.arange(32, dtype=F64).reshape(1, 2, 4, 4)
        np.testing.assert_allclose(avg_pool2d(t64(x, False), 2).data, x.reshape(1, 2, 2, 2, 2, 2).mean(axis=(3, 5)))
        np.testing.assert_allclose(max_pool2d(t64(x, False), 2).data, x.reshape(1, 2, 2, 2, 2, 2).max(axis=(3, 5)))

    def test_pool_and_loss_gradients(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 4, 4))
        check_grad(lambda t: (avg_pool2d(t, 2) * avg_pool2d(t, 2)).sum() + max_pool2d(t, 2).sum(), [x])
        logits = rng.standard_normal((5, 4))
        labels = rng.integers(0, 4, 5)
        check_grad(lambda t: cross_entropy(t, labels), [logits])
        check_grad(lambda a, b: mse_loss(a, b), [logits, rng.standard_normal((5, 4))])

    def test_cross_entropy_value(self):
        logits = np.array([[2.0, 0.0, -1.0], [0.0, 0.0, 0.0]])
        expected = -np.mean([logits[0, 0] - np.log(np.exp(logits[0]).sum()), -np.log(3.0)])
        assert cross_entropy(t64(logits, False), np.array([0, 2])).item() == pytest.approx(expected)

    def test_softmax_rows_sum_to_one_and_log_consistent(self):
        x = t64(np.random.default_rng(6).standard_normal((4, 7)) * 30, False)
        np.testing.assert_allclose(softmax(x).data.sum(axis=1), 1.0)
        np.testing.assert_allclose(np.exp(log_softmax(x).data), softmax(x).data, atol=1e-12)

    def test_kl_div_is_teacher_to_student(self):
        t = np.array([[1.0, 0.0, -1.0]])
        s = np.array([[0.0, 0.5, 0.2]])
        p = np.exp(t / 2) / np.exp(t / 2).sum()
        q = np.exp(s / 2) / np.exp(s / 2).sum()
        assert kl_div(t64(t, False), t64(s, False), 2.0).item() == pytest.approx(float((p * np.log(p / q)).sum()))
        assert kl_div(t64(t, False), t64(t, False), 2.0).item() == pytest.approx(0.0, abs=1e-12)


class TestGumbelSoftmax:
    def test_argmax_frequency_follows_softmax(self):
        rng = np.random.default_rng(7)
        theta = np.array([0.5, -0.2, 1.1, 0.0, -1.0])
        n = 100_000
        w = gumbel_softmax(Tensor(np.tile(theta, (n, 1)), dtype=F64), 0.7, rng)
        freq = np.bincount(w.data.argmax(axis=1), minlength=5) / n
        p = np.exp(theta) / np.exp(theta).sum()
        assert np.max(np.abs(freq - p)) < 0.01

    def test_gradient_with_fixed_noise(self):
        theta = np.random.default_rng(8).standard_normal(6)
        proj = np.arange(6.0)
        check_grad(lambda t: (gumbel_softmax(t, 0.5, np.random.default_rng(9)) * Tensor(proj, dtype=F64)).sum(), [theta])

    def test_rejects_nonpositive_temperature(self):
        with pytest.raises(ValueError):
            gumbel_softmax(Tensor(np.zeros(3)), 0.0, np.random.default_rng(0))


class TestSvd:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 10_000))
    def test_matches_gram_oracle_and_reconstructs(self, rows, cols, seed):
        a = np.random.default_rng(seed).standard_normal((rows, cols))
        res = svd(a, dtype=F64)
        k = min(rows, cols)
        assert res.u.shape == (rows, k) and res.v.shape == (k, cols)
        np.testing.assert_allclose(res.s, gram_singular_values(a)[:k], atol=1e-9)
        np.testing.assert_allclose(res.reconstruct(), a, atol=1e-10)
        np.testing.assert_allclose(res.u.T @ res.u, np.eye(k), atol=1e-10)
        np.testing.assert_allclose(res.v @ res.v.T, np.eye(k), atol=1e-10)
        assert np.all(np.diff(res.s) <= 1e-12)

    @pytest.mark.parametrize("shape", [(2, 5), (5, 2)])
    def test_input_is_not_modified(self, shape):
        a = np.random.default_rng(12).standard_normal(shape)
        before = a.copy()
        svd(a, dtype=F64)
        np.testing.assert_array_equal(a, before)

    def test_sign_convention(self):
        a = np.random.default_rng(10).standard_normal((6, 4))
        u = svd(a, dtype=F64).u
        pivot = np.abs(u).argmax(axis=0)
        assert np.all(u[pivot, np.arange(4)] >= 0)

    def test_rank_deficient_completes_basis(self):
        a = np.outer(np.arange(1.0, 6.0), np.ones(4))
        res = svd(a, dtype=F64)
        np.testing.assert_allclose(res.s[1:], 0, atol=1e-10)
        np.testing.assert_allclose(res.u.T @ res.u, np.eye(4), atol=1e-8)
        np.testing.assert_allclose(res.reconstruct(), a, atol=1e-10)

    def test_rejects_bad_input(self):
        with pytest.raises(NumericError):
            svd(np.array([[1.0, np.nan]]))
        with pytest.raises(ContractError):
            svd(np.ones(3))


class TestOptimizers:
    def test_sgd_momentum_and_decay(self):
        p = Tensor(np.array([1.0]), requires_grad=True, dtype=F64)
        opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.5)
        p.grad = np.array([2.0])
        opt.step()  # g = 2 + 0.5 = 2.5
        p.grad = np.array([2.0])
        opt.step()  # g = 2 + 0.5*0.75 = 2.375, buf = 0.9*2.5 + 2.375
        np.testing.assert_allclose(p.data, [1.0 - 0.25 - 0.1 * (2.25 + 2.375)])

    def test_adam_first_step_is_lr_sized(self):
        p = Tensor(np.array([0.0, 0.0]), requires_grad=True, dtype=F64)
        opt = Adam([p], lr=0.01)
        p.grad = np.array([3.0, -1e-3])
        opt.step()
        np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-4)

    def test_plateau_decay(self):
        p = Tensor(np.zeros(1), requires_grad=True)
        opt = SGD([p], lr=1.0)
        sched = ReduceOnPlateau(opt, "max", factor=0.1, patience=2)
        assert sched.step(0.5)
        assert not sched.step(0.4)
        assert opt.lr == 1.0
        assert not sched.step(0.5)
        assert opt.lr == pytest.approx(0.1)
        assert sched.step(0.6)


class TestKernelBackends:
    def test_backends_agree(self):
        impls = _kernels.implementations()
        if "cython" not in impls:
            pytest.skip("compiled extension not built")
        rng = np.random.default_rng(11)
        xp = rng.standard_normal((3, 4, 7, 6)).astype(np.float32)
        outs = [m.im2col(xp, 3, 2, 2, 1, 3, 5) for m in impls.values()]
        np.testing.assert_array_equal(outs[0], outs[1])
        cols = rng.standard_normal((4 * 3 * 2, 3 * 3 * 5))
        outs = [m.col2im(cols, 3, 4, 7, 6, 3, 2, 2, 1, 3, 5) for m in impls.values()]
        np.testing.assert_allclose(outs[0], outs[1], atol=1e-12)
        a = rng.standard_normal((5, 9))
        norms = []
        for m in impls.values():
            at, vt = a.copy(), np.eye(5)
            m.jacobi_rotate(at, vt, 1e-15, 60)
            norms.append(np.sort(np.linalg.norm(at, axis=1)))
            np.testing.assert_allclose(vt.T @ at, a, atol=1e-12)
        np.testing.assert_allclose(norms[0], norms[1], atol=1e-12)

    def test_pure_python_switch(self):
        env = dict(os.environ, LRNAS_PURE_PYTHON="1")
        out = subprocess.run([sys.executable, "-c", "import lrnas.tensor as t; print(t.BACKEND)"],
                             env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "python"

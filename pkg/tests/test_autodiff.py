"""Operator contracts, direct-formula oracles, and gradient checks for the
tensor substrate."""

import math

import numpy as np
import pytest

from pixelsail import autodiff as ad
from pixelsail.autodiff import GradTape, Tensor
from pixelsail.errors import ConfigError, ShapeError

F32 = np.float32


def t(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=F32), requires_grad=grad)


def triple_loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += float(a[i, l]) * float(b[l, j])
    return out


class TestMatmul:
    def test_identity(self):
        a = t(np.eye(2))
        b = t([[1, 2], [3, 4]])
        assert np.array_equal(ad.matmul(a, b).data, b.data)

    def test_selector_row(self):
        out = ad.matmul(t([[1, 0]]), t([[5], [7]]))
        assert out.data.tolist() == [[5.0]]

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4)).astype(F32)
        b = rng.normal(size=(4, 2)).astype(F32)
        np.testing.assert_allclose(ad.matmul(t(a), t(b)).data, triple_loop_matmul(a, b), atol=1e-6)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            ad.matmul(t(np.zeros((2, 3))), t(np.zeros((2, 2))))


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(ad.softmax(t([0.0, 0.0])).data, [0.5, 0.5], atol=1e-7)

    def test_large_logit_is_stable(self):
        out = ad.softmax(t([1000.0, 0.0])).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-6)

    def test_matches_float64_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(scale=3.0, size=(7,)).astype(F32)
        e = np.exp(x.astype(np.float64))
        np.testing.assert_allclose(ad.softmax(t(x)).data, e / e.sum(), atol=1e-6)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        x = rng.normal(scale=5.0, size=(6, 9)).astype(F32)
        sums = ad.softmax(t(x)).data.sum(axis=-1)
        np.testing.assert_allclose(sums, np.ones(6), atol=1e-6)


class TestRmsnorm:
    def test_constant_vector(self):
        out = ad.rmsnorm(t([2.0, 2.0, 2.0, 2.0]), t(np.ones(4)))
        np.testing.assert_allclose(out.data, np.ones(4), atol=1e-5)

    def test_zero_vector_stays_zero(self):
        out = ad.rmsnorm(t(np.zeros(4)), t(np.ones(4)))
        assert not out.data.any()

    def test_matches_float64_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 8)).astype(F32)
        g = rng.normal(size=(8,)).astype(F32)
        x64 = x.astype(np.float64)
        want = x64 / np.sqrt((x64**2).mean(-1, keepdims=True) + 1e-6) * g
        np.testing.assert_allclose(ad.rmsnorm(t(x), t(g)).data, want, atol=1e-5)

    def test_output_rms_matches_constant_gain(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(16,)).astype(F32) + 0.5
        out = ad.rmsnorm(t(x), t(np.full(16, 1.7))).data
        assert abs(np.sqrt((out**2).mean()) - 1.7) < 1e-5


class TestConvOps:
    def test_conv_transpose_requires_kernel_eq_stride(self):
        with pytest.raises(ConfigError):
            ad.conv_transpose2d(t(np.zeros((1, 2, 2))), t(np.zeros((1, 1, 3, 3))), stride=2)

    def test_depthwise_requires_odd_kernel(self):
        with pytest.raises(ConfigError):
            ad.depthwise_conv2d(t(np.zeros((1, 4, 4))), t(np.zeros((1, 2, 2))))

    def test_conv_transpose_then_avgpool_recovers_scaled_input(self):
        # constant 1-channel kernel: every output pixel in the window equals
        # x * c, so stride-2 average pooling returns x * (kernel sum / 4)
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 3, 3)).astype(F32)
        c = 0.7
        w = np.full((1, 1, 2, 2), c, dtype=F32)
        out = ad.conv_transpose2d(t(x), t(w), stride=2).data
        pooled = out.reshape(1, 3, 2, 3, 2).mean(axis=(2, 4))
        np.testing.assert_allclose(pooled, x * w.sum() / 4.0, atol=1e-6)


class TestElementwise:
    def test_add_mul_sigmoid_match_numpy(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(4, 3)).astype(F32)
        b = rng.normal(size=(4, 3)).astype(F32)
        np.testing.assert_allclose(ad.add(t(a), t(b)).data, a + b, atol=0)
        np.testing.assert_allclose(ad.mul(t(a), t(b)).data, a * b, atol=0)
        s64 = 1.0 / (1.0 + np.exp(-a.astype(np.float64)))
        np.testing.assert_allclose(ad.sigmoid(t(a)).data, s64, atol=1e-6)

    def test_broadcast_whitelist(self):
        a = t(np.zeros((3, 4)))
        assert ad.add(a, t(np.ones(4))).data.shape == (3, 4)
        assert ad.add(a, 2.0).data.shape == (3, 4)
        with pytest.raises(ShapeError):
            ad.add(a, t(np.ones((3, 1))))


class TestEmbedding:
    def test_lookup_and_scatter_grad(self):
        table = t(np.arange(12).reshape(4, 3), grad=True)
        with GradTape() as tape:
            out = ad.embedding(table, [1, 1, 3])
            tape.backward(ad.sum_all(out))
        assert np.array_equal(out.data, table.data[[1, 1, 3]])
        want = np.zeros((4, 3), dtype=F32)
        want[1] = 2.0
        want[3] = 1.0
        assert np.array_equal(table.grad, want)


class TestGradCheck:
    def test_closed_form_quadratic(self):
        x = t([1.0, 2.0], grad=True)
        err = ad.grad_check(lambda z: ad.sum_all(ad.mul(z, z)), x)
        assert err < 1e-3
        np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-6)

    @pytest.mark.parametrize("seed", range(10))
    def test_every_op_within_tolerance(self, seed):
        rng = np.random.default_rng(seed)

        def const(shape):
            return t(rng.normal(size=shape))

        w_sm = const((3, 5))
        w_rn = const((4,))
        w_rn_out = const((6, 4))
        w_mm = const((4, 2))
        w_ct = const((2, 3, 2, 2))
        w_ct_out = const((3, 6, 6))
        w_dw = const((2, 3, 3))
        w_dw_out = const((2, 4, 4))
        w_bl = const((2, 7, 9))
        tgt = (rng.random((4, 6)) > 0.5).astype(F32)
        checks = [
            (lambda z: ad.sum_all(ad.mul(ad.softmax(z), w_sm)), (3, 5)),
            (lambda z: ad.sum_all(ad.mul(ad.rmsnorm(z, w_rn), w_rn_out)), (6, 4)),
            (lambda z: ad.sum_all(ad.matmul(z, w_mm)), (3, 4)),
            (lambda z: ad.sum_all(ad.mul(ad.conv_transpose2d(z, w_ct, 2), w_ct_out)), (2, 3, 3)),
            (lambda z: ad.sum_all(ad.mul(ad.depthwise_conv2d(z, w_dw), w_dw_out)), (2, 4, 4)),
            (lambda z: ad.sum_all(ad.mul(ad.bilinear_resize(z, 7, 9), w_bl)), (2, 4, 4)),
            (lambda z: ad.sum_all(ad.gelu(z)), (11,)),
            (lambda z: ad.sum_all(ad.sigmoid(z)), (11,)),
            (lambda z: ad.cross_entropy_rows(z, [0, 2], [1, 3]), (4, 5)),
            (lambda z: ad.bce_with_logits(z, tgt), (4, 6)),
            (lambda z: ad.mean_all(ad.mul(z, z)), (3, 3)),
        ]
        for f, shape in checks:
            x = t(rng.normal(size=shape), grad=True)
            assert ad.grad_check(f, x) <= 1e-2

    def test_dice_loss_composite(self):
        rng = np.random.default_rng(42)
        gt = (rng.random((2, 4, 4)) > 0.5).astype(F32)
        gt_t = Tensor(gt)

        def dice(z):
            p = ad.sigmoid(z)
            num = ad.add(ad.mul(ad.sum_all(ad.mul(p, gt_t)), 2.0), 1.0)
            den = ad.add(ad.add(ad.sum_all(p), float(gt.sum())), 1.0)
            return ad.sub(1.0, ad.div(num, den))

        x = t(rng.normal(size=(2, 4, 4)), grad=True)
        assert ad.grad_check(dice, x) < 1e-2


class TestOptimizer:
    def test_single_step_matches_hand_computation(self):
        p = {"w": t([1.0, -2.0], grad=True)}
        p["w"].grad = np.array([0.5, -0.5], dtype=F32)
        state = ad.AdamWState(p)
        ad.adamw_step(p, state, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)
        # bias-corrected m-hat = g, v-hat = g^2 on the first step
        want = np.array([1.0, -2.0]) - 0.1 * np.array([0.5, -0.5]) / (np.abs([0.5, -0.5]) + 1e-8)
        np.testing.assert_allclose(p["w"].data, want, atol=1e-6)

    def test_lr_zero_freezes_params_including_decay(self):
        p = {"w": t([1.0, 2.0], grad=True)}
        before = p["w"].data.copy()
        state = ad.AdamWState(p)
        for _ in range(10):
            p["w"].grad = np.array([0.3, -0.7], dtype=F32)
            ad.adamw_step(p, state, lr=0.0, weight_decay=0.5)
        assert np.array_equal(p["w"].data, before)

    def test_decoupled_decay_shrinks_params(self):
        p = {"w": t([4.0], grad=True)}
        p["w"].grad = np.array([0.0], dtype=F32)
        state = ad.AdamWState(p)
        ad.adamw_step(p, state, lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(p["w"].data, [4.0 - 0.1 * 0.5 * 4.0], atol=1e-6)

    def test_params_without_grad_are_skipped(self):
        p = {"w": t([1.0], grad=True)}
        state = ad.AdamWState(p)
        ad.adamw_step(p, state, lr=0.1, weight_decay=0.5)
        assert p["w"].data.tolist() == [1.0]


class TestCosineSchedule:
    def test_warmup_then_decay(self):
        base = 4e-5
        total = 1000
        warmup = math.ceil(0.03 * total)
        assert ad.cosine_lr(0, total, base) == pytest.approx(base / warmup)
        assert ad.cosine_lr(warmup - 1, total, base) == pytest.approx(base)
        assert ad.cosine_lr(warmup, total, base) == pytest.approx(base)
        mid = warmup + (total - warmup) // 2
        assert ad.cosine_lr(mid, total, base) == pytest.approx(base / 2, rel=1e-2)
        assert ad.cosine_lr(total - 1, total, base) < base * 1e-2

    def test_monotone_after_warmup(self):
        vals = [ad.cosine_lr(s, 200, 1e-3) for s in range(6, 200)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_forward_ops_are_deterministic():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(4, 8)).astype(F32)
    g = rng.normal(size=(8,)).astype(F32)
    a = ad.rmsnorm(t(x), t(g)).data
    b = ad.rmsnorm(t(x), t(g)).data
    assert np.array_equal(a, b)
    assert np.array_equal(ad.softmax(t(x)).data, ad.softmax(t(x)).data)


def test_tape_populates_each_leaf_once():
    x = t([1.0, 2.0], grad=True)
    y = t([3.0, 4.0], grad=True)
    with GradTape() as tape:
        out = ad.sum_all(ad.mul(ad.add(x, y), ad.add(x, y)))
        tape.backward(out)
    np.testing.assert_allclose(x.grad, 2 * (x.data + y.data), atol=1e-6)
    np.testing.assert_allclose(y.grad, 2 * (x.data + y.data), atol=1e-6)


def test_backward_requires_scalar():
    x = t([1.0, 2.0], grad=True)
    with GradTape() as tape:
        y = ad.mul(x, 2.0)
        with pytest.raises(ShapeError):
            tape.backward(y)

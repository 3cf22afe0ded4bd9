import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from conviction import autodiff as ad
from conviction.conv import conv, conv_adjoint, conv_weight_grad, smooth_relu, smooth_relu_deriv
from conviction.errors import DimensionMismatchError, InvalidInputError
from conviction.regularizer import (
    ConvStack,
    RegularizerSpec,
    SynthesisOperator,
    conv_stack_forward,
    conv_stack_vjp,
    default_extractor,
    identity_stack,
    init_conv_stack,
    l21_smoothed,
    lipschitz_bound,
    load_checkpoint,
    position_count,
    r_eps,
    save_checkpoint,
    soft_shrink,
    stack_from_dict,
    stack_to_dict,
    synthesis_fuse,
)


def crandn(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def conv_loop(x, w):
    """Zero-padded cross-correlation by explicit loops."""
    B, Ci, H, W = x.shape
    Co, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((B, Co, H, W), complex)
    for b in range(B):
        for o in range(Co):
            for i in range(H):
                for j in range(W):
                    s = 0j
                    for c in range(Ci):
                        for di in range(k):
                            for dj in range(k):
                                ii, jj = i + di - p, j + dj - p
                                if 0 <= ii < H and 0 <= jj < W:
                                    s += w[o, c, di, dj] * x[b, c, ii, jj]
                    out[b, o, i, j] = s
    return out


class TestConv:
    def test_brute_force(self):
        rng = np.random.default_rng(0)
        x, w = crandn(rng, (2, 2, 4, 4)), crandn(rng, (3, 2, 3, 3))
        assert_allclose(conv(x, w), conv_loop(x, w), atol=1e-12)

    def test_split_real(self):
        rng = np.random.default_rng(1)
        x, w = crandn(rng, (1, 2, 5, 5)), crandn(rng, (2, 2, 3, 3))
        expect = conv_loop(x.real, w.real).real + 1j * conv_loop(x.imag, w.imag).real
        assert_allclose(conv(x, w, "split-real"), expect, atol=1e-12)

    @pytest.mark.parametrize("mode", ["complex", "split-real"])
    def test_adjoint(self, mode):
        rng = np.random.default_rng(2)
        x, w, c = crandn(rng, (2, 3, 6, 5)), crandn(rng, (4, 3, 3, 3)), crandn(rng, (2, 4, 6, 5))
        lhs = np.vdot(c, conv(x, w, mode)).real
        rhs = np.vdot(conv_adjoint(c, w, mode), x).real
        assert lhs == pytest.approx(rhs, rel=1e-12)

    @pytest.mark.parametrize("mode", ["complex", "split-real"])
    def test_weight_grad(self, mode):
        rng = np.random.default_rng(3)
        x, w, c = crandn(rng, (2, 2, 5, 5)), crandn(rng, (3, 2, 3, 3)), crandn(rng, (2, 3, 5, 5))
        d = crandn(rng, w.shape)
        g = conv_weight_grad(x, c, 3, mode)
        # the map is linear in w, so the directional derivative is exact
        assert np.vdot(g, d).real == pytest.approx(np.vdot(c, conv(x, d, mode)).real, rel=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            conv(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


class TestSmoothRelu:
    def test_examples(self):
        d = 1e-3
        assert smooth_relu(np.array(2 * d), d) == pytest.approx(2 * d)
        assert smooth_relu(np.array(0.0), d) == pytest.approx(d / 4)
        assert smooth_relu_deriv(np.array(0.0), d) == pytest.approx(0.5)
        assert smooth_relu(np.array(-5 * d), d) == 0.0

    def test_continuity_at_knots(self):
        d = 0.1
        for v in (-d, d):
            lo, hi = smooth_relu(np.array([v - 1e-12, v + 1e-12]), d)
            assert lo == pytest.approx(hi, abs=1e-11)

    def test_complex_componentwise(self):
        z = np.array([0.3 - 0.0002j])
        out = smooth_relu(z, 1e-3)
        assert out.real[0] == pytest.approx(0.3)
        assert out.imag[0] == pytest.approx(smooth_relu(np.array(-0.0002), 1e-3))

    def test_bad_delta(self):
        with pytest.raises(InvalidInputError):
            smooth_relu(np.zeros(2), 0.0)


class TestConvStack:
    def test_identity(self):
        x = crandn(np.random.default_rng(4), (6, 6))
        assert_allclose(conv_stack_forward(identity_stack(), x)[0], x)

    def test_zero_kernels(self):
        st_ = ConvStack((np.ones((2, 1, 3, 3)), np.zeros((2, 2, 3, 3))))
        assert not np.any(conv_stack_forward(st_, np.ones((5, 5))))

    def test_vjp_zero_cotangent(self):
        rng = np.random.default_rng(5)
        st_ = default_extractor(rng)
        gx, gw = conv_stack_vjp(st_, crandn(rng, (6, 6)), np.zeros((4, 6, 6)))
        assert not np.any(gx)
        assert all(not np.any(g) for g in gw)

    def test_vjp_identity(self):
        c = crandn(np.random.default_rng(6), (1, 5, 5))
        gx, _ = conv_stack_vjp(identity_stack(), np.zeros((5, 5)), c)
        assert_allclose(gx, c[0])

    @pytest.mark.parametrize("mode", ["complex", "split-real"])
    def test_vjp_fd(self, mode):
        rng = np.random.default_rng(7)
        st_ = init_conv_stack(rng, [1, 3, 2], 3, mode=mode)
        x, c, d = crandn(rng, (6, 6)), crandn(rng, (2, 6, 6)), crandn(rng, (6, 6))
        gx, _ = conv_stack_vjp(st_, x, c)

        def f(z):
            return np.vdot(c, conv_stack_forward(st_, z)).real

        h = 1e-6
        fd = (f(x + h * d) - f(x - h * d)) / (2 * h)
        assert np.vdot(gx, d).real == pytest.approx(fd, rel=1e-6)

    def test_validation(self):
        with pytest.raises(DimensionMismatchError):
            ConvStack((np.ones((2, 1, 3, 3)), np.ones((1, 3, 3, 3))))
        with pytest.raises(DimensionMismatchError):
            ConvStack((np.ones((1, 1, 2, 2)),))
        with pytest.raises(InvalidInputError):
            ConvStack((np.ones((1, 1, 1, 1)),), delta=0.0)

    def test_xavier_range(self):
        st_ = init_conv_stack(np.random.default_rng(8), [1, 4, 4], 3)
        w = st_.layers[1]
        lim = math.sqrt(6 / (4 * 9 + 4 * 9)) / math.sqrt(2)
        assert np.all(np.abs(w.real) <= lim) and np.all(np.abs(w.imag) <= lim)

    def test_default_extractor_shape(self):
        st_ = default_extractor(np.random.default_rng(0))
        assert st_.depth == 3 and st_.out_channels == 4
        assert st_.layers[0].shape == (4, 1, 3, 3)
        assert st_.delta == 1e-3


class TestGroupNorm:
    def test_examples(self):
        F = np.array([3.0, 4.0]).reshape(2, 1, 1)
        assert l21_smoothed(np.zeros((3, 2, 2)), 0.7) == 0.0
        assert l21_smoothed(F, 0.0) == pytest.approx(5.0)
        assert l21_smoothed(F, 1.0) == pytest.approx(math.sqrt(26) - 1, abs=1e-8)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(1e-6, 1.0), st.floats(0.0, 1.0))
    def test_sandwich_and_monotone(self, seed, eps, frac):
        F = crandn(np.random.default_rng(seed), (3, 4, 4))
        m = position_count(F)
        r0, re = l21_smoothed(F, 0.0), l21_smoothed(F, eps)
        assert re <= r0 + 1e-10
        assert r0 <= re + m * eps + 1e-10
        e2 = eps * frac
        assert l21_smoothed(F, e2) + m * e2 <= re + m * eps + 1e-10

    def test_r_eps_examples(self):
        spec = RegularizerSpec(identity_stack(), 4.0, weight=1.0)
        v, g = r_eps(spec, np.array([[3.0]]))
        assert v == pytest.approx(1.0)
        assert g[0, 0] == pytest.approx(0.6)
        v, g = r_eps(spec, np.zeros((4, 4)))
        assert v == 0.0 and not np.any(g)

    def test_kappa(self):
        st_ = identity_stack()
        assert RegularizerSpec(st_, 1.0).kappa == 0.5
        assert 0 < RegularizerSpec(st_, 1.0, omega=-700.0).kappa < 1e-300
        with pytest.raises(InvalidInputError):
            RegularizerSpec(st_, 0.0)

    def test_r_eps_fd(self):
        rng = np.random.default_rng(9)
        spec = RegularizerSpec(default_extractor(rng), 1e-2, omega=0.4)
        x, d = crandn(rng, (6, 6)), crandn(rng, (6, 6))
        _, g = r_eps(spec, x)
        h = 1e-7
        fd = (r_eps(spec, x + h * d)[0] - r_eps(spec, x - h * d)[0]) / (2 * h)
        assert np.vdot(g, d).real == pytest.approx(fd, rel=1e-5)

    def test_empirical_lipschitz(self):
        # identity extractor: L_g = 0 and M = 1
        rng = np.random.default_rng(10)
        eps = 0.05
        spec = RegularizerSpec(identity_stack(), eps, weight=1.0)
        bound = lipschitz_bound(eps, 0.0, 1.0, 16)
        for _ in range(50):
            x = crandn(rng, (4, 4)) * 0.1
            y = x + crandn(rng, (4, 4)) * 10.0 ** rng.uniform(-4, -1)
            ratio = np.linalg.norm(r_eps(spec, x)[1] - r_eps(spec, y)[1]) / np.linalg.norm(x - y)
            assert ratio <= bound


class TestShrink:
    def test_examples(self):
        F = np.array([3.0, 4.0]).reshape(2, 1, 1)
        assert_allclose(soft_shrink(F, 1.0).ravel(), [2.4, 3.2])
        assert not np.any(soft_shrink(F, 5.0))
        assert not np.any(soft_shrink(F, 6.0))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.0, 3.0))
    def test_non_expansive(self, seed, alpha):
        rng = np.random.default_rng(seed)
        F, G = crandn(rng, (3, 4, 4)), crandn(rng, (3, 4, 4))
        lhs = np.linalg.norm(soft_shrink(F, alpha) - soft_shrink(G, alpha))
        assert lhs <= np.linalg.norm(F - G) + 1e-12

    def test_negative_alpha(self):
        with pytest.raises(InvalidInputError):
            soft_shrink(np.ones((2, 1, 1)), -1.0)

    def test_autodiff_matches_numeric(self):
        F = crandn(np.random.default_rng(11), (1, 3, 4, 4))
        assert_allclose(ad.soft_shrink(F, 0.8, axis=1), soft_shrink(F, 0.8, axis=1))


class TestLipschitzBound:
    def test_examples(self):
        assert lipschitz_bound(1, 1, 1, 1) == 3
        assert lipschitz_bound(0.5, 2, 1, 3) == 18

    def test_invalid(self):
        with pytest.raises(InvalidInputError):
            lipschitz_bound(0.0, 1, 1, 1)


class TestSynthesis:
    def test_zero_final_layer(self):
        rng = np.random.default_rng(12)
        fusion = ConvStack((crandn(rng, (2, 4, 3, 3)), np.zeros((1, 2, 3, 3))))
        out = synthesis_fuse(SynthesisOperator(fusion), np.zeros((2, 5, 5)), np.zeros((2, 5, 5)))
        assert out.shape == (5, 5) and not np.any(out)

    def test_concatenation_order(self):
        rng = np.random.default_rng(13)
        F1, F2 = crandn(rng, (2, 5, 5)), crandn(rng, (3, 5, 5))
        w0, w1 = crandn(rng, (2, 5, 3, 3)), crandn(rng, (1, 2, 3, 3))
        a = synthesis_fuse(SynthesisOperator(ConvStack((w0, w1))), F1, F2)
        w0_swapped = np.concatenate([w0[:, 2:], w0[:, :2]], axis=1)
        b = synthesis_fuse(SynthesisOperator(ConvStack((w0_swapped, w1))), F2, F1)
        assert_allclose(a, b, atol=1e-13)

    def test_single_layer_brute_force(self):
        rng = np.random.default_rng(14)
        F1, F2 = crandn(rng, (1, 4, 4)), crandn(rng, (1, 4, 4))
        w = crandn(rng, (1, 2, 3, 3))
        out = synthesis_fuse(SynthesisOperator(ConvStack((w,))), F1, F2)
        assert_allclose(out, conv_loop(np.concatenate([F1, F2])[None], w)[0, 0], atol=1e-12)

    def test_channel_check(self):
        fusion = ConvStack((np.ones((1, 3, 1, 1)),))
        with pytest.raises(DimensionMismatchError):
            synthesis_fuse(SynthesisOperator(fusion), np.ones((2, 4, 4)), np.ones((2, 4, 4)))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(15)
    st_ = init_conv_stack(rng, [1, 3, 2], 5, delta=0.01, mode="split-real")
    save_checkpoint(tmp_path / "c.json", {"reg": stack_to_dict(st_, eps=1e-3, omega=-0.25)})
    doc = load_checkpoint(tmp_path / "c.json")
    back = stack_from_dict(doc["reg"])
    assert back == st_
    for a, b in zip(back.layers, st_.layers):
        assert_array_equal(a, b)
    assert doc["reg"]["omega"] == -0.25 and doc["reg"]["eps"] == 1e-3


def test_checkpoint_rejects_foreign(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "other"}')
    with pytest.raises(InvalidInputError):
        load_checkpoint(p)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from conviction.errors import (
    DimensionMismatchError,
    InvalidInputError,
    InvalidRatioError,
    UndefinedReferenceError,
)
from conviction.imaging import (
    SSIM_K1,
    SSIM_K2,
    KSpaceData,
    adjoint_op,
    add_noise,
    data_fidelity,
    fft2,
    forward_op,
    ifft2,
    make_mask,
    metrics,
    nmse,
    psnr,
    rmse,
    rss,
    shepp_logan,
    ssim,
    zero_filled,
)


def crandn(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


class TestFFT:
    def test_constant_image_is_dc_impulse(self):
        n, c = 8, 2.5
        k = fft2(np.full((n, n), c))
        expect = np.zeros((n, n), complex)
        expect[0, 0] = c * n
        assert_allclose(k, expect, atol=1e-12)

    def test_round_trip(self):
        x = crandn(np.random.default_rng(0), (8, 8))
        assert_allclose(ifft2(fft2(x)), x, atol=1e-12)

    def test_non_finite_rejected(self):
        x = np.zeros((4, 4))
        x[1, 2] = np.nan
        with pytest.raises(InvalidInputError):
            fft2(x)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 12), st.integers(2, 12), st.integers(0, 2**31))
    def test_parseval(self, h, w, seed):
        x = crandn(np.random.default_rng(seed), (h, w))
        assert math.isclose(np.linalg.norm(fft2(x)), np.linalg.norm(x), rel_tol=1e-12)


class TestMask:
    def test_full(self):
        m = make_mask("full", 1.0, 8, 8, 0)
        assert m.count == 64

    def test_cartesian_ratio(self):
        m = make_mask("cartesian-rows", 0.3156, 320, 320, 7)
        assert 0.3094 <= m.achieved_ratio <= 0.3219

    def test_radial_ratio_and_dc(self):
        m = make_mask("radial", 0.4, 32, 32, 3)
        assert abs(m.achieved_ratio - 0.4) < 0.02
        assert m.cells[0, 0]

    @pytest.mark.parametrize("ratio", [0.0, -0.1, 1.01])
    def test_bad_ratio(self, ratio):
        with pytest.raises(InvalidRatioError):
            make_mask("radial", ratio, 8, 8)

    def test_unknown_pattern(self):
        with pytest.raises(InvalidInputError):
            make_mask("spiral", 0.5, 8, 8)

    @pytest.mark.parametrize("pattern", ["radial", "cartesian-rows", "uniform-random"])
    def test_deterministic(self, pattern):
        a = make_mask(pattern, 0.37, 24, 20, seed=11)
        b = make_mask(pattern, 0.37, 24, 20, seed=11)
        assert a == b
        assert_array_equal(a.cells, b.cells)

    def test_cells_read_only(self):
        m = make_mask("uniform-random", 0.5, 8, 8, 1)
        with pytest.raises(ValueError):
            m.cells[0, 0] = False


class TestOperators:
    def test_zero_image(self):
        m = make_mask("radial", 0.4, 16, 16)
        assert not np.any(forward_op(np.zeros((16, 16)), m).values)

    def test_full_mask_matches_fft(self):
        rng = np.random.default_rng(1)
        x = crandn(rng, (8, 8))
        m = make_mask("full", 1.0, 8, 8)
        assert_allclose(forward_op(x, m).values, fft2(x).ravel(), atol=1e-14)
        y = KSpaceData(m, crandn(rng, 64))
        assert_allclose(adjoint_op(y), ifft2(y.values.reshape(8, 8)), atol=1e-14)
        assert_allclose(zero_filled(y), adjoint_op(y))

    def test_zero_measurements(self):
        m = make_mask("radial", 0.3, 8, 8)
        assert not np.any(adjoint_op(KSpaceData(m, np.zeros(m.count))))

    @settings(max_examples=25, deadline=None)
    @given(st.sampled_from(["radial", "cartesian-rows", "uniform-random"]), st.floats(0.1, 1.0),
           st.integers(0, 2**31))
    def test_adjoint_identity(self, pattern, ratio, seed):
        rng = np.random.default_rng(seed)
        m = make_mask(pattern, ratio, 12, 10, seed)
        x = crandn(rng, (12, 10))
        yv = crandn(rng, m.count)
        lhs = np.vdot(forward_op(x, m).values, yv)
        rhs = np.vdot(x, adjoint_op(KSpaceData(m, yv)))
        assert abs(lhs - rhs) <= 1e-10 * (1 + np.linalg.norm(x) * np.linalg.norm(yv))

    def test_coil_stack(self):
        rng = np.random.default_rng(2)
        m = make_mask("radial", 0.5, 8, 8)
        u = crandn(rng, (3, 8, 8))
        y = forward_op(u, m)
        assert y.n_coils == 3
        for c in range(3):
            assert_allclose(y.values[c], forward_op(u[c], m).values)

    def test_shape_mismatch(self):
        m = make_mask("radial", 0.5, 8, 8)
        with pytest.raises(DimensionMismatchError):
            forward_op(np.zeros((8, 9)), m)
        with pytest.raises(DimensionMismatchError):
            KSpaceData(m, np.zeros(m.count + 1))


class TestDataFidelity:
    def test_consistent_data(self):
        rng = np.random.default_rng(3)
        m = make_mask("uniform-random", 0.5, 8, 8, 3)
        x = crandn(rng, (8, 8))
        v, g = data_fidelity(x, forward_op(x, m))
        assert v == pytest.approx(0.0, abs=1e-25)
        assert_allclose(g, 0, atol=1e-14)

    def test_zero_image(self):
        m = make_mask("full", 1.0, 4, 4)
        vals = np.zeros(16, complex)
        vals[[0, 5]] = [math.sqrt(2), math.sqrt(2) * 1j]
        v, _ = data_fidelity(np.zeros((4, 4)), KSpaceData(m, vals))
        assert v == pytest.approx(2.0)

    def test_gradient_fd(self):
        rng = np.random.default_rng(4)
        m = make_mask("radial", 0.4, 8, 8)
        y = forward_op(crandn(rng, (8, 8)), m)
        x, d = crandn(rng, (8, 8)), crandn(rng, (8, 8))
        _, g = data_fidelity(x, y)
        h = 1e-6
        fd = (data_fidelity(x + h * d, y)[0] - data_fidelity(x - h * d, y)[0]) / (2 * h)
        assert np.vdot(g, d).real == pytest.approx(fd, rel=1e-7)


class TestNoise:
    def test_statistics(self):
        m = make_mask("full", 1.0, 64, 64)
        y = KSpaceData(m, np.zeros(m.count))
        noisy = add_noise(y, 0.1, np.random.default_rng(0))
        assert np.std(noisy.values) == pytest.approx(0.1, rel=0.05)

    def test_zero_sigma_is_identity(self):
        m = make_mask("radial", 0.4, 8, 8)
        y = KSpaceData(m, np.arange(m.count) + 0j)
        assert_array_equal(add_noise(y, 0.0, np.random.default_rng(0)).values, y.values)


class TestPhantom:
    def test_contract(self):
        p = shepp_logan(32)
        assert np.max(np.abs(p)) == 1.0
        assert p[0, 0] == 0
        assert_array_equal(p, shepp_logan(32))
        assert not np.any(np.imag(p))

    def test_classic_variant_differs(self):
        assert not np.array_equal(shepp_logan(16, "classic"), shepp_logan(16))

    def test_too_small(self):
        with pytest.raises(InvalidInputError):
            shepp_logan(7)


class TestRSS:
    def test_single_coil(self):
        u = crandn(np.random.default_rng(5), (1, 4, 4))
        assert_allclose(rss(u), np.abs(u[0]))

    def test_three_four_five(self):
        u = np.stack([np.full((3, 3), 3.0), np.full((3, 3), 4.0)])
        assert_allclose(rss(u), 5.0)

    def test_brute_force(self):
        u = crandn(np.random.default_rng(6), (3, 4, 4))
        out = rss(u)
        for i in range(4):
            for j in range(4):
                assert out[i, j] == pytest.approx(math.sqrt(sum(abs(u[c, i, j]) ** 2 for c in range(3))))

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            rss(np.zeros((0, 4, 4)))


def ssim_loop(x, ref, w=7):
    """Independent windowed SSIM: explicit loops over valid window positions."""
    a, b = np.abs(x), np.abs(ref)
    L = b.max()
    c1, c2 = (SSIM_K1 * L) ** 2, (SSIM_K2 * L) ** 2
    vals = []
    for i in range(a.shape[0] - w + 1):
        for j in range(a.shape[1] - w + 1):
            pa, pb = a[i:i + w, j:j + w].ravel(), b[i:i + w, j:j + w].ravel()
            ma, mb = pa.mean(), pb.mean()
            va, vb = ((pa - ma) ** 2).mean(), ((pb - mb) ** 2).mean()
            cov = ((pa - ma) * (pb - mb)).mean()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestMetrics:
    def test_identical(self):
        ref = shepp_logan(16)
        r = metrics(ref, ref)
        assert r.psnr == math.inf
        assert r.ssim == pytest.approx(1.0)
        assert r.nmse == 0.0

    def test_psnr_formula(self):
        ref = np.zeros((10, 10))
        ref[0, 0] = 1.0
        x = ref + 0.1  # MSE 0.01
        assert psnr(x, ref) == pytest.approx(20.0)

    def test_psnr_scaling(self):
        rng = np.random.default_rng(7)
        ref, e = crandn(rng, (8, 8)), crandn(rng, (8, 8))
        assert psnr(ref + e, ref) - psnr(ref + 2 * e, ref) == pytest.approx(20 * math.log10(2), abs=1e-12)

    def test_ssim_brute_force(self):
        rng = np.random.default_rng(8)
        x, ref = crandn(rng, (12, 11)), crandn(rng, (12, 11))
        assert ssim(x, ref) == pytest.approx(ssim_loop(x, ref), abs=1e-10)

    def test_nmse_denominators(self):
        x = np.array([[2.0, 0.0]])
        ref = np.array([[1.0, 0.0]])
        assert nmse(x, ref) == pytest.approx(0.25)
        assert nmse(x, ref, "reference") == pytest.approx(1.0)
        assert rmse(x, ref) == pytest.approx(1.0)

    def test_zero_reference(self):
        z = np.zeros((4, 4))
        with pytest.raises(UndefinedReferenceError):
            nmse(np.ones((4, 4)), z)
        with pytest.raises(UndefinedReferenceError):
            rmse(np.ones((4, 4)), z)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            psnr(np.ones((4, 4)), np.ones((4, 5)))

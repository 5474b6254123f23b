import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from olchdr.radiometry import (LdrFrame, ToneMapParams, expose, fuse_exposures, gamma_normalize,
                               inverse_tonemap, psnr, ssim, tonemap, triangle_functions,
                               triangle_weights)


def frame(value, t, shape=(4, 4, 3)):
    return LdrFrame(np.full(shape, value, dtype=np.float64), t)


class TestGammaNormalize:
    def test_unit_pixels(self):
        np.testing.assert_array_equal(gamma_normalize(frame(1.0, 1.0), 2.2), 1.0)

    def test_half_pixels(self):
        np.testing.assert_allclose(gamma_normalize(frame(0.5, 4.0), 2.0), 0.0625, rtol=0, atol=1e-15)

    def test_zero_pixels(self):
        np.testing.assert_array_equal(gamma_normalize(frame(0.0, 3.0), 1.7), 0.0)

    @pytest.mark.parametrize("gamma", [0.0, -1.0])
    def test_bad_gamma(self, gamma):
        with pytest.raises(ValueError):
            gamma_normalize(frame(0.5, 1.0), gamma)

    def test_bad_exposure(self):
        with pytest.raises(ValueError):
            frame(0.5, 0.0)

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        ldr = rng.uniform(0, 1, (16, 16, 3))
        for t, g in [(0.25, 2.2), (1.0, 2.0), (4.0, 2.2)]:
            back = expose(gamma_normalize(LdrFrame(ldr, t), g), t, g)
            np.testing.assert_allclose(back, ldr, atol=1e-7, rtol=0)


class TestTriangleWeights:
    @pytest.mark.parametrize("x, expected", [
        (0.5, (1.0, 1.0, 1.0)),
        (0.0, (0.0, 0.0, 1.0)),
        (0.25, (0.5, 0.5, 1.0)),
    ])
    def test_examples(self, x, expected):
        w = triangle_weights(np.full((1, 1, 3), x))
        got = (w.alpha_1.item(), w.alpha_2.item(), w.alpha_3.item())
        assert got == pytest.approx(expected, abs=1e-15)

    def test_rgb_mean_drives_weights(self):
        px = np.array([[[0.0, 0.25, 0.5]]])  # mean 0.25
        w = triangle_weights(px)
        assert w.alpha_1.shape == (1, 1)
        assert w.alpha_1.item() == pytest.approx(0.5)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            triangle_weights(np.full((2, 2, 3), 1.5))

    def test_partition_identity(self):
        x = np.linspace(0, 1, 10001)
        l1, l2, l3 = triangle_functions(x)
        np.testing.assert_allclose((1 - l1) + (1 - l3), 1 + l2, atol=1e-15)
        assert np.all(l1 + (1 - l1) >= 0)
        w = triangle_weights(x[:, None, None].repeat(3, axis=2))
        assert np.all(w.stack() >= 0) and np.all(w.stack() <= 1)
        assert np.all(w.stack().sum(axis=0) >= 1)


class TestFuse:
    def test_hand_pixel(self):
        gamma, h = 2.0, 0.04
        times = (0.25, 1.0, 4.0)
        s = [math.sqrt(h * t) for t in times]
        assert s == pytest.approx([0.1, 0.2, 0.4])
        frames = [LdrFrame(np.full((1, 1, 3), v), t) for v, t in zip(s, times)]
        np.testing.assert_allclose(fuse_exposures(frames, gamma), 0.04, rtol=1e-12)

    def test_black(self):
        frames = [frame(0.0, t) for t in (0.25, 1, 4)]
        np.testing.assert_array_equal(fuse_exposures(frames), 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            fuse_exposures([frame(0.1, 0.25), frame(0.1, 1, (4, 5, 3)), frame(0.1, 4)])

    def test_exactness_random_maps(self):
        """Unclipped re-exposures of a radiance map fuse back to the map."""
        rng = np.random.default_rng(0)
        gamma, times = 2.2, (0.25, 1.0, 4.0)
        worst = 0.0
        for _ in range(100):
            h = rng.uniform(1e-4, 1.0 / max(times), (8, 8, 3))
            frames = [LdrFrame(expose(h, t, gamma), t) for t in times]
            assert all(f.pixels.max() < 1.0 for f in frames)
            fused = fuse_exposures(frames, gamma)
            worst = max(worst, float(np.max(np.abs(fused - h) / h)))
        assert worst <= 1e-6


class TestTonemap:
    def test_endpoints(self):
        assert tonemap(0.0) == 0.0
        assert tonemap(1.0) == 1.0

    def test_known_value(self):
        # high-precision value of log(51) / log(5001)
        assert tonemap(0.01, ToneMapParams(5000)) == pytest.approx(0.4616231226612880, abs=1e-12)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            tonemap(np.array([-0.1]))

    def test_bad_mu(self):
        with pytest.raises(ValueError):
            ToneMapParams(0.0)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1), st.floats(1.0, 1e5))
    def test_monotone(self, x, y, mu):
        if x == y:
            return
        lo, hi = min(x, y), max(x, y)
        assert tonemap(lo, mu) < tonemap(hi, mu)

    def test_inverse(self):
        x = np.linspace(0, 1, 101)
        np.testing.assert_allclose(inverse_tonemap(tonemap(x)), x, atol=1e-13)


class TestMetrics:
    def test_psnr_identical(self):
        a = np.random.default_rng(0).uniform(0, 1, (16, 16, 3))
        assert psnr(a, a) == math.inf

    def test_psnr_offset(self):
        a = np.random.default_rng(1).uniform(0, 0.9, (16, 16, 3))
        assert psnr(a, a + 0.01, 1.0) == pytest.approx(40.0, abs=1e-9)

    def test_psnr_shape(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))

    def test_ssim_identical(self):
        a = np.random.default_rng(2).uniform(0, 1, (24, 24, 3))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_ssim_range(self):
        rng = np.random.default_rng(3)
        a, b = rng.uniform(0, 1, (2, 24, 24, 3))
        assert -1.0 <= ssim(a, b) < 0.5
        assert ssim(a, 1 - a) < 0

    def test_psnr_mu_channel_permutation(self):
        rng = np.random.default_rng(4)
        a, b = rng.uniform(0, 1, (2, 12, 12, 3))
        perm = [2, 0, 1]
        assert psnr(tonemap(a), tonemap(b)) == pytest.approx(psnr(tonemap(a[..., perm]), tonemap(b[..., perm])))

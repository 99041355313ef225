import math

import numpy as np
import pytest

from measnet.autodiff import Tensor
from measnet.degrade import add_gaussian_noise
from measnet.metrics import SSIM_C1, SSIM_C2, psnr, ssim, ssim_window


def _rand_img(seed, c=3, h=16, w=16):
    return np.random.default_rng(seed).uniform(0, 1, size=(c, h, w))


class TestPsnr:
    def test_identical_images_are_inf(self):
        a = _rand_img(0)
        assert psnr(a, a) == math.inf

    def test_uniform_difference_closed_form(self):
        a = np.full((3, 8, 8), 0.4)
        b = np.full((3, 8, 8), 0.5)
        # MSE 0.01 -> 10*log10(100) = 20 dB
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_error_scaling_log_identity(self):
        a = _rand_img(1)
        e = _rand_img(2) * 0.05
        base = psnr(a, a + e)
        assert psnr(a, a + e / math.sqrt(10.0)) == pytest.approx(base + 10.0, abs=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            psnr(np.zeros((3, 8, 8)), np.zeros((3, 8, 9)))

    def test_accepts_tensors_and_batch_dim(self):
        a = _rand_img(3)
        t = Tensor(a[None].astype(np.float32), requires_grad=False)
        assert psnr(t, t) == math.inf
        b = np.clip(a + 0.1, 0, 1)
        assert psnr(a[None], b[None]) == pytest.approx(psnr(a, b))

    def test_decreases_with_noise_level(self):
        clean = 0.2 + 0.6 * _rand_img(4, h=64, w=64)  # headroom limits clamping
        vals = [psnr(clean, add_gaussian_noise(clean, s, seed=7))
                for s in (5, 15, 25, 50)]
        assert all(x > y for x, y in zip(vals, vals[1:]))


def _naive_ssim_channel(a, b):
    w = ssim_window()
    half = w.shape[0] // 2
    vals = []
    for i in range(half, a.shape[0] - half):
        for j in range(half, a.shape[1] - half):
            pa = a[i - half:i + half + 1, j - half:j + half + 1]
            pb = b[i - half:i + half + 1, j - half:j + half + 1]
            mu_a, mu_b = (w * pa).sum(), (w * pb).sum()
            var_a = (w * pa * pa).sum() - mu_a ** 2
            var_b = (w * pb * pb).sum() - mu_b ** 2
            cov = (w * pa * pb).sum() - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2))
                        / ((mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)))
    return float(np.mean(vals))


class TestSsim:
    def test_window_normalized(self):
        w = ssim_window()
        assert w.shape == (11, 11)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(w > 0)

    def test_identical_images(self):
        a = _rand_img(5)
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_constant_images_closed_form(self):
        a = np.full((3, 16, 16), 0.2)
        b = np.full((3, 16, 16), 0.6)
        want = (2 * 0.2 * 0.6 + SSIM_C1) / (0.2 ** 2 + 0.6 ** 2 + SSIM_C1)
        assert ssim(a, b) == pytest.approx(want, abs=1e-6)

    def test_symmetry(self):
        a, b = _rand_img(6), _rand_img(7)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_matches_naive_double_loop(self):
        a, b = _rand_img(8), np.clip(_rand_img(8) + 0.1 * _rand_img(9), 0, 1)
        want = np.mean([_naive_ssim_channel(a[c], b[c]) for c in range(3)])
        assert ssim(a, b) == pytest.approx(want, abs=1e-8)

    def test_too_small_image_rejected(self):
        with pytest.raises(ValueError, match="window"):
            ssim(np.zeros((3, 10, 10)), np.zeros((3, 10, 10)))

    def test_in_range(self):
        a, b = _rand_img(10), 1.0 - _rand_img(10)
        assert -1.0 <= ssim(a, b) <= 1.0

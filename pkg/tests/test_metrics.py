"""PSNR/SSIM against closed forms and a direct windowed-statistics oracle;
synthetic-scene generator contracts."""

import numpy as np
import pytest

from cst.errors import ShapeError
from cst.metrics import (BRIGHT_THRESHOLD, PSNR_CAP_DB, psnr, psnr_per_band,
                         quadrant_scene, ssim, ssim_cube, synth_scene)


def ssim_oracle(a, b, data_range=1.0):
    """Direct per-window statistics with an explicit 11x11 Gaussian window."""
    size, sigma = 11, 1.5
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g1 = np.exp(-(coords ** 2) / (2 * sigma * sigma))
    win = np.outer(g1, g1)
    win /= win.sum()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    h, w = a.shape
    values = []
    for y in range(h - size + 1):
        for x in range(w - size + 1):
            pa = a[y:y + size, x:x + size]
            pb = b[y:y + size, x:x + size]
            mua = (win * pa).sum()
            mub = (win * pb).sum()
            va = (win * pa * pa).sum() - mua ** 2
            vb = (win * pb * pb).sum() - mub ** 2
            cov = (win * pa * pb).sum() - mua * mub
            values.append(((2 * mua * mub + c1) * (2 * cov + c2))
                          / ((mua ** 2 + mub ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(values))


class TestPsnr:
    def test_identical_cubes_hit_cap(self):
        x = np.random.default_rng(0).random((8, 8, 3))
        assert psnr(x, x) == PSNR_CAP_DB

    def test_uniform_error_closed_form(self):
        # |err| = 0.1 everywhere, range 1 -> 10*log10(1/0.01) = 20 dB
        ref = np.zeros((16, 16, 2))
        assert psnr(ref + 0.1, ref) == pytest.approx(20.0, abs=1e-12)

    def test_doubling_error_costs_about_6db(self):
        ref = np.zeros((16, 16, 2))
        drop = psnr(ref + 0.05, ref) - psnr(ref + 0.1, ref)
        assert drop == pytest.approx(20.0 * np.log10(2.0), abs=1e-9)

    def test_symmetric_in_arguments(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((6, 6, 2)), rng.random((6, 6, 2))
        assert psnr(a, b) == psnr(b, a)

    def test_per_band_lengths(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((6, 6, 4)), rng.random((6, 6, 4))
        assert len(psnr_per_band(a, b)) == 4

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


class TestSsim:
    def test_identical_is_exactly_one(self):
        x = np.random.default_rng(3).random((16, 16))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_inverted_image_matches_oracle_and_below_one(self):
        x = np.random.default_rng(4).random((14, 14))
        got = ssim(x, 1.0 - x)
        assert got < 1.0
        assert got == pytest.approx(ssim_oracle(x, 1.0 - x), abs=1e-10)

    def test_constant_shifted_by_range_matches_oracle(self):
        a = np.full((12, 12), 0.0)
        b = np.full((12, 12), 1.0)
        got = ssim(a, b)
        want = ssim_oracle(a, b)
        assert got == pytest.approx(want, abs=1e-12)
        assert got < 0.05  # luminance term collapses the score

    def test_random_pair_matches_oracle(self):
        rng = np.random.default_rng(5)
        a, b = rng.random((13, 15)), rng.random((13, 15))
        assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-10)

    def test_small_image_rejected(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_cube_variant_averages_bands(self):
        rng = np.random.default_rng(6)
        a, b = rng.random((12, 12, 3)), rng.random((12, 12, 3))
        want = np.mean([ssim(a[:, :, n], b[:, :, n]) for n in range(3)])
        assert ssim_cube(a, b) == pytest.approx(want, abs=1e-12)


class TestSynthScene:
    def test_zero_profile_is_all_dark(self):
        cube = synth_scene(1, 32, 32, 4, 0.0)
        assert cube.max() <= 0.02

    def test_deterministic_per_seed(self):
        a = synth_scene(7, 32, 32, 4, 0.3)
        b = synth_scene(7, 32, 32, 4, 0.3)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, synth_scene(8, 32, 32, 4, 0.3))

    def test_values_in_unit_range(self):
        cube = synth_scene(2, 32, 32, 4, 0.4)
        assert cube.min() >= 0.0 and cube.max() <= 1.0

    @pytest.mark.parametrize("profile", [0.15, 0.25, 0.4])
    @pytest.mark.parametrize("seed", [0, 3, 11])
    def test_bright_fraction_near_profile(self, profile, seed):
        # pixel-count oracle: fraction of bright pixels within +-20%
        cube = synth_scene(seed, 64, 64, 6, profile)
        frac = float((cube.max(axis=2) > BRIGHT_THRESHOLD).mean())
        assert 0.8 * profile <= frac <= 1.2 * profile


class TestQuadrantScene:
    def test_bright_quadrant_only(self):
        cube = quadrant_scene(5, 32, 32, 4)
        bright = cube.max(axis=2) > BRIGHT_THRESHOLD
        assert bright[:16, :16].mean() > 0.95
        assert bright[16:, :].sum() == 0
        assert bright[:16, 16:].sum() == 0

    def test_deterministic(self):
        assert np.array_equal(quadrant_scene(9, 32, 32, 4),
                              quadrant_scene(9, 32, 32, 4))

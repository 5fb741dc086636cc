import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from goembed.metrics import SSIM_C1, psnr, ssim


def test_psnr_cases():
    a = np.full((4, 4, 3), 0.3)
    assert psnr(a, a) == 99.0
    b = a + 0.1  # mse 0.01
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)
    assert psnr(np.full((4, 4, 3), 0.5), np.zeros((4, 4, 3))) == pytest.approx(6.0206, abs=1e-4)
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def test_ssim_identical_is_one(rng):
    a = rng.uniform(0, 1, (16, 16, 3))
    assert ssim(a, a) == 1.0


def test_ssim_constant_images():
    val = ssim(np.zeros((16, 16, 3)), np.ones((16, 16, 3)))
    assert val == pytest.approx(SSIM_C1 / (1 + SSIM_C1), rel=1e-9)
    assert val == pytest.approx(9.999e-5, rel=1e-3)


def test_ssim_negated_checker():
    i, j = np.indices((32, 32))
    pattern = np.where((i + j) % 2, 0.5, -0.5)
    assert ssim(pattern, -pattern) == pytest.approx(-1.0, abs=0.05)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


img = arrays(np.float64, (12, 12, 3), elements=st.floats(0, 1))


@settings(max_examples=25, deadline=None)
@given(img, img)
def test_symmetry(a, b):
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

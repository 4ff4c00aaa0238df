import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clearsplat.losses import (LossShapeError, dssim_masked, dssim_masked_with_grad, l1_masked, l1_masked_with_grad,
                               ssim, ssim_with_grad, total_loss)

from helpers import random_image

C1, C2 = 0.01 ** 2, 0.03 ** 2


def test_l1_identical_is_zero():
    a = random_image(np.random.default_rng(0))
    assert l1_masked(a, a) == 0.0


def test_l1_fully_masked_is_zero():
    rng = np.random.default_rng(0)
    assert l1_masked(random_image(rng), random_image(rng), np.ones((16, 16), np.uint8)) == 0.0


def test_l1_only_unmasked_pixel_counts():
    target = np.zeros((1, 2, 3))
    rendered = np.zeros((1, 2, 3))
    rendered[0, 0] = 0.2
    rendered[0, 1] = 0.4
    assert l1_masked(rendered, target, np.array([[0, 1]])) == pytest.approx(0.2, abs=1e-15)


def test_l1_squared_switch():
    rng = np.random.default_rng(1)
    a, b = random_image(rng), random_image(rng)
    assert l1_masked(a, b, squared=True) == pytest.approx(np.mean((a - b) ** 2), rel=1e-12)


def test_ssim_identity():
    a = random_image(np.random.default_rng(2), 24, 20)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-6)


def test_ssim_symmetric():
    rng = np.random.default_rng(3)
    a, b = random_image(rng, 20, 20), random_image(rng, 20, 20)
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12


def test_ssim_constant_images_closed_form():
    a, b = np.full((16, 16, 3), 0.25), np.full((16, 16, 3), 0.75)
    expect = (2 * 0.25 * 0.75 + C1) / (0.25 ** 2 + 0.75 ** 2 + C1)
    assert ssim(a, b) == pytest.approx(expect, abs=1e-12)


def test_ssim_matches_direct_window_sum():
    # brute-force oracle: explicit 11x11 Gaussian window at every valid position
    rng = np.random.default_rng(4)
    a, b = random_image(rng, 13, 14), random_image(rng, 13, 14)
    g = np.exp(-((np.arange(11) - 5) ** 2) / (2 * 1.5 ** 2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    vals = []
    for ch in range(3):
        for r in range(13 - 10):
            for c in range(14 - 10):
                x, y = a[r:r + 11, c:c + 11, ch], b[r:r + 11, c:c + 11, ch]
                mx, my = (w * x).sum(), (w * y).sum()
                vx = (w * x * x).sum() - mx * mx
                vy = (w * y * y).sum() - my * my
                cxy = (w * x * y).sum() - mx * my
                vals.append((2 * mx * my + C1) * (2 * cxy + C2) / ((mx * mx + my * my + C1) * (vx + vy + C2)))
    assert ssim(a, b) == pytest.approx(np.mean(vals), abs=1e-12)


def test_ssim_too_small():
    with pytest.raises(LossShapeError):
        ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))
    with pytest.raises((LossShapeError, ValueError)):
        ssim(np.zeros((16, 16, 3)), np.zeros((16, 17, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(11, 18), st.integers(11, 18))
def test_ssim_properties_random(seed, h, w):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0, 1, (h, w, 3)), rng.uniform(0, 1, (h, w, 3))
    s = ssim(a, b)
    assert -1.0 <= s <= 1.0
    assert abs(s - ssim(b, a)) <= 1e-12
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-6)


def test_dssim_identical_any_mask():
    rng = np.random.default_rng(5)
    a = random_image(rng)
    m = rng.integers(0, 2, (16, 16))
    assert dssim_masked(a, a, m) == pytest.approx(0.0, abs=1e-6)


def test_dssim_full_mask_zero():
    rng = np.random.default_rng(6)
    assert dssim_masked(random_image(rng), random_image(rng), np.ones((16, 16), np.uint8)) == 0.0


def test_dssim_no_mask_reduces_to_ssim():
    rng = np.random.default_rng(7)
    a, b = random_image(rng), random_image(rng)
    assert dssim_masked(a, b, np.zeros((16, 16), np.uint8)) == pytest.approx(1 - ssim(a, b), abs=1e-15)


def test_total_loss_lambda_ends():
    rng = np.random.default_rng(8)
    a, b, m = random_image(rng), random_image(rng), rng.integers(0, 2, (16, 16))
    assert total_loss(a, b, m, lam=0.0).total == l1_masked(a, b, m)
    assert total_loss(a, b, m, lam=1.0).total == dssim_masked(a, b, m)
    with pytest.raises(ValueError):
        total_loss(a, b, m, lam=1.5)


@pytest.mark.parametrize("squared", [False, True])
def test_total_loss_gradient_fd(squared):
    rng = np.random.default_rng(9)
    a, b = random_image(rng), random_image(rng)
    m = (rng.uniform(size=(16, 16)) < 0.3).astype(np.uint8)
    res = total_loss(a, b, m, lam=0.2, squared_l1=squared)
    h = 1e-6
    for idx in np.ndindex(a.shape):
        ap, am = a.copy(), a.copy()
        ap[idx] += h
        am[idx] -= h
        fd = (total_loss(ap, b, m, 0.2, squared).total - total_loss(am, b, m, 0.2, squared).total) / (2 * h)
        an = res.grad[idx]
        assert abs(fd - an) <= 1e-4 * max(abs(an), abs(fd)) + 1e-9


def test_ssim_gradient_fd():
    rng = np.random.default_rng(10)
    a, b = random_image(rng, 14, 15), random_image(rng, 14, 15)
    _, g = ssim_with_grad(a, b)
    h = 1e-6
    for idx in list(np.ndindex(a.shape))[::7]:
        ap, am = a.copy(), a.copy()
        ap[idx] += h
        am[idx] -= h
        fd = (ssim(ap, b) - ssim(am, b)) / (2 * h)
        assert abs(fd - g[idx]) <= 1e-6 * max(1.0, abs(fd))


def test_masked_gradients_are_zero_under_mask():
    rng = np.random.default_rng(11)
    a, b = random_image(rng), random_image(rng)
    m = rng.integers(0, 2, (16, 16)).astype(np.uint8)
    _, g1 = l1_masked_with_grad(a, b, m)
    _, g2 = dssim_masked_with_grad(a, b, m)
    assert not g1[m == 1].any() and not g2[m == 1].any()


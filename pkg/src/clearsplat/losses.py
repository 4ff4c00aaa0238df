"""Occlusion-masked photometric losses and SSIM with analytic gradients.

Masks mark occluded pixels with 1. The L1 term averages only over pixels
with M = 0; the D-SSIM term compares ``rendered * (1 - M)`` against
``target * (1 - M)``, so masked pixels agree exactly and carry no error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .scene import ImageBuffer, MaskImage

WINDOW = 11
SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


class LossShapeError(ValueError):
    pass


def _gauss_1d(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return k / k.sum()


_KERNEL = _gauss_1d()


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, ImageBuffer) else np.asarray(img, dtype=np.float64)


def _mask_values(mask, shape) -> np.ndarray:
    if mask is None:
        return np.zeros(shape[:2], dtype=bool)
    m = mask.values if isinstance(mask, MaskImage) else np.asarray(mask)
    if m.shape != shape[:2]:
        raise LossShapeError(f"mask shape {m.shape} does not match image {shape[:2]}")
    return m.astype(bool)


def _check_pair(a, b):
    if a.shape != b.shape:
        raise LossShapeError(f"image shapes differ: {a.shape} vs {b.shape}")


@njit(cache=True)
def _hfilter(src, k):
    """Valid correlation along the last axis of a (C, H, W) stack."""
    nc, h, w = src.shape
    n = k.shape[0]
    out = np.zeros((nc, h, w - n + 1))
    for c in range(nc):
        for r in range(h):
            for t in range(n):
                kt = k[t]
                for x in range(w - n + 1):
                    out[c, r, x] += kt * src[c, r, x + t]
    return out


@njit(cache=True)
def _vfilter(src, k):
    nc, h, w = src.shape
    n = k.shape[0]
    out = np.zeros((nc, h - n + 1, w))
    for c in range(nc):
        for r in range(h - n + 1):
            for t in range(n):
                kt = k[t]
                for x in range(w):
                    out[c, r, x] += kt * src[c, r + t, x]
    return out


@njit(cache=True)
def _hfilter_adjoint(g, k):
    nc, h, wv = g.shape
    n = k.shape[0]
    out = np.zeros((nc, h, wv + n - 1))
    for c in range(nc):
        for r in range(h):
            for t in range(n):
                kt = k[t]
                for x in range(wv):
                    out[c, r, x + t] += kt * g[c, r, x]
    return out


@njit(cache=True)
def _vfilter_adjoint(g, k):
    nc, hv, w = g.shape
    n = k.shape[0]
    out = np.zeros((nc, hv + n - 1, w))
    for c in range(nc):
        for r in range(hv):
            for t in range(n):
                kt = k[t]
                for x in range(w):
                    out[c, r + t, x] += kt * g[c, r, x]
    return out


@njit(cache=True)
def _ssim_planes(x, y, k, want_grad):
    """SSIM map mean and (optionally) its gradient w.r.t. x, for (C, H, W) planes."""
    nc, h, w = x.shape
    stack = np.empty((5 * nc, h, w))
    for c in range(nc):
        for r in range(h):
            for q in range(w):
                a = x[c, r, q]
                b = y[c, r, q]
                stack[c, r, q] = a
                stack[nc + c, r, q] = b
                stack[2 * nc + c, r, q] = a * a
                stack[3 * nc + c, r, q] = b * b
                stack[4 * nc + c, r, q] = a * b
    st = _vfilter(_hfilter(stack, k), k)
    hv, wv = st.shape[1], st.shape[2]
    total = 0.0
    back = np.empty((3 * nc, hv, wv))
    scale = 1.0 / (nc * hv * wv)
    for c in range(nc):
        for r in range(hv):
            for q in range(wv):
                mx = st[c, r, q]
                my = st[nc + c, r, q]
                vx = st[2 * nc + c, r, q] - mx * mx
                vy = st[3 * nc + c, r, q] - my * my
                cov = st[4 * nc + c, r, q] - mx * my
                a1 = 2.0 * mx * my + C1
                a2 = 2.0 * cov + C2
                b1 = mx * mx + my * my + C1
                b2 = vx + vy + C2
                sv = (a1 * a2) / (b1 * b2)
                total += sv
                if want_grad:
                    d_mu = (2.0 * my * a2 / (b1 * b2) - 2.0 * mx * sv / b1) * scale
                    d_var = -sv / b2 * scale
                    d_cov = 2.0 * a1 / (b1 * b2) * scale
                    # var_x = E[x^2] - mu_x^2 and cov = E[xy] - mu_x mu_y
                    back[c, r, q] = d_mu - 2.0 * mx * d_var - my * d_cov
                    back[nc + c, r, q] = d_var
                    back[2 * nc + c, r, q] = d_cov
    grad = np.zeros((nc, h, w))
    if want_grad:
        full = _hfilter_adjoint(_vfilter_adjoint(back, k), k)
        for c in range(nc):
            for r in range(h):
                for q in range(w):
                    grad[c, r, q] = (full[c, r, q] + 2.0 * x[c, r, q] * full[nc + c, r, q]
                                     + y[c, r, q] * full[2 * nc + c, r, q])
    return total * scale, grad


def _planes(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(img, 2, 0))


def _ssim_run(x: np.ndarray, y: np.ndarray, want_grad: bool):
    if x.shape[0] < WINDOW or x.shape[1] < WINDOW:
        raise LossShapeError(f"image {x.shape[1]}x{x.shape[0]} is smaller than the {WINDOW}x{WINDOW} window")
    value, grad = _ssim_planes(_planes(x), _planes(y), _KERNEL, want_grad)
    return float(value), np.moveaxis(grad, 0, 2)


def ssim(a, b) -> float:
    """Mean SSIM over channels and all full 11x11 window positions."""
    x, y = _pixels(a), _pixels(b)
    _check_pair(x, y)
    return _ssim_run(x, y, False)[0]


def ssim_with_grad(a, b):
    """SSIM value and its gradient with respect to the first image."""
    x, y = _pixels(a), _pixels(b)
    _check_pair(x, y)
    return _ssim_run(x, y, True)


def l1_masked(rendered, target, mask=None, squared: bool = False) -> float:
    return l1_masked_with_grad(rendered, target, mask, squared)[0]


def l1_masked_with_grad(rendered, target, mask=None, squared: bool = False):
    """Mean per-channel |error| over unmasked pixels (0 when all are masked).

    ``squared=True`` switches to mean squared error under the same masking.
    """
    x, y = _pixels(rendered), _pixels(target)
    _check_pair(x, y)
    keep = ~_mask_values(mask, x.shape)
    n = int(keep.sum()) * x.shape[2]
    if n == 0:
        return 0.0, np.zeros_like(x)
    diff = np.where(keep[..., None], x - y, 0.0)
    if squared:
        return float((diff * diff).sum() / n), 2.0 * diff / n
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def dssim_masked(rendered, target, mask=None) -> float:
    return dssim_masked_with_grad(rendered, target, mask)[0]


def dssim_masked_with_grad(rendered, target, mask=None):
    x, y = _pixels(rendered), _pixels(target)
    _check_pair(x, y)
    m = _mask_values(mask, x.shape)[..., None]
    xm = np.where(m, 0.0, x)
    ym = np.where(m, 0.0, y)
    value, g = ssim_with_grad(xm, ym)
    return 1.0 - value, np.where(m, 0.0, -g)


@dataclass(frozen=True)
class LossResult:
    total: float
    l1: float
    dssim: float
    grad: np.ndarray  # dL/d(rendered), shape (H, W, 3)


def total_loss(rendered, target, mask=None, lam: float = 0.2, squared_l1: bool = False) -> LossResult:
    """``(1 - lam) * L1 + lam * D-SSIM`` and its gradient w.r.t. the rendered image."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    l1, g1 = l1_masked_with_grad(rendered, target, mask, squared_l1)
    ds, g2 = dssim_masked_with_grad(rendered, target, mask)
    total = (1.0 - lam) * l1 + lam * ds
    return LossResult(total, l1, ds, (1.0 - lam) * g1 + lam * g2)

"""Dense-to-sparse weather preprocessing.

Stage one picks a restoration plugin from an instruction and the images,
then removes small bright particles (atmospheric effect filter, AEF). Stage
two looks at the filtered views together and marks lens occlusions (lens
effect detector, LED): droplets sit at the same pixels in every view and blur
what is behind them, so they show up as low cross-view variance plus low
local sharpness.

Feature vectors from the text and image encoders share one 8-slot layout:

====  ======================  ==============================
slot  text encoder            image encoder
====  ======================  ==============================
0     rain vocabulary         streak orientation coherence
1     snow vocabulary         blob isotropy
2     removal verb            (0)
3     negation                (0)
4     lens vocabulary         artifact pixel fraction
5     (0)                     mean artifact luminance
6     (0)                     (0)
7     no evidence             no evidence
====  ======================  ==============================
"""

from __future__ import annotations

import enum
import logging
import math
import re
import shutil
import tempfile
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io
from .manifest import DatasetManifest, save_manifest
from .scene import ImageBuffer, MaskImage

log = logging.getLogger(__name__)

FEATURE_DIM = 8
RAIN_SLOT, SNOW_SLOT, VERB_SLOT, NEGATION_SLOT, LENS_SLOT = 0, 1, 2, 3, 4
FRACTION_SLOT, LUMA_SLOT, NEUTRAL_SLOT = 4, 5, 7
# direction in feature space that reads as "rain rather than snow"
RAIN_AXIS = np.zeros(FEATURE_DIM)
RAIN_AXIS[RAIN_SLOT] = 1.0 / math.sqrt(2.0)
RAIN_AXIS[SNOW_SLOT] = -1.0 / math.sqrt(2.0)

LUMA = np.array([0.299, 0.587, 0.114])
MEDIAN_WINDOW = 7
STREAK_MIN_ASPECT = 3.0
STREAK_MAX_WIDTH = 3.0
STREAK_MAX_ANGLE = 15.0
STREAK_PROFILE = 9
SHARPNESS_SIGMA = 2.0
DEGENERATE_VARIANCE = 1e-10

_RAIN_WORDS = ("rain", "rainy", "raining", "rainfall", "drizzle", "drizzling", "downpour", "streak",
               "streaks", "streaky", "shower", "showers")
_SNOW_WORDS = ("snow", "snowy", "snowing", "snowfall", "snowflake", "snowflakes", "flake", "flakes",
               "blizzard", "sleet", "flurry", "flurries")
_VERBS = ("remove", "removes", "removing", "clear", "clean", "erase", "eliminate", "get", "strip",
          "delete", "derain", "desnow", "restore")
_NEGATIONS = ("not", "no", "don't", "dont", "never", "without", "keep")
_LENS_WORDS = ("lens", "droplet", "droplets", "drop", "drops", "raindrop", "raindrops", "glass", "window")


class UnknownInstructionError(ValueError):
    pass


class PreprocessError(RuntimeError):
    pass


class TaskPlugin(enum.Enum):
    DERAIN = "Derain"
    DESNOW = "Desnow"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class PreprocessConfig:
    theta: float = 0.0
    t: float = 0.5
    aef_contrast_thresh: float = 0.15
    aef_max_blob_px: int = 60
    led_variance_sigma: float = 0.025
    mask_dilate_px: int = 2
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not -1.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [-1, 1], got {self.theta}")
        if not 0.0 < self.t < 1.0:
            raise ValueError(f"t must lie in (0, 1), got {self.t}")
        if self.aef_contrast_thresh <= 0 or self.aef_max_blob_px < 1:
            raise ValueError("aef_contrast_thresh must be > 0 and aef_max_blob_px >= 1")
        if self.led_variance_sigma <= 0:
            raise ValueError("led_variance_sigma must be > 0")
        if self.mask_dilate_px < 0:
            raise ValueError("mask_dilate_px must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class ConfidenceMap:
    values: np.ndarray  # (H, W) in [0, 1]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or not np.all(np.isfinite(v)) or v.min(initial=0.0) < 0.0 or v.max(initial=0.0) > 1.0:
            raise ValueError("confidence values must be a finite (H, W) array in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        v = np.zeros(FEATURE_DIM)
        v[NEUTRAL_SLOT] = 1.0
        return v
    return v / n


# -- plugin selection ---------------------------------------------------------

def text_embed(instruction: str) -> np.ndarray:
    """Keyword indicator features of a weather-removal instruction (unit norm).

    A rain or snow word preceded by a negation within three words does not
    count, so "remove the rain, not the snow" reads as rain only.
    """
    if not instruction or not instruction.strip():
        raise UnknownInstructionError("instruction text is empty")
    words = re.findall(r"[a-z']+", instruction.lower())
    v = np.zeros(FEATURE_DIM)
    for i, w in enumerate(words):
        negated = any(p in _NEGATIONS for p in words[max(0, i - 3):i])
        if w in _RAIN_WORDS and not negated:
            v[RAIN_SLOT] += 1.0
        elif w in _SNOW_WORDS and not negated:
            v[SNOW_SLOT] += 1.0
        elif w in _VERBS:
            v[VERB_SLOT] = 1.0
        elif w in _NEGATIONS:
            v[NEGATION_SLOT] = 1.0
        if w in _LENS_WORDS:
            v[LENS_SLOT] = 1.0
    if v[RAIN_SLOT] == 0.0 and v[SNOW_SLOT] == 0.0:
        raise UnknownInstructionError(f"instruction mentions neither rain nor snow: {instruction!r}")
    return _unit(v)


def luminance(image) -> np.ndarray:
    px = image.pixels if isinstance(image, ImageBuffer) else np.asarray(image, dtype=np.float64)
    return px @ LUMA


def bright_residual(lum: np.ndarray) -> np.ndarray:
    """Luminance minus its 7x7 local median."""
    return lum - ndimage.median_filter(lum, size=MEDIAN_WINDOW, mode="reflect")


def _component_shapes(labels: np.ndarray, n: int):
    """Per-component pixel count, centroid-free second moments and major axis.

    Returns arrays (size, lam_major, lam_minor, axis_x, axis_y) indexed by
    label - 1. Moments include the 1/12 variance of a unit pixel.
    """
    idx = np.arange(1, n + 1)
    ys, xs = np.indices(labels.shape)
    ones = np.ones(labels.shape)
    size = ndimage.sum_labels(ones, labels, idx)
    mx = ndimage.sum_labels(xs, labels, idx) / size
    my = ndimage.sum_labels(ys, labels, idx) / size
    sxx = ndimage.sum_labels(xs * xs, labels, idx) / size - mx * mx + 1.0 / 12.0
    syy = ndimage.sum_labels(ys * ys, labels, idx) / size - my * my + 1.0 / 12.0
    sxy = ndimage.sum_labels(xs * ys, labels, idx) / size - mx * my
    mid = 0.5 * (sxx + syy)
    rad = np.sqrt(np.maximum((0.5 * (sxx - syy)) ** 2 + sxy * sxy, 0.0))
    lam1, lam2 = mid + rad, np.maximum(mid - rad, 1e-12)
    ang = 0.5 * np.arctan2(2.0 * sxy, sxx - syy)
    return size, lam1, lam2, np.cos(ang), np.sin(ang)


def _structure_orientation(res: np.ndarray):
    """Global structure tensor of a residual: (coherence, streak unit vector).

    The streak direction is perpendicular to the dominant gradient.
    """
    gx = ndimage.sobel(res, axis=1, mode="reflect")
    gy = ndimage.sobel(res, axis=0, mode="reflect")
    jxx, jyy, jxy = float((gx * gx).sum()), float((gy * gy).sum()), float((gx * gy).sum())
    tr = jxx + jyy
    if tr <= 0.0:
        return 0.0, np.array([0.0, 1.0])
    coherence = math.sqrt((jxx - jyy) ** 2 + 4.0 * jxy * jxy) / tr
    phi = 0.5 * math.atan2(2.0 * jxy, jxx - jyy)  # dominant gradient angle
    return coherence, np.array([-math.sin(phi), math.cos(phi)])


def image_weather_features(image, contrast: float = 0.15) -> np.ndarray:
    """Bright-artifact statistics of one image in the shared layout (unit norm)."""
    lum = luminance(image)
    res = bright_residual(lum)
    bright = res > contrast
    v = np.zeros(FEATURE_DIM)
    frac = float(bright.mean())
    if bright.any():
        labels, n = ndimage.label(bright, structure=np.ones((3, 3)))
        size, lam1, lam2, _, _ = _component_shapes(labels, n)
        v[SNOW_SLOT] = float(np.sum(size * lam2 / lam1) / size.sum())
        v[RAIN_SLOT], _ = _structure_orientation(np.clip(res - 0.5 * contrast, 0.0, None))
        v[FRACTION_SLOT] = frac
        v[LUMA_SLOT] = float(lum[bright].mean())
    return _unit(v)


def plugin_cosine(text: np.ndarray, image: np.ndarray) -> float:
    """Cosine between the fused text+image query and the rain axis."""
    q = np.asarray(text, dtype=np.float64) + np.asarray(image, dtype=np.float64)
    n = float(np.linalg.norm(q))
    if n == 0.0:
        return 0.0
    return float(q @ RAIN_AXIS / n)


def select_plugin(text: np.ndarray, image: np.ndarray, theta: float = 0.0) -> TaskPlugin:
    """Derain when the cosine exceeds theta (strictly), otherwise Desnow."""
    return decide_plugin(plugin_cosine(text, image), theta)


def decide_plugin(cosine: float, theta: float) -> TaskPlugin:
    return TaskPlugin.DERAIN if cosine > theta else TaskPlugin.DESNOW


# -- atmospheric effect filter ------------------------------------------------

def _fill_from_window(px: np.ndarray, detected: np.ndarray, out: np.ndarray, half: int, targets=None) -> None:
    """Set each target pixel to the median of undetected pixels around it.

    The window grows from ``2 * half + 1`` once if it holds no undetected pixel.
    """
    h, w = detected.shape
    for r, c in zip(*np.nonzero(detected if targets is None else targets)):
        for grow in (half, 2 * half + 1):
            r0, r1 = max(r - grow, 0), min(r + grow + 1, h)
            c0, c1 = max(c - grow, 0), min(c + grow + 1, w)
            keep = ~detected[r0:r1, c0:c1]
            if keep.any():
                out[r, c] = np.median(px[r0:r1, c0:c1][keep], axis=0)
                break


def desnow_detections(image, contrast: float = 0.15, max_blob_px: int = 60) -> np.ndarray:
    """Pixels brighter than their local median by ``contrast`` in small blobs."""
    bright = bright_residual(luminance(image)) > contrast
    if not bright.any():
        return bright
    labels, n = ndimage.label(bright, structure=np.ones((3, 3)))
    size = np.bincount(labels.ravel(), minlength=n + 1)
    small = size <= max_blob_px
    small[0] = False
    return small[labels]


def aef_desnow(image, contrast: float = 0.15, max_blob_px: int = 60) -> ImageBuffer:
    """Replace small bright blobs by the median of undetected 7x7 neighbors."""
    px = image.pixels if isinstance(image, ImageBuffer) else np.asarray(image, dtype=np.float64)
    det = desnow_detections(px, contrast, max_blob_px)
    out = px.copy()
    _fill_from_window(px, det, out, MEDIAN_WINDOW // 2)
    return ImageBuffer(out)


def derain_detections(image, contrast: float = 0.15):
    """Elongated thin bright components aligned with the dominant streak direction.

    Returns (detected mask, streak unit vector (dx, dy)).
    """
    res = bright_residual(luminance(image))
    bright = res > contrast
    _, direction = _structure_orientation(np.clip(res - 0.5 * contrast, 0.0, None))
    if not bright.any():
        return bright, direction
    labels, n = ndimage.label(bright, structure=np.ones((3, 3)))
    size, lam1, lam2, ax, ay = _component_shapes(labels, n)
    aspect = np.sqrt(lam1 / lam2)
    width = np.sqrt(12.0 * lam2)
    cos_ang = np.abs(ax * direction[0] + ay * direction[1])
    ok = (aspect >= STREAK_MIN_ASPECT) & (width <= STREAK_MAX_WIDTH) & (
        cos_ang >= math.cos(math.radians(STREAK_MAX_ANGLE)))
    keep = np.concatenate([[False], ok])
    return keep[labels], direction


def aef_derain(image, contrast: float = 0.15) -> ImageBuffer:
    """Inpaint detected streak pixels from a 9-pixel profile across the streak."""
    px = image.pixels if isinstance(image, ImageBuffer) else np.asarray(image, dtype=np.float64)
    det, direction = derain_detections(px, contrast)
    out = px.copy()
    if not det.any():
        return ImageBuffer(out)
    h, w = det.shape
    nx, ny = -direction[1], direction[0]
    steps = np.arange(STREAK_PROFILE) - STREAK_PROFILE // 2
    leftover = np.zeros_like(det)
    for r, c in zip(*np.nonzero(det)):
        cols = np.floor(c + 0.5 + steps * nx).astype(int)
        rows = np.floor(r + 0.5 + steps * ny).astype(int)
        inside = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
        rows, cols = rows[inside], cols[inside]
        good = ~det[rows, cols]
        if good.any():
            out[r, c] = np.median(px[rows[good], cols[good]], axis=0)
        else:
            leftover[r, c] = True
    if leftover.any():
        _fill_from_window(px, det, out, MEDIAN_WINDOW // 2, targets=leftover)
    return ImageBuffer(out)


def apply_aef(image, plugin: TaskPlugin, config: PreprocessConfig = PreprocessConfig()) -> ImageBuffer:
    if plugin is TaskPlugin.DERAIN:
        return aef_derain(image, config.aef_contrast_thresh)
    return aef_desnow(image, config.aef_contrast_thresh, config.aef_max_blob_px)


# -- lens effect detector -----------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def led_confidence(views, variance_sigma: float = 0.025) -> ConfidenceMap:
    """Shared occlusion confidence from a set of (filtered) views.

    Droplets are static in image space and blurred: the score is high where
    the cross-view color variance (summed over channels) is below its image
    mean and where the views are locally less sharp than average.
    """
    views = list(views)
    if len(views) < 3:
        raise ValueError(f"the lens effect detector needs >= 3 views, got {len(views)}")
    stack = []
    for v in views:
        px = v.pixels if isinstance(v, ImageBuffer) else np.asarray(v, dtype=np.float64)
        if stack and px.shape != stack[0].shape:
            raise ValueError(f"view shapes differ: {px.shape} vs {stack[0].shape}")
        stack.append(px)
    stack = np.stack(stack)
    hw = stack.shape[1:3]
    var = stack.var(axis=0).sum(axis=-1)
    if var.max() <= DEGENERATE_VARIANCE:
        warnings.warn("views show no cross-view variance; occlusion confidence is degenerate", RuntimeWarning,
                      stacklevel=2)
        return ConfidenceMap(np.zeros(hw))
    static = _sigmoid((var.mean() - var) / variance_sigma)
    sharp = np.zeros(hw)
    for px in stack:
        for ch in range(px.shape[2]):
            gx = ndimage.sobel(px[..., ch], axis=1, mode="reflect")
            gy = ndimage.sobel(px[..., ch], axis=0, mode="reflect")
            sharp += ndimage.gaussian_filter(gx * gx + gy * gy, SHARPNESS_SIGMA, mode="reflect")
    sharp /= len(stack)
    ref = sharp.mean()
    blur_cue = ref / (ref + sharp) if ref > 0 else np.ones(hw)
    c = static * blur_cue
    lo, hi = float(c.min()), float(c.max())
    if hi - lo <= 1e-12:
        warnings.warn("occlusion confidence has no contrast", RuntimeWarning, stacklevel=2)
        return ConfidenceMap(np.zeros(hw))
    return ConfidenceMap(np.clip((c - lo) / (hi - lo), 0.0, 1.0))


def binarize_mask(conf, t: float = 0.5) -> MaskImage:
    """M = 1 where C >= t."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"t must lie in (0, 1), got {t}")
    c = conf.values if isinstance(conf, ConfidenceMap) else np.asarray(conf, dtype=np.float64)
    return MaskImage((c >= t).astype(np.uint8))


def mask_postprocess(masks, dilate_px: int = 2):
    """Average per-view masks, re-binarize at 0.5, dilate, replicate per view."""
    masks = list(masks)
    if not masks:
        return []
    stack = np.stack([m.values for m in masks]).astype(np.float64)
    avg = stack.mean(axis=0) >= 0.5
    if dilate_px > 0 and avg.any():
        r = dilate_px
        yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
        avg = ndimage.binary_dilation(avg, structure=(xx * xx + yy * yy) <= r * r)
    out = MaskImage(avg.astype(np.uint8))
    return [out for _ in masks]


def mask_iou(a, b) -> float:
    x = (a.values if isinstance(a, MaskImage) else np.asarray(a)).astype(bool)
    y = (b.values if isinstance(b, MaskImage) else np.asarray(b)).astype(bool)
    union = np.logical_or(x, y).sum()
    return 1.0 if union == 0 else float(np.logical_and(x, y).sum() / union)


# -- whole-dataset driver -----------------------------------------------------

PROCESSED_DIR = "processed"
MASKS_DIR = "masks_pred"


@dataclass
class PreprocessResult:
    manifest: DatasetManifest
    plugin: TaskPlugin
    cosine: float
    confidence: ConfidenceMap
    coverage: float


def choose_plugin(manifest: DatasetManifest, instruction: str, config: PreprocessConfig = PreprocessConfig()):
    """Plugin from the instruction and the mean image features of the train views."""
    text = text_embed(instruction)
    feats = []
    for v in sorted(manifest.train_views, key=lambda v: v.id):
        img = io.load_image(manifest.resolve(v.corrupted_path))
        feats.append(image_weather_features(img, config.aef_contrast_thresh))
    image = _unit(np.mean(feats, axis=0))
    cos = plugin_cosine(text, image)
    return decide_plugin(cos, config.theta), cos


def run_preprocess(manifest: DatasetManifest, instruction: str, config: PreprocessConfig = PreprocessConfig(),
                   backup: bool = True, manifest_path=None) -> PreprocessResult:
    """Select a plugin, filter every view, detect lens occlusions and update the manifest.

    Outputs go to ``processed/`` and ``masks_pred/`` next to the manifest. They
    are first written to a scratch directory, so a failure leaves no partial
    output behind.
    """
    if manifest.root is None:
        raise PreprocessError("manifest has no root directory")
    root = Path(manifest.root)
    plugin, cos = choose_plugin(manifest, instruction, config)
    log.info("selected %s (cosine %.4f, theta %.3f)", plugin, cos, config.theta)

    views = sorted(manifest.views, key=lambda v: v.id)
    raw = [io.load_image(manifest.resolve(v.corrupted_path), expect_shape=(v.camera.height, v.camera.width))
           for v in views]
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        processed = list(pool.map(lambda im: apply_aef(im, plugin, config), raw))
    # LED sees the filtered train views only; its mask is shared by every view
    train_ids = {v.id for v in manifest.train_views}
    conf = led_confidence([p for v, p in zip(views, processed) if v.id in train_ids], config.led_variance_sigma)
    binary = binarize_mask(conf, config.t)
    masks = mask_postprocess([binary] * len(views), config.mask_dilate_px)

    scratch = Path(tempfile.mkdtemp(prefix=".preprocess-", dir=root))
    try:
        (scratch / PROCESSED_DIR).mkdir()
        (scratch / MASKS_DIR).mkdir()
        new_views = []
        for v, img, m in zip(views, processed, masks):
            name = f"view_{v.id:03d}"
            pp, mp = f"{PROCESSED_DIR}/{name}.ppm", f"{MASKS_DIR}/{name}.pgm"
            io.save_image(scratch / pp, img)
            io.save_mask(scratch / mp, m)
            new_views.append(replace(v, processed_path=pp, pred_mask_path=mp))
        for sub in (PROCESSED_DIR, MASKS_DIR):
            if (root / sub).exists():
                shutil.rmtree(root / sub)
            (scratch / sub).rename(root / sub)
    except BaseException:
        for sub in (PROCESSED_DIR, MASKS_DIR):
            if not (scratch / sub).exists() and (root / sub).exists():
                shutil.rmtree(root / sub)
        raise
    finally:
        shutil.rmtree(scratch, ignore_errors=True)
    by_id = {v.id: v for v in new_views}
    updated = manifest.with_views([by_id[v.id] for v in manifest.views])
    save_manifest(manifest_path if manifest_path is not None else root / "manifest.json", updated, backup=backup)
    coverage = float(masks[0].values.mean()) if masks else 0.0
    return PreprocessResult(updated, plugin, cos, conf, coverage)

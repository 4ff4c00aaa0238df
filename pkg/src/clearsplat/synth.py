"""Synthetic adverse-weather multi-view benchmark.

A small analytic scene (textured planes and spheres) is ray traced from a ring
of cameras, then corrupted with per-view snow blobs or rain streaks and a
view-consistent set of lens droplets. Ground-truth masks are written for
every artifact class. Every random draw comes from a generator seeded with
``(seed, view index, layer index)`` so output never depends on scheduling.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import io
from .manifest import DatasetManifest, ViewRecord, save_manifest
from .scene import Camera, ImageBuffer, MaskImage, PointCloud

log = logging.getLogger(__name__)

MASK_ALPHA = 0.1
DROPLET_TONE = 0.5


@dataclass(frozen=True)
class Primitive:
    """A textured plane or sphere.

    Planes are rectangles centred at ``center`` spanned by unit axes ``u`` and
    ``v`` with half extents ``size``; spheres use ``center`` and ``radius``.
    Textures are ``checker``, ``stripes`` or ``solid``. On spheres the texture
    period is counted in longitude/latitude cells (``cells``).
    ``density`` scales the share of sampled points this primitive receives.
    """

    kind: str
    center: tuple
    colors: tuple
    texture: str = "checker"
    u: tuple = (1.0, 0.0, 0.0)
    v: tuple = (0.0, 1.0, 0.0)
    size: tuple = (1.0, 1.0)
    radius: float = 1.0
    period: float = 1.0
    cells: tuple = (8, 4)
    density: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("plane", "sphere"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.texture not in ("checker", "stripes", "solid"):
            raise ValueError(f"unknown texture {self.texture!r}")

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    @property
    def area(self) -> float:
        if self.kind == "plane":
            return 4.0 * self.size[0] * self.size[1]
        return 4.0 * math.pi * self.radius ** 2

    def intersect(self, origin, dirs):
        """Ray distances (inf on miss) for unit directions of shape (..., 3)."""
        c = np.asarray(self.center, dtype=np.float64)
        if self.kind == "plane":
            n = self.normal
            denom = dirs @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = ((c - origin) @ n) / denom
            p = origin + t[..., None] * dirs - c
            inside = (
                (np.abs(p @ np.asarray(self.u)) <= self.size[0])
                & (np.abs(p @ np.asarray(self.v)) <= self.size[1])
            )
            ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & inside
            return np.where(ok, t, np.inf)
        oc = origin - c
        b = dirs @ oc
        disc = b * b - (oc @ oc - self.radius ** 2)
        root = np.sqrt(np.maximum(disc, 0.0))
        t0 = -b - root
        t1 = -b + root
        t = np.where(t0 > 1e-9, t0, t1)
        return np.where((disc >= 0) & (t > 1e-9), t, np.inf)

    def _coords(self, p):
        """Texture coordinates of surface points p (..., 3)."""
        d = np.asarray(p, dtype=np.float64) - np.asarray(self.center)
        if self.kind == "plane":
            return (d @ np.asarray(self.u)) / self.period, (d @ np.asarray(self.v)) / self.period
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        lon = np.arctan2(d[..., 1], d[..., 0]) + math.pi
        lat = np.arcsin(np.clip(d[..., 2], -1.0, 1.0)) + math.pi / 2
        return lon / (2 * math.pi / self.cells[0]), lat / (math.pi / self.cells[1])

    def color_at(self, p) -> np.ndarray:
        cu, cv = self._coords(p)
        if self.texture == "solid":
            idx = np.zeros(np.shape(cu), dtype=np.int64)
        elif self.texture == "stripes":
            idx = np.floor(cu).astype(np.int64) % 2
        else:
            idx = (np.floor(cu).astype(np.int64) + np.floor(cv).astype(np.int64)) % 2
        palette = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if palette.shape[0] == 1:
            palette = np.vstack([palette, palette])
        return palette[idx]

    def sample(self, rng, count: int) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        if self.kind == "plane":
            ab = rng.uniform(-1.0, 1.0, size=(count, 2)) * np.asarray(self.size)
            return c + ab[:, :1] * np.asarray(self.u) + ab[:, 1:] * np.asarray(self.v)
        d = rng.normal(size=(count, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return c + self.radius * d

    def distance_to_surface(self, p) -> np.ndarray:
        d = np.asarray(p, dtype=np.float64) - np.asarray(self.center)
        if self.kind == "sphere":
            return np.abs(np.linalg.norm(d, axis=-1) - self.radius)
        off = np.abs(d @ self.normal)
        over_u = np.maximum(np.abs(d @ np.asarray(self.u)) - self.size[0], 0.0)
        over_v = np.maximum(np.abs(d @ np.asarray(self.v)) - self.size[1], 0.0)
        return np.sqrt(off ** 2 + over_u ** 2 + over_v ** 2)


@dataclass(frozen=True)
class SceneSpec:
    name: str
    primitives: tuple
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))


def default_scene() -> SceneSpec:
    """Checkered ground with three textured spheres.

    Colours are chosen with similar luminance (about 0.38-0.48) so hue carries
    the texture; bright weather artifacts then stand out in luminance.
    """
    return SceneSpec(
        name="checker-garden",
        background=(0.42, 0.42, 0.42),
        primitives=(
            Primitive("plane", (0.0, 0.0, 0.0), ((0.62, 0.40, 0.22), (0.26, 0.48, 0.50)),
                      texture="checker", size=(9.0, 9.0), period=1.5, name="ground"),
            Primitive("sphere", (0.9, 0.5, 0.8), ((0.70, 0.30, 0.30), (0.36, 0.46, 0.28)),
                      texture="stripes", radius=0.8, cells=(8, 4), density=30.0, name="ball-a"),
            Primitive("sphere", (-1.1, 0.6, 0.6), ((0.25, 0.40, 0.75), (0.52, 0.44, 0.20)),
                      texture="checker", radius=0.6, cells=(6, 4), density=30.0, name="ball-b"),
            Primitive("sphere", (0.1, -1.3, 0.5), ((0.30, 0.52, 0.34), (0.64, 0.36, 0.52)),
                      texture="stripes", radius=0.5, cells=(6, 2), density=30.0, name="ball-c"),
        ),
    )


def generate_cameras(count: int, orbit_radius: float, height: float, look_at=(0.0, 0.0, 0.0),
                     fx: float = 120.0, fy: float = 120.0, width: int = 128, height_px: int = 128):
    """Cameras evenly spaced in azimuth on a horizontal circle, all aimed at ``look_at``.

    Camera i sits at azimuth ``360 * i / count`` degrees, ``height`` above ``look_at``.
    """
    if count < 3:
        raise ValueError("need at least 3 cameras")
    if orbit_radius <= 0:
        raise ValueError("orbit radius must be positive")
    target = np.asarray(look_at, dtype=np.float64)
    cams = []
    for i in range(count):
        az = 2.0 * math.pi * i / count
        eye = target + np.array([orbit_radius * math.cos(az), orbit_radius * math.sin(az), height])
        cams.append(Camera.look_at(eye, target, fx, fy, width, height_px))
    return cams


def render_clean_view(scene: SceneSpec, cam: Camera, supersample: int = 1) -> ImageBuffer:
    """Nearest-hit flat-shaded ray tracing; ``supersample`` averages s x s rays per pixel."""
    origin, dirs = cam.pixel_rays(supersample)
    best = np.full(dirs.shape[:2], np.inf)
    color = np.empty(dirs.shape)
    color[:] = scene.background
    for prim in scene.primitives:
        t = prim.intersect(origin, dirs)
        hit = t < best
        if hit.any():
            best = np.where(hit, t, best)
            pts = origin + t[hit][:, None] * dirs[hit]
            color[hit] = prim.color_at(pts)
    s = supersample
    if s > 1:
        color = color.reshape(cam.height, s, cam.width, s, 3).mean(axis=(1, 3))
    return ImageBuffer(color)


def sample_points(scene: SceneSpec, count: int, seed: int) -> PointCloud:
    """``count`` surface points, shared out by area x density, colored by texture."""
    if count < 1 or not scene.primitives:
        raise ValueError("need a nonempty scene and count >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    weights = np.array([p.area * p.density for p in scene.primitives])
    share = weights / weights.sum() * count
    alloc = np.floor(share).astype(int)
    for i in np.argsort(-(share - alloc), kind="stable")[: count - alloc.sum()]:
        alloc[i] += 1
    pos, col = [], []
    for prim, n in zip(scene.primitives, alloc):
        if n == 0:
            continue
        p = prim.sample(rng, int(n))
        pos.append(p)
        col.append(prim.color_at(p))
    return PointCloud(np.concatenate(pos), np.concatenate(col))


@dataclass(frozen=True)
class WeatherParams:
    """One weather layer.

    ``density`` is artifacts per 10^4 pixels (snow, rain). ``size_range`` is the
    rain streak width range; ``blob_sigma`` the snow blob sigma range;
    ``streak_length`` the rain streak length range; all in pixels.
    """

    kind: str
    density: float = 0.0
    size_range: tuple = (1.0, 2.0)
    streak_angle: float = 10.0
    streak_length: tuple = (10.0, 20.0)
    blob_sigma: tuple = (0.8, 2.0)
    droplet_count: int = 0
    droplet_radius_range: tuple = (8.0, 16.0)
    attenuation: float = 0.6
    blur_sigma: float = 4.0
    brightness: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("snow", "rain", "lens_droplets"):
            raise ValueError(f"unknown weather kind {self.kind!r}")
        if self.density < 0:
            raise ValueError("density must be >= 0")
        for name in ("size_range", "streak_length", "blob_sigma", "droplet_radius_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a nonnegative nonempty range, got {(lo, hi)}")
        if self.droplet_count < 0:
            raise ValueError("droplet_count must be >= 0")
        if not 0.0 <= self.attenuation <= 1.0 or not 0.0 <= self.brightness <= 1.0:
            raise ValueError("attenuation and brightness must lie in [0, 1]")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")


def snow(density=15.0, **kw) -> WeatherParams:
    return WeatherParams("snow", density=density, **kw)


def rain(density=8.0, **kw) -> WeatherParams:
    kw.setdefault("brightness", 0.85)
    return WeatherParams("rain", density=density, **kw)


def lens_droplets(count=6, **kw) -> WeatherParams:
    return WeatherParams("lens_droplets", droplet_count=count, **kw)


RECIPES = {
    "none": (),
    "snow": (snow(),),
    "rain": (rain(),),
    "snow+lens": (snow(), lens_droplets()),
    "rain+lens": (rain(), lens_droplets()),
    "lens": (lens_droplets(),),
}


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _artifact_count(params: WeatherParams, width: int, height: int) -> int:
    return int(round(params.density * width * height / 1e4))


def _blend(image: ImageBuffer, layer_alpha: np.ndarray, brightness: float):
    alpha = np.where(layer_alpha > MASK_ALPHA, layer_alpha, 0.0)
    mask = alpha > 0.0
    px = image.pixels.copy()
    px[mask] = px[mask] * (1.0 - alpha[mask, None]) + brightness * alpha[mask, None]
    return ImageBuffer(px), MaskImage(mask.astype(np.uint8))


def _union(alpha, new):
    return 1.0 - (1.0 - alpha) * (1.0 - new)


def snow_alpha(width: int, height: int, params: WeatherParams, rng) -> np.ndarray:
    n = _artifact_count(params, width, height)
    draws = rng.uniform(size=(n, 3))
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    alpha = np.zeros((height, width))
    lo, hi = params.blob_sigma
    for u, v, s in draws:
        cx, cy, sigma = u * width, v * height, lo + (hi - lo) * s
        r = 4.0 * sigma
        c0, c1 = max(int(cx - r), 0), min(int(cx + r) + 1, width)
        r0, r1 = max(int(cy - r), 0), min(int(cy + r) + 1, height)
        if c0 >= c1 or r0 >= r1:
            continue
        d2 = (xs[None, c0:c1] - cx) ** 2 + (ys[r0:r1, None] - cy) ** 2
        alpha[r0:r1, c0:c1] = _union(alpha[r0:r1, c0:c1], np.exp(-d2 / (2 * sigma * sigma)))
    return alpha


def add_snow(image: ImageBuffer, params: WeatherParams, seed: int):
    """Soft bright isotropic blobs; returns (corrupted image, artifact mask)."""
    if params.kind != "snow":
        raise ValueError(f"add_snow needs snow params, got {params.kind!r}")
    alpha = snow_alpha(image.width, image.height, params, _rng(seed, params.seed, 1))
    return _blend(image, alpha, params.brightness)


def rain_alpha(width: int, height: int, params: WeatherParams, rng) -> np.ndarray:
    n = _artifact_count(params, width, height)
    draws = rng.uniform(size=(n, 5))
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    alpha = np.zeros((height, width))
    blur = 3.0
    for u, v, a, ell, w in draws:
        cx, cy = u * width, v * height
        theta = math.radians(params.streak_angle + (a - 0.5) * 6.0)
        length = params.streak_length[0] + (params.streak_length[1] - params.streak_length[0]) * ell
        wid = params.size_range[0] + (params.size_range[1] - params.size_range[0]) * w
        # streak direction measured from image vertical (rows grow downward)
        dx, dy = math.sin(theta), math.cos(theta)
        r = 0.5 * (length + blur) + wid + 1.0
        c0, c1 = max(int(cx - r), 0), min(int(cx + r) + 1, width)
        r0, r1 = max(int(cy - r), 0), min(int(cy + r) + 1, height)
        if c0 >= c1 or r0 >= r1:
            continue
        px = xs[None, c0:c1] - cx
        py = ys[r0:r1, None] - cy
        along = px * dx + py * dy
        across = np.abs(-px * dy + py * dx)
        profile_w = np.clip(0.5 * wid + 0.5 - across, 0.0, 1.0)
        # box of `length` convolved with a `blur`-long box along the streak
        profile_l = np.clip((0.5 * (length + blur) - np.abs(along)) / blur, 0.0, 1.0)
        alpha[r0:r1, c0:c1] = _union(alpha[r0:r1, c0:c1], profile_w * profile_l)
    return alpha


def add_rain(image: ImageBuffer, params: WeatherParams, seed: int):
    """Motion-blurred oriented bright streaks; returns (corrupted image, artifact mask)."""
    if params.kind != "rain":
        raise ValueError(f"add_rain needs rain params, got {params.kind!r}")
    alpha = rain_alpha(image.width, image.height, params, _rng(seed, params.seed, 2))
    return _blend(image, alpha, params.brightness)


def droplet_mask(width: int, height: int, params: WeatherParams, seed: int) -> MaskImage:
    rng = _rng(seed, params.seed, 3)
    draws = rng.uniform(size=(params.droplet_count, 3))
    lo, hi = params.droplet_radius_range
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    mask = np.zeros((height, width), dtype=bool)
    for u, v, s in draws:
        r = lo + (hi - lo) * s
        cx, cy = u * width, v * height
        mask |= (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2 <= r * r
    return MaskImage(mask.astype(np.uint8))


def apply_droplets(image: ImageBuffer, mask: MaskImage, params: WeatherParams) -> ImageBuffer:
    m = mask.values.astype(bool)
    if not m.any():
        return image.copy()
    blurred = gaussian_filter(image.pixels, sigma=(params.blur_sigma, params.blur_sigma, 0), mode="nearest")
    px = image.pixels.copy()
    px[m] = (1.0 - params.attenuation) * blurred[m] + params.attenuation * DROPLET_TONE
    return ImageBuffer(px)


def add_lens_droplets(views, params: WeatherParams, seed: int):
    """One droplet set, fixed in image coordinates, applied to every view.

    Returns (corrupted views, shared mask). Pixels outside the mask are
    returned unchanged.
    """
    views = list(views)
    if params.kind != "lens_droplets":
        raise ValueError(f"add_lens_droplets needs lens_droplets params, got {params.kind!r}")
    if not views:
        raise ValueError("no views given")
    shape = (views[0].height, views[0].width)
    for v in views:
        if (v.height, v.width) != shape:
            raise ValueError("all views must share dimensions")
    mask = droplet_mask(shape[1], shape[0], params, seed)
    return [apply_droplets(v, mask, params) for v in views], mask


@dataclass(frozen=True)
class DatasetLayout:
    clean: str = "clean"
    corrupted: str = "corrupted"
    particles: str = "masks_particles"
    occlusion: str = "masks_occlusion"
    points: str = "points.txt"
    manifest: str = "manifest.json"


LAYOUT = DatasetLayout()


def corrupt_view(clean: ImageBuffer, recipe, seed: int, view_index: int):
    """Apply the particle layers of ``recipe`` to one view.

    Returns (image, particle mask). Lens droplet layers are skipped here.
    """
    img = clean
    mask = np.zeros((clean.height, clean.width), dtype=np.uint8)
    for layer, params in enumerate(recipe):
        if params.kind == "snow":
            img, m = add_snow(img, params, seed * 1_000_003 + view_index * 101 + layer)
        elif params.kind == "rain":
            img, m = add_rain(img, params, seed * 1_000_003 + view_index * 101 + layer)
        else:
            continue
        mask |= m.values
    return img, MaskImage(mask)


def make_dataset(scene: SceneSpec, cameras, recipe, out_dir, seed: int, n_points: int = 3000,
                 supersample: int = 2, test_every: int = 8) -> DatasetManifest:
    """Write a full clean/corrupted multi-view dataset and return its manifest.

    View i goes to the test split when ``i % test_every == 0``.
    """
    out = Path(out_dir)
    for sub in (LAYOUT.clean, LAYOUT.corrupted, LAYOUT.particles, LAYOUT.occlusion):
        (out / sub).mkdir(parents=True, exist_ok=True)
    recipe = tuple(recipe)
    cleans, corrupted, pmasks = [], [], []
    for i, cam in enumerate(cameras):
        clean = render_clean_view(scene, cam, supersample).quantized()
        img, pm = corrupt_view(clean, recipe, seed, i)
        cleans.append(clean)
        corrupted.append(img)
        pmasks.append(pm)
    h, w = cleans[0].height, cleans[0].width
    occlusion = MaskImage.zeros(w, h)
    for layer, params in enumerate(recipe):
        if params.kind == "lens_droplets":
            corrupted, m = add_lens_droplets(corrupted, params, seed * 1_000_003 + 7919 * (layer + 1))
            occlusion = MaskImage(occlusion.values | m.values)

    views = []
    for i, cam in enumerate(cameras):
        name = f"view_{i:03d}"
        rec = ViewRecord(
            id=i,
            split="test" if i % test_every == 0 else "train",
            camera=cam,
            clean_path=f"{LAYOUT.clean}/{name}.ppm",
            corrupted_path=f"{LAYOUT.corrupted}/{name}.ppm",
            gt_particle_mask_path=f"{LAYOUT.particles}/{name}.pgm",
            gt_occlusion_mask_path=f"{LAYOUT.occlusion}/{name}.pgm",
        )
        io.save_image(out / rec.clean_path, cleans[i])
        io.save_image(out / rec.corrupted_path, corrupted[i])
        io.save_mask(out / rec.gt_particle_mask_path, pmasks[i])
        io.save_mask(out / rec.gt_occlusion_mask_path, occlusion)
        views.append(rec)
    io.save_points(out / LAYOUT.points, sample_points(scene, n_points, seed))
    manifest = DatasetManifest(
        scene_name=scene.name, views=views, points_path=LAYOUT.points, seed=seed,
        background=tuple(scene.background), root=out,
    )
    save_manifest(out / LAYOUT.manifest, manifest)
    log.info("wrote %d views to %s", len(views), out)
    return manifest

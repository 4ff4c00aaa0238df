"""Core scene data types: Gaussians, cameras, images, masks and point clouds.

Conventions used throughout the package:

* world space is right-handed with +z up;
* camera space is right-handed with x right, y down and the camera looking
  down +z;
* the image origin is the top-left corner and pixel ``(row, col)`` has its
  center at ``(col + 0.5, row + 0.5)`` in continuous image coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion ``(w, x, y, z)``.

    Accepts a single quaternion of shape (4,) or a batch of shape (N, 4).
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def covariance_from_params(rotation: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """3D covariance ``R diag(exp(2 s)) R^T`` from a quaternion and log-scales.

    Works on single parameters or on batches (leading axis N).
    """
    r = quat_to_rotmat(rotation)
    m = r * np.exp(np.asarray(log_scales, dtype=np.float64))[..., None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Gaussian:
    position: np.ndarray
    rotation: np.ndarray
    log_scales: np.ndarray
    opacity_logit: float
    color: np.ndarray

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def covariance(self) -> np.ndarray:
        return covariance_from_params(self.rotation, self.log_scales)


@dataclass
class GaussianCloud:
    """Structure-of-arrays container for N Gaussians.

    ``positions`` (N,3), ``rotations`` (N,4) as (w,x,y,z), ``log_scales`` (N,3),
    ``opacity_logits`` (N,) and ``colors`` (N,3). Row i of every array is
    Gaussian i; the row index is the Gaussian's ``source_index`` when rendering.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    PARAM_NAMES = ("positions", "rotations", "log_scales", "opacity_logits", "colors")

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(n, 3)

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianCloud":
        gaussians = list(gaussians)
        return cls(
            positions=[g.position for g in gaussians],
            rotations=[g.rotation for g in gaussians],
            log_scales=[g.log_scales for g in gaussians],
            opacity_logits=[g.opacity_logit for g in gaussians],
            colors=[g.color for g in gaussians],
        )

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            self.positions[i].copy(),
            self.rotations[i].copy(),
            self.log_scales[i].copy(),
            float(self.opacity_logits[i]),
            self.colors[i].copy(),
        )

    def __iter__(self):
        for i in range(self.count):
            yield self[i]

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.copy() for k, v in self.params().items()})

    def subset(self, index) -> "GaussianCloud":
        return GaussianCloud(**{k: v[index] for k, v in self.params().items()})

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(
            **{k: np.concatenate([v, getattr(other, k)]) for k, v in self.params().items()}
        )

    def normalize_rotations(self) -> None:
        # rows already unit to 1e-12 are left alone, so the call is idempotent
        n = np.linalg.norm(self.rotations, axis=1)
        off = np.abs(n - 1.0) > 1e-12
        self.rotations[off] /= n[off, None]


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation_wc: np.ndarray
    translation_wc: np.ndarray
    width: int
    height: int
    near_clip: float = 0.01

    def __post_init__(self):
        r = np.asarray(self.rotation_wc, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation_wc, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation_wc", r)
        object.__setattr__(self, "translation_wc", t)
        if self.width < 1 or self.height < 1:
            raise ValueError(f"camera size must be positive, got {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation_wc is not orthonormal")

    @classmethod
    def look_at(cls, eye, target, fx, fy, width, height, up=(0.0, 0.0, 1.0), near_clip=0.01):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        norm = np.linalg.norm(right)
        if norm < 1e-12:
            raise ValueError("view direction is parallel to the up vector")
        right /= norm
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        return cls(fx, fy, width / 2.0, height / 2.0, rot, -rot @ eye, width, height, near_clip)

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation_wc.T @ self.translation_wc

    @property
    def forward(self) -> np.ndarray:
        return self.rotation_wc[2].copy()

    def pixel_rays(self, supersample: int = 1):
        """World-space ray origin and unit directions through sub-pixel centers.

        Returns ``(origin, dirs)`` with ``dirs`` of shape (H*s, W*s, 3).
        """
        s = supersample
        u = (np.arange(self.width * s) + 0.5) / s
        v = (np.arange(self.height * s) + 0.5) / s
        uu, vv = np.meshgrid(u, v)
        d_cam = np.stack(
            [(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)], axis=-1
        )
        d_world = d_cam @ self.rotation_wc
        d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
        return self.center, d_world


def world_to_camera(camera: Camera, p_world) -> np.ndarray:
    return np.asarray(p_world, dtype=np.float64) @ camera.rotation_wc.T + camera.translation_wc


@dataclass
class ImageBuffer:
    """RGB image, float channels in [0, 1], stored as an (H, W, 3) array."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got shape {self.pixels.shape}")
        if not np.isfinite(self.pixels).all():
            raise ValueError("image has non-finite channels")

    @classmethod
    def filled(cls, width: int, height: int, color=(0.0, 0.0, 0.0)) -> "ImageBuffer":
        px = np.empty((height, width, 3))
        px[:] = color
        return cls(px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def copy(self) -> "ImageBuffer":
        return ImageBuffer(self.pixels.copy())

    def quantized(self) -> "ImageBuffer":
        """The image as it reads back after an 8-bit save."""
        return ImageBuffer(np.round(np.clip(self.pixels, 0.0, 1.0) * 255.0) / 255.0)


@dataclass
class MaskImage:
    """Binary (H, W) mask; 1 marks an occluded / artifact pixel."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"expected (H, W) mask, got shape {v.shape}")
        if v.dtype == np.uint8:
            if v.size and v.max() > 1:
                raise ValueError("mask values must be 0 or 1")
        else:
            if not np.isin(v, (0, 1)).all():
                raise ValueError("mask values must be 0 or 1")
            v = v.astype(np.uint8)
        self.values = v

    @classmethod
    def zeros(cls, width: int, height: int) -> "MaskImage":
        return cls(np.zeros((height, width), dtype=np.uint8))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def coverage(self) -> float:
        return float(self.values.mean())


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray = field(default=None)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.colors is None:
            self.colors = np.full_like(self.positions, 0.5)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if self.colors.shape != self.positions.shape:
            raise ValueError("points and colors differ in length")

    def __len__(self) -> int:
        return self.positions.shape[0]

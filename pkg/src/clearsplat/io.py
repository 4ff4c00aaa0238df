"""Bit-exact file formats: PPM/PGM images, binary checkpoints and point lists."""

from __future__ import annotations

import os
import re
import struct
from pathlib import Path

import numpy as np

from .scene import GaussianCloud, ImageBuffer, MaskImage, PointCloud


class ImageFormatError(ValueError):
    """Malformed PPM/PGM header or unsupported variant."""


class ImageDimensionError(ValueError):
    """Pixel payload does not match the header (or the expected) dimensions."""


class ImageIOError(OSError):
    """The file could not be read or written."""


class MaskValueError(ValueError):
    """A PGM mask contains values other than 0 and 255."""


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


_HEADER = re.compile(rb"\A(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def _write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc


def _read_netpbm(path, magic: bytes, channels: int, expect_shape=None) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ImageIOError(f"cannot read {path}: {exc}") from exc
    m = _HEADER.match(data)
    if m is None or m.group(1) != magic:
        raise ImageFormatError(f"{path}: not a binary {magic.decode()} file")
    width, height, maxval = (int(g) for g in m.groups()[1:])
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: empty image {width}x{height}")
    payload = data[m.end():]
    need = width * height * channels
    if len(payload) != need:
        raise ImageDimensionError(
            f"{path}: header says {width}x{height} ({need} bytes) but payload has {len(payload)}"
        )
    if expect_shape is not None and (height, width) != tuple(expect_shape):
        raise ImageDimensionError(f"{path}: expected {expect_shape[1]}x{expect_shape[0]}, got {width}x{height}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape((height, width, channels) if channels > 1 else (height, width))


def image_to_bytes(image: ImageBuffer) -> bytes:
    px = image.pixels
    if not np.isfinite(px).all():
        raise ValueError("image has non-finite channels")
    q = np.round(np.clip(px, 0.0, 1.0) * 255.0).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (image.width, image.height) + q.tobytes()


def save_image(path, image: ImageBuffer) -> None:
    _write_bytes(path, image_to_bytes(image))


def load_image(path, expect_shape=None) -> ImageBuffer:
    """Load a P6 PPM. ``expect_shape`` is an optional (height, width) check."""
    arr = _read_netpbm(path, b"P6", 3, expect_shape)
    return ImageBuffer(arr.astype(np.float64) / 255.0)


def save_mask(path, mask: MaskImage) -> None:
    data = b"P5\n%d %d\n255\n" % (mask.width, mask.height) + (mask.values * 255).astype(np.uint8).tobytes()
    _write_bytes(path, data)


def load_mask(path, expect_shape=None) -> MaskImage:
    arr = _read_netpbm(path, b"P5", 1, expect_shape)
    bad = (arr != 0) & (arr != 255)
    if bad.any():
        raise MaskValueError(f"{path}: {int(bad.sum())} pixels are neither 0 nor 255")
    return MaskImage((arr == 255).astype(np.uint8))


# checkpoint layout: magic, u32 version, u64 count, then five little-endian
# float64 blocks in GaussianCloud.PARAM_NAMES order
CHECKPOINT_MAGIC = b"WGS1"
CHECKPOINT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIQ")
_WIDTHS = (3, 4, 3, 1, 3)


def checkpoint_to_bytes(cloud: GaussianCloud) -> bytes:
    parts = [_CKPT_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cloud.count)]
    for name in GaussianCloud.PARAM_NAMES:
        parts.append(np.ascontiguousarray(getattr(cloud, name), dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, cloud: GaussianCloud) -> None:
    _write_bytes(path, checkpoint_to_bytes(cloud))


def load_checkpoint(path) -> GaussianCloud:
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEAD.size:
        raise CheckpointCorruptError(f"{path}: truncated header")
    magic, version, count = _CKPT_HEAD.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    need = _CKPT_HEAD.size + 8 * count * sum(_WIDTHS)
    if len(data) != need:
        raise CheckpointCorruptError(f"{path}: expected {need} bytes for {count} Gaussians, found {len(data)}")
    arrays = {}
    offset = _CKPT_HEAD.size
    for name, w in zip(GaussianCloud.PARAM_NAMES, _WIDTHS):
        n = count * w
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=offset).astype(np.float64)
        offset += 8 * n
    return GaussianCloud(**arrays)


def save_points(path, points: PointCloud) -> None:
    lines = ["# x y z r g b"]
    for p, c in zip(points.positions, points.colors):
        lines.append(" ".join(repr(float(v)) for v in (*p, *c)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_points(path) -> PointCloud:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            rows.append([float(v) for v in line.split()])
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 6)
    return PointCloud(arr[:, :3], arr[:, 3:])

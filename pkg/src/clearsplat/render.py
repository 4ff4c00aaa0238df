"""Differentiable Gaussian splatting: projection, compositing and backward pass.

The forward pass projects each Gaussian with the local affine approximation of
the pinhole camera (``cov2d = J W Sigma W^T J^T + 0.3 I``), sorts by camera
depth and alpha-composites front to back. The backward pass replays the
contributions recorded by the forward pass, so both passes
see exactly the same gates (alpha clamp, skip threshold, early termination).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _geom, _raster
from .scene import Camera, GaussianCloud, ImageBuffer, sigmoid

DILATION = 0.3
ALPHA_MIN = _raster.ALPHA_MIN
ALPHA_MAX = _raster.ALPHA_MAX
T_MIN = _raster.T_MIN
DEFAULT_TILE = 16


class EmptyCloudError(ValueError):
    pass


class AuxMismatchError(ValueError):
    """A RenderAux was passed with a cloud or camera it was not produced from."""


def set_threads(n: int | None) -> None:
    """Set the worker count for the numba kernels (None: all cores)."""
    import numba

    numba.set_num_threads(numba.config.NUMBA_NUM_THREADS if n is None else max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def jacobian_perspective(p_cam, fx: float, fy: float, near_clip: float = 0.0):
    """Jacobian of the pinhole projection at camera-space point ``p_cam``.

    Returns None (culled) when the point is not in front of the near plane.
    """
    x, y, z = (float(v) for v in p_cam)
    if z <= near_clip:
        return None
    return np.array([[fx / z, 0.0, -fx * x / (z * z)], [0.0, fy / z, -fy * y / (z * z)]])


@dataclass(frozen=True)
class Projected2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray
    source_index: int

    @property
    def conic(self) -> np.ndarray:
        return np.linalg.inv(self.cov2d)

    @property
    def radius(self) -> float:
        a, b, c = self.cov2d[0, 0], self.cov2d[0, 1], self.cov2d[1, 1]
        return _radius(a, b, c)


def _radius(a, b, c):
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum((0.5 * (a - c)) ** 2 + b * b, 0.0))
    return 3.0 * np.sqrt(lam)


@dataclass
class Projection:
    """Batched projection of a whole cloud into one camera.

    Per-Gaussian arrays are indexed by source index; ``visible`` flags
    Gaussians that survive culling.
    """

    visible: np.ndarray
    p_cam: np.ndarray
    jac: np.ndarray
    view_cov: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    mean2d: np.ndarray
    radius: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    rotmat: np.ndarray
    qnorm: np.ndarray
    order: np.ndarray  # visible source indices, front to back

    @property
    def depth(self) -> np.ndarray:
        return self.p_cam[:, 2]


def project_cloud(cloud: GaussianCloud, cam: Camera) -> Projection:
    w = np.ascontiguousarray(cam.rotation_wc, dtype=np.float64)
    p_cam, jac, view_cov, cov2d, conic, mean2d, radius, rot, qnorm, visible = _geom.project(
        np.ascontiguousarray(cloud.positions), np.ascontiguousarray(cloud.rotations),
        np.ascontiguousarray(cloud.log_scales), w, np.asarray(cam.translation_wc, dtype=np.float64),
        float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy), float(cam.near_clip),
        float(cam.width), float(cam.height), DILATION,
    )
    idx = np.flatnonzero(visible)
    order = idx[depth_sort(p_cam[idx, 2])]
    return Projection(
        visible=visible, p_cam=p_cam, jac=jac, view_cov=view_cov, cov2d=cov2d, conic=conic,
        mean2d=mean2d, radius=radius, opacity=sigmoid(cloud.opacity_logits),
        color=np.clip(cloud.colors, 0.0, 1.0), rotmat=rot, qnorm=qnorm, order=order,
    )


def project_gaussian(g, cam: Camera, source_index: int = 0) -> Projected2D | None:
    """Project one Gaussian; None when it is culled."""
    cloud = GaussianCloud.from_gaussians([g])
    proj = project_cloud(cloud, cam)
    if not proj.visible[0]:
        return None
    return Projected2D(
        mean2d=proj.mean2d[0], cov2d=proj.cov2d[0], depth=float(proj.depth[0]),
        opacity=float(proj.opacity[0]), color=proj.color[0], source_index=source_index,
    )


def eval_gaussian_2d(p: Projected2D, pixel) -> float:
    """Opacity-weighted 2D Gaussian at ``pixel``; zero outside the 3-sigma box."""
    d = np.asarray(pixel, dtype=np.float64) - p.mean2d
    r = p.radius
    if abs(d[0]) > r or abs(d[1]) > r:
        return 0.0
    return p.opacity * math.exp(-0.5 * float(d @ p.conic @ d))


def depth_sort(depths) -> np.ndarray:
    """Front-to-back permutation; equal depths keep ascending index order."""
    return np.argsort(np.asarray(depths, dtype=np.float64), kind="stable")


def composite_pixel(contributions, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Front-to-back compositing of ``(color, alpha')`` pairs over a background."""
    out = np.zeros(3)
    trans = 1.0
    for color, a in contributions:
        a = min(float(a), ALPHA_MAX)
        out += np.asarray(color, dtype=np.float64) * a * trans
        trans *= 1.0 - a
        if trans < T_MIN:
            break
    return out + trans * np.asarray(background, dtype=np.float64)


@dataclass
class RenderAux:
    """Everything the backward pass needs to replay one forward render.

    Contributions are stored per tile, in the order they were composited:
    tile ``t`` owns entries ``cap_offsets[t] : cap_offsets[t] + n_events[t]``.
    Each entry records the tile-local pixel, the slot in ``tile_members``
    (which names the sorted Gaussian), ``weight`` (the Gaussian value G),
    ``alpha`` (clamped alpha') and ``trans_before``.
    """

    projection: Projection
    tile: int
    tile_offsets: np.ndarray
    tile_members: np.ndarray
    cap_offsets: np.ndarray
    n_events: np.ndarray
    event_pixel: np.ndarray
    event_slot: np.ndarray
    weight: np.ndarray
    alpha: np.ndarray
    trans_before: np.ndarray
    final_trans: np.ndarray
    raw_image: np.ndarray
    background: np.ndarray
    n_gaussians: int

    def _tile_of(self, row: int, col: int):
        h, w = self.final_trans.shape
        tiles_x = (w + self.tile - 1) // self.tile
        ty, tx = row // self.tile, col // self.tile
        x0, y0 = tx * self.tile, ty * self.tile
        tw = min(x0 + self.tile, w) - x0
        return ty * tiles_x + tx, (row - y0) * tw + (col - x0)

    def contributions(self, row: int, col: int):
        """Front-to-back ``(source_index, G, alpha, T_before)`` tuples of one pixel."""
        t, i = self._tile_of(row, col)
        sl = slice(self.cap_offsets[t], self.cap_offsets[t] + self.n_events[t])
        hit = np.flatnonzero(self.event_pixel[sl] == i) + sl.start
        src = self.projection.order[self.tile_members[self.event_slot[hit]]]
        return list(zip(src.tolist(), self.weight[hit].tolist(), self.alpha[hit].tolist(),
                        self.trans_before[hit].tolist()))

    def contribution_counts(self) -> np.ndarray:
        """Number of recorded contributions per pixel, shape (H, W)."""
        h, w = self.final_trans.shape
        out = np.zeros((h, w), dtype=np.int64)
        for t in range(self.n_events.size):
            ev = self.event_pixel[self.cap_offsets[t]:self.cap_offsets[t] + self.n_events[t]]
            if ev.size == 0:
                continue
            # any pixel of this tile locates it
            tiles_x = (w + self.tile - 1) // self.tile
            y0, x0 = (t // tiles_x) * self.tile, (t % tiles_x) * self.tile
            tw = min(x0 + self.tile, w) - x0
            c = np.bincount(ev, minlength=(min(y0 + self.tile, h) - y0) * tw)
            out[y0:y0 + c.size // tw, x0:x0 + tw] = c.reshape(-1, tw)
        return out


def _sorted_arrays(proj: Projection):
    o = proj.order
    return (
        np.ascontiguousarray(proj.mean2d[o, 0]),
        np.ascontiguousarray(proj.mean2d[o, 1]),
        np.ascontiguousarray(proj.radius[o]),
        np.ascontiguousarray(proj.conic[o, 0]),
        np.ascontiguousarray(proj.conic[o, 1]),
        np.ascontiguousarray(proj.conic[o, 2]),
        np.ascontiguousarray(proj.opacity[o]),
        np.ascontiguousarray(proj.color[o]),
    )


class RenderWorkspace:
    """Event buffers reused across ``render(..., keep_aux=True)`` calls.

    Fresh multi-megabyte buffers on every call cost more in page faults than
    the rasterization itself, so the training loop keeps one workspace. A
    RenderAux made with a workspace is valid only until the next render that
    uses the same workspace.
    """

    def __init__(self):
        self._size = 0
        self._bufs = None

    def buffers(self, n: int):
        if n > self._size:
            size = max(n, int(self._size * 1.5))
            self._bufs = (np.empty(size, dtype=np.int32), np.empty(size, dtype=np.int32),
                          np.empty(size), np.empty(size), np.empty(size))
            self._size = size
        return self._bufs


def render(cloud: GaussianCloud, cam: Camera, keep_aux: bool = False, background=(0.0, 0.0, 0.0),
           tile: int = DEFAULT_TILE, workspace: RenderWorkspace | None = None):
    """Render ``cloud`` from ``cam``. Returns ``(ImageBuffer, RenderAux | None)``.

    ``tile`` only affects speed; any value gives bit-identical output.
    """
    if cloud.count == 0:
        raise EmptyCloudError("cannot render an empty cloud")
    proj = project_cloud(cloud, cam)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    mx, my, rad, ca, cb, cc, op, col = _sorted_arrays(proj)
    t_off, t_mem = _raster.bin_tiles(mx, my, rad, cam.width, cam.height, tile)
    pmin = _raster.power_floor(op)
    if not keep_aux:
        raw, _, _ = _raster.forward(mx, my, rad, ca, cb, cc, op, pmin, col, bg,
                                    cam.width, cam.height, tile, t_off, t_mem)
        return ImageBuffer(np.clip(raw, 0.0, 1.0)), None
    cap = _raster.tile_capacity(mx, my, rad, ca, cb, cc, pmin, cam.width, cam.height, tile, t_off, t_mem)
    ws = workspace if workspace is not None else RenderWorkspace()
    ev = ws.buffers(int(cap[-1]))
    raw, final_t, n_ev = _raster.forward_record(
        mx, my, rad, ca, cb, cc, op, pmin, col, bg, cam.width, cam.height, tile, t_off, t_mem, cap, *ev)
    if (n_ev > np.diff(cap)).any():  # the kernels do not bounds-check
        raise RuntimeError("contribution buffer overflow; tile capacity bound is wrong")
    aux = RenderAux(proj, tile, t_off, t_mem, cap, n_ev, *ev, final_t, raw, bg, cloud.count)
    return ImageBuffer(np.clip(raw, 0.0, 1.0)), aux


@dataclass
class CloudGradients:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    mean2d: np.ndarray  # screen-space position gradient, used for densification

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in GaussianCloud.PARAM_NAMES}


def render_backward(cloud: GaussianCloud, cam: Camera, aux: RenderAux, dl_dimage) -> CloudGradients:
    """Gradients of a scalar loss w.r.t. every Gaussian parameter.

    ``dl_dimage`` is dL/d(rendered image), shape (H, W, 3). Clamped outputs,
    clamped colors, clamped alphas and skipped contributions pass no gradient.
    """
    if aux.n_gaussians != cloud.count or aux.final_trans.shape != (cam.height, cam.width):
        raise AuxMismatchError("RenderAux does not belong to this cloud/camera")
    g_img = np.asarray(dl_dimage, dtype=np.float64)
    if g_img.shape != (cam.height, cam.width, 3):
        raise AuxMismatchError(f"gradient image has shape {g_img.shape}")
    g_img = np.where((aux.raw_image >= 0.0) & (aux.raw_image <= 1.0), g_img, 0.0)
    proj = aux.projection
    mx, my, rad, ca, cb, cc, op, col = _sorted_arrays(proj)
    slots = _raster.backward_tiles(np.ascontiguousarray(g_img), aux.final_trans, aux.background, aux.tile,
                                   aux.tile_offsets, aux.tile_members, aux.cap_offsets, aux.n_events,
                                   aux.event_pixel, aux.event_slot, aux.weight, aux.alpha,
                                   aux.trans_before, mx, my, ca, cb, cc, op, col)
    g2 = _raster.reduce_slots(slots, aux.tile_members, proj.order.size)
    parts = _geom.chain(proj.order, g2, np.ascontiguousarray(cloud.rotations),
                        np.ascontiguousarray(cloud.log_scales), np.ascontiguousarray(cloud.colors),
                        proj.opacity, proj.p_cam, proj.jac, proj.view_cov, proj.conic, proj.rotmat,
                        proj.qnorm, np.ascontiguousarray(cam.rotation_wc, dtype=np.float64),
                        float(cam.fx), float(cam.fy))
    return CloudGradients(*parts)

"""Occlusion-masked Gaussian optimization.

Each iteration renders one training view, evaluates the masked
L1 + D-SSIM loss against its (preprocessed) image, backpropagates through the
rasterizer and takes an Adam step. Gaussians are periodically pruned by
opacity and cloned where the screen-space position gradient is large.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import io
from .losses import total_loss
from .manifest import DatasetManifest
from .render import RenderWorkspace, render, render_backward
from .scene import GaussianCloud, MaskImage, PointCloud, logit

log = logging.getLogger(__name__)


class TrainDataError(ValueError):
    """The manifest lacks images/masks the requested training mode needs."""


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.2
    iterations: int = 5000
    lr_position: float = 1.6e-4
    lr_rotation: float = 1e-3
    lr_log_scales: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    prune_opacity_thresh: float = 0.005
    densify_grad_thresh: float = 2e-5
    densify_interval: int = 300
    prune_interval: int = 300
    densify_start_iter: int = 300
    densify_stop_frac: float = 0.6
    clone_jitter: float = 0.5
    max_gaussians: int = 6000
    init_points: int = 0
    squared_l1: bool = False
    log_interval: int = 100
    checkpoint_interval: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for name, value in self.learning_rates().items():
            if not value > 0:
                raise ValueError(f"learning rate for {name} must be positive")
        if self.max_gaussians < 1:
            raise ValueError("max_gaussians must be >= 1")

    @property
    def densify_stop_iter(self) -> int:
        return int(self.densify_stop_frac * self.iterations)

    def learning_rates(self) -> dict[str, float]:
        return {
            "positions": self.lr_position,
            "rotations": self.lr_rotation,
            "log_scales": self.lr_log_scales,
            "opacity_logits": self.lr_opacity,
            "colors": self.lr_color,
        }


def init_from_points(points: PointCloud, target_count: int = 0, seed: int = 0) -> GaussianCloud:
    """One Gaussian per point with isotropic scale = mean distance to 3 neighbours.

    With ``target_count`` below the point count, points are subsampled; above
    it, points are duplicated with a small jitter. 0 keeps every point.
    """
    pos = points.positions
    col = points.colors
    n = len(points)
    if n == 0:
        raise ValueError("empty point cloud")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A17]))
    target = n if target_count <= 0 else target_count
    if target < n:
        keep = np.sort(rng.choice(n, size=target, replace=False))
        pos, col = pos[keep], col[keep]
    k = min(4, len(pos))
    dist, _ = cKDTree(pos).query(pos, k=k)
    nn = dist[:, 1:].mean(axis=1) if k > 1 else np.ones(len(pos))
    nn = np.maximum(nn, 1e-7)
    if target > n:
        extra = rng.integers(0, n, size=target - n)
        jitter = rng.normal(size=(target - n, 3)) * nn[extra, None] * 0.5
        pos = np.concatenate([pos, pos[extra] + jitter])
        col = np.concatenate([col, col[extra]])
        nn = np.concatenate([nn, nn[extra]])
    m = len(pos)
    rot = np.zeros((m, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(
        positions=pos.copy(),
        rotations=rot,
        log_scales=np.repeat(np.log(nn)[:, None], 3, axis=1),
        opacity_logits=np.full(m, logit(0.1)),
        colors=col.copy(),
    )


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud) -> "OptimizerState":
        params = cloud.params()
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})

    def subset(self, index) -> "OptimizerState":
        return OptimizerState({k: a[index] for k, a in self.m.items()},
                              {k: a[index] for k, a in self.v.items()}, self.step)

    def extend(self, count: int) -> "OptimizerState":
        """Append zero moments for ``count`` new Gaussians."""
        def grow(a):
            return np.concatenate([a, np.zeros((count,) + a.shape[1:])])
        return OptimizerState({k: grow(a) for k, a in self.m.items()},
                              {k: grow(a) for k, a in self.v.items()}, self.step)


def adam_step(cloud: GaussianCloud, gradients, state: OptimizerState, config: TrainConfig):
    """Bias-corrected Adam on every parameter group; renormalizes quaternions.

    Updates ``cloud`` and ``state`` in place and returns them.
    """
    grads = gradients if isinstance(gradients, dict) else gradients.as_dict()
    state.step += 1
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, lr in config.learning_rates().items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        param = getattr(cloud, name)
        param -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    cloud.normalize_rotations()
    return cloud, state


@dataclass
class DensifyStats:
    grad_sum: np.ndarray
    seen: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64))

    def add(self, mean2d_grad: np.ndarray, visible: np.ndarray) -> None:
        self.grad_sum[visible] += np.linalg.norm(mean2d_grad[visible], axis=1)
        self.seen[visible] += 1

    def mean(self) -> np.ndarray:
        return np.where(self.seen > 0, self.grad_sum / np.maximum(self.seen, 1), 0.0)


def densify_and_prune(cloud: GaussianCloud, grad_norms, config: TrainConfig, iteration: int,
                      state: OptimizerState | None = None):
    """Periodic pruning (low opacity) and cloning (high mean screen-space gradient).

    ``grad_norms`` is the per-Gaussian mean accumulated position-gradient norm.
    Returns ``(cloud, state, changed)``; ``state`` follows the same row edits.
    """
    grad_norms = np.asarray(grad_norms, dtype=np.float64)
    changed = False
    if (config.densify_interval > 0 and iteration % config.densify_interval == 0
            and config.densify_start_iter <= iteration < config.densify_stop_iter):
        room = config.max_gaussians - cloud.count
        hot = np.flatnonzero(grad_norms > config.densify_grad_thresh)
        if room > 0 and hot.size:
            if hot.size > room:
                rank = np.argsort(-grad_norms[hot], kind="stable")
                hot = np.sort(hot[rank[:room]])
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, iteration, 0xD15]))
            clones = cloud.subset(hot)
            sigma = np.exp(clones.log_scales)
            clones.positions += rng.normal(size=clones.positions.shape) * sigma * config.clone_jitter
            cloud = cloud.concat(clones)
            grad_norms = np.concatenate([grad_norms, grad_norms[hot]])
            if state is not None:
                state = state.extend(hot.size)
            changed = True
    if config.prune_interval > 0 and iteration % config.prune_interval == 0:
        keep = cloud.opacities >= config.prune_opacity_thresh
        if not keep.all():
            if not keep.any():
                keep[np.argmax(cloud.opacities)] = True
            cloud = cloud.subset(keep)
            if state is not None:
                state = state.subset(keep)
            changed = True
    return cloud, state, changed


@dataclass
class TrainView:
    camera: object
    target: np.ndarray
    mask: MaskImage


def load_train_views(manifest: DatasetManifest, use_processed: bool = True, use_masks: bool = True):
    views = []
    train = manifest.train_views
    if len(train) < 1:
        raise TrainDataError("manifest has no train views")
    for v in train:
        path = v.processed_path if use_processed else v.corrupted_path
        if path is None:
            raise TrainDataError(
                f"view {v.id} has no processed image; run preprocessing first or train with use_processed=false"
            )
        shape = (v.camera.height, v.camera.width)
        img = io.load_image(manifest.resolve(path), expect_shape=shape)
        if use_masks and v.pred_mask_path is not None:
            mask = io.load_mask(manifest.resolve(v.pred_mask_path), expect_shape=shape)
        else:
            mask = MaskImage.zeros(v.camera.width, v.camera.height)
        views.append(TrainView(v.camera, img.pixels, mask))
    return views


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    timing: list = field(default_factory=list)

    FIELDS = ("iteration", "loss", "l1", "dssim", "gaussian_count")

    def write(self, path) -> None:
        """Deterministic columns to ``path``; wall-clock times to ``<stem>_timing.csv``."""
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(self.FIELDS)
            for r in self.rows:
                w.writerow([r[0], f"{r[1]:.9g}", f"{r[2]:.9g}", f"{r[3]:.9g}", r[4]])
        with open(path.with_name(path.stem + "_timing.csv"), "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("iteration", "elapsed_ms"))
            w.writerows(self.timing)


def train(manifest: DatasetManifest, config: TrainConfig, use_processed: bool = True,
          use_masks: bool = True, out_dir=None, init: GaussianCloud | None = None):
    """Optimize a cloud on the manifest's train views. Returns ``(cloud, TrainLog)``.

    With ``out_dir``, checkpoints are written every ``checkpoint_interval``
    iterations and at the end (``final.ckpt``), plus ``train_log.csv``.
    """
    views = load_train_views(manifest, use_processed, use_masks)
    if init is None:
        points = io.load_points(manifest.resolve(manifest.points_path))
        cloud = init_from_points(points, config.init_points, config.seed)
    else:
        cloud = init.copy()
    state = OptimizerState.zeros_like(cloud)
    stats = DensifyStats.zeros(cloud.count)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7EA1]))
    order: list[int] = []
    tlog = TrainLog()
    workspace = RenderWorkspace()
    t0 = time.perf_counter()
    for it in range(1, config.iterations + 1):
        if not order:
            order = list(rng.permutation(len(views)))
        view = views[order.pop()]
        image, aux = render(cloud, view.camera, keep_aux=True, background=manifest.background,
                            workspace=workspace)
        loss = total_loss(image.pixels, view.target, view.mask, config.lam, config.squared_l1)
        grads = render_backward(cloud, view.camera, aux, loss.grad)
        stats.add(grads.mean2d, aux.projection.visible)
        adam_step(cloud, grads, state, config)

        if it == 1 or it % config.log_interval == 0 or it == config.iterations:
            tlog.rows.append((it, loss.total, loss.l1, loss.dssim, cloud.count))
            tlog.timing.append((it, round((time.perf_counter() - t0) * 1000.0, 1)))
            log.debug("iter %d loss %.5f count %d", it, loss.total, cloud.count)

        if it < config.iterations:
            cloud, state, changed = densify_and_prune(cloud, stats.mean(), config, it, state)
            if it % config.densify_interval == 0 or changed:
                stats = DensifyStats.zeros(cloud.count)
        if out is not None and config.checkpoint_interval > 0 and it % config.checkpoint_interval == 0:
            io.save_checkpoint(out / f"iter_{it:06d}.ckpt", cloud)

    if out is not None:
        io.save_checkpoint(out / "final.ckpt", cloud)
        tlog.write(out / "train_log.csv")
    return cloud, tlog

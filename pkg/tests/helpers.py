"""Shared builders for the test modules."""

import numpy as np

from clearsplat.scene import Camera, GaussianCloud, ImageBuffer
from clearsplat.synth import generate_cameras


def random_image(rng, h=16, w=16):
    return rng.uniform(0.0, 1.0, (h, w, 3))


def simple_camera(width=16, height=16, f=20.0):
    return Camera(f, f, width / 2.0, height / 2.0, np.eye(3), np.zeros(3), width, height)


def random_cloud(rng, n, spread=0.3, depth=(2.5, 4.0), log_scale=(np.log(0.5), np.log(1.2)),
                 logit=(-1.5, 1.0), color=(0.1, 0.9)):
    return GaussianCloud(
        positions=np.c_[rng.uniform(-spread, spread, (n, 2)), rng.uniform(*depth, n)],
        rotations=rng.normal(size=(n, 4)),
        log_scales=rng.uniform(*log_scale, (n, 3)),
        opacity_logits=rng.uniform(*logit, n),
        colors=rng.uniform(*color, (n, 3)),
    )


def small_cameras(count=8, size=48, focal=45.0):
    return generate_cameras(count, 3.5, 5.0, (0.0, 0.0, 0.3), focal, focal, size, size)


def flat_image(h, w, value):
    return ImageBuffer(np.full((h, w, 3), value, dtype=np.float64))

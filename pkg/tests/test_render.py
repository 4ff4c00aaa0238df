import math

import numpy as np
import pytest

from clearsplat.render import (ALPHA_MAX, AuxMismatchError, EmptyCloudError, Projected2D, RenderWorkspace,
                               composite_pixel, depth_sort, eval_gaussian_2d, jacobian_perspective, project_gaussian,
                               render, render_backward)
from clearsplat.scene import Camera, Gaussian, GaussianCloud

from helpers import random_cloud, simple_camera


def gaussian(pos, log_scale=0.0, logit=0.0, color=(1.0, 0.0, 0.0), q=(1.0, 0, 0, 0)):
    return Gaussian(np.asarray(pos, float), np.asarray(q, float), np.full(3, float(log_scale)), float(logit),
                    np.asarray(color, float))


def p2d(cov, alpha, mean=(0.0, 0.0)):
    return Projected2D(np.asarray(mean, float), np.asarray(cov, float), 1.0, alpha, np.zeros(3), 0)


# -- jacobian -----------------------------------------------------------------------

def test_jacobian_unit_depth():
    np.testing.assert_array_equal(jacobian_perspective([0, 0, 1], 1, 1), [[1, 0, 0], [0, 1, 0]])


def test_jacobian_depth_two():
    np.testing.assert_array_equal(jacobian_perspective([0, 0, 2], 1, 1), [[0.5, 0, 0], [0, 0.5, 0]])


def test_jacobian_hand_values():
    np.testing.assert_allclose(jacobian_perspective([1, 1, 2], 2, 1), [[1, 0, -0.5], [0, 0.5, -0.25]])


def test_jacobian_behind_near_plane_is_culled():
    assert jacobian_perspective([0, 0, 0.005], 1, 1, near_clip=0.01) is None


# -- projection ---------------------------------------------------------------------

def test_project_identity_camera():
    cam = Camera(100, 100, 64, 64, np.eye(3), np.zeros(3), 128, 128)
    p = project_gaussian(gaussian([0, 0, 1]), cam)
    np.testing.assert_allclose(p.mean2d, [64, 64])
    np.testing.assert_allclose(p.cov2d, (100.0**2 + 0.3) * np.eye(2), rtol=1e-12)
    assert p.depth == 1.0


def test_project_behind_camera_culled():
    cam = Camera(100, 100, 64, 64, np.eye(3), np.zeros(3), 128, 128)
    assert project_gaussian(gaussian([0, 0, -1]), cam) is None


def test_project_off_screen_culled():
    cam = Camera(100, 100, 64, 64, np.eye(3), np.zeros(3), 128, 128)
    assert project_gaussian(gaussian([50, 0, 1], log_scale=math.log(0.01)), cam) is None


def test_project_isotropic_invariant_to_roll():
    g = gaussian([0, 0, 3], log_scale=math.log(0.4))
    c, s = math.cos(math.pi / 2), math.sin(math.pi / 2)
    roll = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    a = project_gaussian(g, Camera(80, 80, 32, 32, np.eye(3), np.zeros(3), 64, 64))
    b = project_gaussian(g, Camera(80, 80, 32, 32, roll, np.zeros(3), 64, 64))
    np.testing.assert_allclose(a.cov2d, b.cov2d, rtol=1e-12)


def test_projected_dilation_floor():
    rng = np.random.default_rng(5)
    cam = simple_camera(64, 64, 40)
    for _ in range(200):
        g = gaussian(np.r_[rng.uniform(-0.3, 0.3, 2), rng.uniform(1, 5)], rng.uniform(-6, 0),
                     q=rng.normal(size=4))
        p = project_gaussian(g, cam)
        if p is not None:
            assert np.allclose(p.cov2d, p.cov2d.T)
            assert np.linalg.eigvalsh(p.cov2d).min() >= 0.3 - 1e-12
            assert p.depth > cam.near_clip


# -- 2D evaluation --------------------------------------------------------------------

def test_eval_at_mean_is_alpha():
    assert eval_gaussian_2d(p2d(np.eye(2), 0.7), [0, 0]) == 0.7


def test_eval_unit_cov_offset():
    assert eval_gaussian_2d(p2d(np.eye(2), 1.0), [1, 0]) == pytest.approx(0.606531, abs=1e-6)


def test_eval_anisotropic():
    assert eval_gaussian_2d(p2d(np.diag([4.0, 1]), 0.5), [2, 0]) == pytest.approx(0.303265, abs=1e-6)


def test_eval_outside_box_is_zero():
    assert eval_gaussian_2d(p2d(np.eye(2), 1.0), [3.01, 0]) == 0.0


# -- depth sort -------------------------------------------------------------------------

def test_depth_sort_basic():
    assert depth_sort([3, 1, 2]).tolist() == [1, 2, 0]


def test_depth_sort_tie_break_by_index():
    # two Gaussians at equal depth stored as source indices 5 and 2
    depths = np.full(6, 9.0)
    depths[[5, 2]] = 1.0
    assert depth_sort(depths)[:2].tolist() == [2, 5]


def test_depth_sort_sorted_identity():
    assert depth_sort([1, 2, 3, 4]).tolist() == [0, 1, 2, 3]


# -- compositing ------------------------------------------------------------------------

def test_composite_single():
    np.testing.assert_allclose(composite_pixel([((1, 0, 0), 0.99)]), [0.99, 0, 0])


def test_composite_two():
    np.testing.assert_allclose(composite_pixel([((1, 0, 0), 0.5), ((0, 1, 0), 0.5)]), [0.5, 0.25, 0])


def test_composite_empty_is_background():
    np.testing.assert_array_equal(composite_pixel([], background=(0.2, 0.3, 0.4)), [0.2, 0.3, 0.4])


def test_composite_early_termination():
    # T after 3 x 0.99 is 1e-6 < 1e-4: a fourth contribution is ignored
    out = composite_pixel([((0, 0, 0), 0.99)] * 3 + [((1, 1, 1), 0.99)])
    assert np.abs(out).max() < 1e-5


# -- render -----------------------------------------------------------------------------

def test_render_all_culled_gives_background():
    cloud = GaussianCloud.from_gaussians([gaussian([0, 0, -2])])
    img, _ = render(cloud, simple_camera(), background=(0.1, 0.2, 0.3))
    assert (img.pixels == np.array([0.1, 0.2, 0.3])).all()


def test_render_huge_opaque_red():
    cloud = GaussianCloud.from_gaussians([gaussian([0, 0, 3], log_scale=math.log(5.0), logit=20.0)])
    img, _ = render(cloud, simple_camera())
    np.testing.assert_allclose(img.pixels[8, 8], [0.99, 0, 0], atol=1e-9)


def test_render_empty_cloud_raises():
    empty = GaussianCloud(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))
    with pytest.raises(EmptyCloudError):
        render(empty, simple_camera())


def _big_cloud(n=2000, seed=0):
    rng = np.random.default_rng(seed)
    return random_cloud(rng, n, spread=1.5, depth=(3.0, 6.0), log_scale=(-4.0, -2.0), logit=(-2, 3),
                        color=(-0.2, 1.2))


def test_render_deterministic_2k():
    cloud, cam = _big_cloud(), simple_camera(128, 128, 120)
    a, _ = render(cloud, cam)
    b, _ = render(cloud, cam)
    assert a.pixels.tobytes() == b.pixels.tobytes()


@pytest.mark.parametrize("tile", [1, 7, 16, 64, 200])
def test_render_tile_size_invariant(tile):
    cloud, cam = _big_cloud(500, seed=1), simple_camera(96, 80, 100)
    ref, _ = render(cloud, cam)
    img, aux = render(cloud, cam, tile=tile, keep_aux=True)
    assert img.pixels.tobytes() == ref.pixels.tobytes()


def test_render_matches_reference_compositor():
    # per-pixel reference: global depth sort, eval_gaussian_2d, composite_pixel
    rng = np.random.default_rng(11)
    cloud = random_cloud(rng, 12, spread=0.6, log_scale=(-2.5, -0.5), logit=(-1, 4))
    cam = simple_camera(24, 20, 25)
    img, _ = render(cloud, cam, background=(0.1, 0.0, 0.2))
    projected = [project_gaussian(cloud[i], cam, i) for i in range(cloud.count)]
    projected = [p for p in projected if p is not None]
    order = depth_sort([p.depth for p in projected])
    for row in range(cam.height):
        for col in range(cam.width):
            contribs = []
            for k in order:
                p = projected[k]
                a = eval_gaussian_2d(p, [col + 0.5, row + 0.5])
                if a >= 1 / 255:
                    contribs.append((p.color, min(a, ALPHA_MAX)))
            ref = np.clip(composite_pixel(contribs, background=(0.1, 0.0, 0.2)), 0, 1)
            np.testing.assert_allclose(img.pixels[row, col], ref, atol=1e-12)


def test_behind_camera_gaussian_changes_nothing():
    rng = np.random.default_rng(2)
    cloud = random_cloud(rng, 20, log_scale=(-2, -0.5))
    behind = GaussianCloud.from_gaussians([gaussian([0, 0, -3], log_scale=2.0, logit=5.0)])
    cam = simple_camera(32, 32, 40)
    a, _ = render(cloud, cam)
    b, _ = render(cloud.concat(behind), cam)
    c, _ = render(behind.concat(cloud), cam)
    assert a.pixels.tobytes() == b.pixels.tobytes() == c.pixels.tobytes()


def test_aux_records_invariants():
    cloud, cam = _big_cloud(300, seed=4), simple_camera(40, 40, 50)
    img, aux = render(cloud, cam, keep_aux=True)
    counts = aux.contribution_counts()
    assert counts.sum() == int(aux.n_events.sum()) and counts.max() > 1
    for row in range(0, 40, 3):
        for col in range(0, 40, 3):
            c = aux.contributions(row, col)
            assert len(c) == counts[row, col]
            t = 1.0
            for _, g, a, tb in c:
                assert tb == t
                assert 1 / 255 <= a <= 0.99
                t *= 1.0 - a
            assert aux.final_trans[row, col] == pytest.approx(t, abs=1e-15)


# -- backward -----------------------------------------------------------------------------

def test_backward_zero_gradient():
    rng = np.random.default_rng(0)
    cloud, cam = random_cloud(rng, 5), simple_camera()
    _, aux = render(cloud, cam, keep_aux=True)
    g = render_backward(cloud, cam, aux, np.zeros((16, 16, 3)))
    for arr in g.as_dict().values():
        assert not arr.any()


def test_backward_color_of_single_gaussian():
    cloud = GaussianCloud.from_gaussians([gaussian([0, 0, 3], log_scale=math.log(0.3), logit=0.5,
                                                   color=(0.5, 0.5, 0.5))])
    cam = simple_camera()
    _, aux = render(cloud, cam, keep_aux=True)
    dl = np.zeros((16, 16, 3))
    dl[8, 8, 0] = 1.0
    g = render_backward(cloud, cam, aux, dl)
    (_, _, a, tb), = aux.contributions(8, 8)
    np.testing.assert_allclose(g.colors[0], [a * tb, 0, 0], rtol=1e-14)


def _fd_check(cloud, cam, target, h=1e-4):
    def loss(c):
        img, _ = render(c, cam)
        return float(((img.pixels - target) ** 2).sum())

    img, aux = render(cloud, cam, keep_aux=True)
    grads = render_backward(cloud, cam, aux, 2 * (img.pixels - target))
    worst = 0.0
    for name in GaussianCloud.PARAM_NAMES:
        arr, ga = getattr(cloud, name), getattr(grads, name)
        for idx in np.ndindex(arr.shape):
            plus, minus = cloud.copy(), cloud.copy()
            getattr(plus, name)[idx] += h
            getattr(minus, name)[idx] -= h
            fd = (loss(plus) - loss(minus)) / (2 * h)
            an = ga[idx]
            mag = max(abs(fd), abs(an))
            err = abs(fd - an) if mag < 1e-3 else abs(fd - an) / mag
            worst = max(worst, err / (1e-6 if mag < 1e-3 else 1e-3))
    return worst  # <= 1 means within tolerance


@pytest.mark.parametrize("seed", range(6))
def test_backward_matches_fd_with_gates_active(seed):
    # smaller Gaussians: box cutoff, skip threshold and overlap all occur in the image;
    # these fixed seeds keep every probe away from a gate boundary
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 5)
    assert _fd_check(cloud, simple_camera(), rng.uniform(0, 1, (16, 16, 3))) <= 1.0


def test_backward_aux_mismatch():
    rng = np.random.default_rng(0)
    cloud, cam = random_cloud(rng, 5), simple_camera()
    _, aux = render(cloud, cam, keep_aux=True)
    with pytest.raises(AuxMismatchError):
        render_backward(random_cloud(rng, 4), cam, aux, np.zeros((16, 16, 3)))
    with pytest.raises(AuxMismatchError):
        render_backward(cloud, simple_camera(8, 8), aux, np.zeros((8, 8, 3)))


def test_backward_deterministic_across_tiles_per_tile_size():
    cloud, cam = _big_cloud(400, seed=9), simple_camera(64, 64, 70)
    target = np.random.default_rng(0).uniform(size=(64, 64, 3))
    img, aux = render(cloud, cam, keep_aux=True)
    g1 = render_backward(cloud, cam, aux, img.pixels - target)
    g2 = render_backward(cloud, cam, aux, img.pixels - target)
    for name in GaussianCloud.PARAM_NAMES:
        assert getattr(g1, name).tobytes() == getattr(g2, name).tobytes()
    _, aux8 = render(cloud, cam, keep_aux=True, tile=8)
    g3 = render_backward(cloud, cam, aux8, img.pixels - target)
    for name in GaussianCloud.PARAM_NAMES:
        np.testing.assert_allclose(getattr(g3, name), getattr(g1, name), rtol=1e-9, atol=1e-14)


def test_workspace_reuse_matches_fresh_buffers():
    cam = simple_camera(48, 48, 50)
    ws = RenderWorkspace()
    for seed in range(4):
        cloud = _big_cloud(200 + 100 * seed, seed=seed)
        dl = np.random.default_rng(seed).uniform(-1, 1, (48, 48, 3))
        img_a, aux_a = render(cloud, cam, keep_aux=True)
        img_b, aux_b = render(cloud, cam, keep_aux=True, workspace=ws)
        assert img_a.pixels.tobytes() == img_b.pixels.tobytes()
        ga = render_backward(cloud, cam, aux_a, dl).as_dict()
        gb = render_backward(cloud, cam, aux_b, dl).as_dict()
        assert all(ga[k].tobytes() == gb[k].tobytes() for k in ga)
        assert (aux_b.n_events <= np.diff(aux_b.cap_offsets)).all()

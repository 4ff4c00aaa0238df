import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clearsplat import io
from clearsplat.manifest import (DanglingPathError, DatasetManifest, ManifestSchemaError, ManifestValidationError,
                                 ViewRecord, load_manifest, manifest_to_dict, save_manifest)
from clearsplat.scene import (Camera, GaussianCloud, ImageBuffer, MaskImage, PointCloud, covariance_from_params,
                              quat_to_rotmat, world_to_camera)

from helpers import simple_camera


def rot_z(deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def quat_axis(axis, deg):
    h = math.radians(deg) / 2
    a = np.asarray(axis, float) / np.linalg.norm(axis)
    return np.r_[math.cos(h), math.sin(h) * a]


# -- covariance -------------------------------------------------------------------

def test_covariance_identity():
    assert np.array_equal(covariance_from_params(np.array([1.0, 0, 0, 0]), np.zeros(3)), np.eye(3))


def test_covariance_scaled_axis():
    cov = covariance_from_params(np.array([1.0, 0, 0, 0]), np.array([math.log(2), 0, 0]))
    np.testing.assert_allclose(cov, np.diag([4.0, 1, 1]), atol=1e-12)


def test_covariance_rotated_about_z():
    # hand rotation: Rz(90) diag(4,1,1) Rz(90)^T swaps the x and y variances
    cov = covariance_from_params(quat_axis([0, 0, 1], 90), np.array([math.log(2), 0, 0]))
    np.testing.assert_allclose(cov, np.diag([1.0, 4, 1]), atol=1e-12)


def test_quat_matches_rotation_matrix():
    np.testing.assert_allclose(quat_to_rotmat(quat_axis([0, 0, 1], 30)), rot_z(30), atol=1e-15)


def test_covariance_symmetric_psd_10k():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(10_000, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    s = rng.uniform(-4, 2, (10_000, 3))
    for qi, si in zip(q, s):
        cov = covariance_from_params(qi, si)
        assert np.abs(cov - cov.T).max() <= 1e-12 * max(1.0, np.abs(cov).max())
        assert np.linalg.eigvalsh(cov).min() >= -1e-12 * np.abs(cov).max()


# -- cameras ----------------------------------------------------------------------

def test_world_to_camera_identity():
    cam = Camera(1, 1, 0, 0, np.eye(3), np.zeros(3), 4, 4)
    np.testing.assert_array_equal(world_to_camera(cam, [1, 2, 3]), [1, 2, 3])


def test_world_to_camera_translation():
    cam = Camera(1, 1, 0, 0, np.eye(3), [0, 0, 5], 4, 4)
    np.testing.assert_array_equal(world_to_camera(cam, [0, 0, 0]), [0, 0, 5])


def test_world_to_camera_rotation_about_y():
    # right-handed Ry(90): x axis goes to -z
    ry = np.array([[0, 0, 1.0], [0, 1, 0], [-1, 0, 0]])
    cam = Camera(1, 1, 0, 0, ry, np.zeros(3), 4, 4)
    np.testing.assert_allclose(world_to_camera(cam, [1, 0, 0]), [0, 0, -1], atol=1e-15)


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, np.ones((3, 3)), np.zeros(3), 4, 4)
    with pytest.raises(ValueError):
        Camera(0, 1, 0, 0, np.eye(3), np.zeros(3), 4, 4)
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, np.eye(3), np.zeros(3), 0, 4)


def test_look_at_points_forward_axis_at_target():
    cam = Camera.look_at([3, 1, 2], [0, 0, 0.5], 50, 50, 32, 32)
    p = world_to_camera(cam, [0, 0, 0.5])
    assert abs(p[0]) < 1e-12 and abs(p[1]) < 1e-12 and p[2] > 0
    np.testing.assert_allclose(cam.center, [3, 1, 2], atol=1e-12)


def test_gaussian_invariants():
    cloud = GaussianCloud(np.zeros((2, 3)), [[2, 0, 0, 0], [0, 0, 3, 0]], np.full((2, 3), -50.0), [-20, 20],
                          np.zeros((2, 3)))
    assert np.all((cloud.opacities > 0) & (cloud.opacities < 1))
    assert np.all(np.exp(cloud.log_scales) > 0)
    cloud.normalize_rotations()
    assert np.allclose(np.linalg.norm(cloud.rotations, axis=1), 1, atol=1e-12)
    g = cloud[1]
    assert g.opacity == pytest.approx(1 / (1 + math.exp(-20)))


# -- images -------------------------------------------------------------------------

def test_image_white_bytes(tmp_path):
    io.save_image(tmp_path / "a.ppm", ImageBuffer(np.ones((1, 1, 3))))
    assert (tmp_path / "a.ppm").read_bytes().endswith(bytes([255, 255, 255]))
    np.testing.assert_array_equal(io.load_image(tmp_path / "a.ppm").pixels, np.ones((1, 1, 3)))


def test_image_black_roundtrip(tmp_path):
    io.save_image(tmp_path / "a.ppm", ImageBuffer(np.zeros((1, 1, 3))))
    np.testing.assert_array_equal(io.load_image(tmp_path / "a.ppm").pixels, np.zeros((1, 1, 3)))


def test_image_half_values_within_quantization(tmp_path):
    px = np.array([[[0.5, 0, 0], [0, 0.5, 0]]])
    io.save_image(tmp_path / "a.ppm", ImageBuffer(px))
    back = io.load_image(tmp_path / "a.ppm").pixels
    assert back.shape == (1, 2, 3)
    assert np.abs(back - px).max() <= 1 / 255


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_image_roundtrip_property(tmp_path_factory, h, w, seed):
    px = np.random.default_rng(seed).uniform(0, 1, (h, w, 3))
    path = tmp_path_factory.mktemp("img") / "x.ppm"
    io.save_image(path, ImageBuffer(px))
    assert np.abs(io.load_image(path).pixels - px).max() <= 0.5 / 255 + 1e-12


def test_image_errors(tmp_path):
    (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(io.ImageFormatError):
        io.load_image(tmp_path / "bad.ppm")
    (tmp_path / "short.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(io.ImageDimensionError):
        io.load_image(tmp_path / "short.ppm")
    io.save_image(tmp_path / "ok.ppm", ImageBuffer(np.zeros((2, 3, 3))))
    with pytest.raises(io.ImageDimensionError):
        io.load_image(tmp_path / "ok.ppm", expect_shape=(3, 2))
    with pytest.raises(io.ImageIOError):
        io.load_image(tmp_path / "missing.ppm")
    with pytest.raises(ValueError):
        ImageBuffer(np.full((1, 1, 3), np.nan))


# -- masks --------------------------------------------------------------------------

def test_mask_zeros_roundtrip(tmp_path):
    io.save_mask(tmp_path / "m.pgm", MaskImage.zeros(3, 2))
    m = io.load_mask(tmp_path / "m.pgm")
    assert m.values.shape == (2, 3) and not m.values.any()


def test_mask_ones_bytes(tmp_path):
    io.save_mask(tmp_path / "m.pgm", MaskImage(np.ones((2, 2), np.uint8)))
    assert (tmp_path / "m.pgm").read_bytes().endswith(bytes([255] * 4))


def test_mask_checkerboard_exact(tmp_path):
    v = np.array([[1, 0], [0, 1]], np.uint8)
    io.save_mask(tmp_path / "m.pgm", MaskImage(v))
    np.testing.assert_array_equal(io.load_mask(tmp_path / "m.pgm").values, v)


def test_mask_rejects_nonbinary(tmp_path):
    (tmp_path / "m.pgm").write_bytes(b"P5\n2 1\n255\n" + bytes([0, 17]))
    with pytest.raises(io.MaskValueError):
        io.load_mask(tmp_path / "m.pgm")
    with pytest.raises(ValueError):
        MaskImage(np.array([[0, 2]]))


# -- checkpoints ---------------------------------------------------------------------

def _cloud(n, seed=0):
    rng = np.random.default_rng(seed)
    return GaussianCloud(rng.normal(size=(n, 3)), rng.normal(size=(n, 4)), rng.normal(size=(n, 3)),
                         rng.normal(size=n), rng.normal(size=(n, 3)))


@pytest.mark.parametrize("n", [1, 1000])
def test_checkpoint_roundtrip_bit_identical(tmp_path, n):
    c = _cloud(n)
    io.save_checkpoint(tmp_path / "c.ckpt", c)
    back = io.load_checkpoint(tmp_path / "c.ckpt")
    for name in GaussianCloud.PARAM_NAMES:
        assert getattr(back, name).tobytes() == getattr(c, name).tobytes()


def test_checkpoint_truncated_and_version(tmp_path):
    io.save_checkpoint(tmp_path / "c.ckpt", _cloud(3))
    data = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:-7])
    with pytest.raises(io.CheckpointCorruptError):
        io.load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "v.ckpt").write_bytes(data[:4] + (99).to_bytes(4, "little") + data[8:])
    with pytest.raises(io.CheckpointVersionError):
        io.load_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(io.CheckpointCorruptError):
        io.load_checkpoint(tmp_path / "m.ckpt")


def test_points_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    pc = PointCloud(rng.normal(size=(20, 3)), rng.uniform(size=(20, 3)))
    io.save_points(tmp_path / "p.txt", pc)
    back = io.load_points(tmp_path / "p.txt")
    assert back.positions.tobytes() == pc.positions.tobytes()
    assert back.colors.tobytes() == pc.colors.tobytes()


# -- manifests -----------------------------------------------------------------------

def _write_views(root, n=2, test_ids=(0,)):
    for i in range(n):
        io.save_image(root / f"c{i}.ppm", ImageBuffer(np.zeros((16, 16, 3))))
    (root / "pts.txt").write_text("# x y z r g b\n0 0 0 1 1 1\n")
    cam = simple_camera()
    views = [ViewRecord(i, "test" if i in test_ids else "train", cam, f"c{i}.ppm", f"c{i}.ppm") for i in range(n)]
    return DatasetManifest("t", views, "pts.txt", 0, root=root)


def test_manifest_roundtrip(tmp_path):
    m = _write_views(tmp_path, 3)
    save_manifest(tmp_path / "manifest.json", m)
    back = load_manifest(tmp_path / "manifest.json")
    assert manifest_to_dict(back) == manifest_to_dict(m)


def test_manifest_dangling_path(tmp_path):
    m = _write_views(tmp_path, 3)
    save_manifest(tmp_path / "manifest.json", m)
    (tmp_path / "c1.ppm").unlink()
    with pytest.raises(DanglingPathError):
        load_manifest(tmp_path / "manifest.json")


def test_manifest_zero_train_views(tmp_path):
    m = _write_views(tmp_path, 2, test_ids=(0, 1))
    save_manifest(tmp_path / "manifest.json", m)
    with pytest.raises(ManifestValidationError):
        load_manifest(tmp_path / "manifest.json")


def test_manifest_unknown_key_and_backup(tmp_path):
    m = _write_views(tmp_path, 3)
    path = tmp_path / "manifest.json"
    save_manifest(path, m)
    first = path.read_bytes()
    save_manifest(path, m.with_views(m.views[::-1]), backup=True)
    assert (tmp_path / "manifest.json.bak").read_bytes() == first
    d = json.loads(first)
    d["extra"] = 1
    path.write_text(json.dumps(d))
    with pytest.raises(ManifestSchemaError):
        load_manifest(path)


def _required_paths(d):
    """(container path, key) for every required field of a manifest dict."""
    out = [((), k) for k in ("format", "scene_name", "seed", "points_path", "views")]
    out += [(("views", 0), k) for k in ("id", "split", "camera", "clean_path", "corrupted_path")]
    out += [(("views", 0, "camera"), k) for k in ("fx", "fy", "cx", "cy", "width", "height", "rotation_wc",
                                                   "translation_wc")]
    return out


def test_manifest_rejects_every_required_field_deletion(tmp_path):
    m = _write_views(tmp_path, 3)
    base = manifest_to_dict(m)
    for container, key in _required_paths(base):
        d = json.loads(json.dumps(base))
        node = d
        for c in container:
            node = node[c]
        del node[key]
        (tmp_path / "x.json").write_text(json.dumps(d))
        with pytest.raises((ManifestSchemaError, ManifestValidationError)):
            load_manifest(tmp_path / "x.json")

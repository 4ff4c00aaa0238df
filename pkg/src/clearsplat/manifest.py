"""Dataset manifest: the JSON index tying cameras to per-view image files.

The schema is documented in ``docs/formats.md``. All file paths are stored
relative to the directory holding the manifest.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .scene import Camera

MANIFEST_FORMAT = "clearsplat-manifest/1"

_TOP_REQUIRED = ("format", "scene_name", "seed", "points_path", "views")
_TOP_OPTIONAL = ("background",)
_VIEW_REQUIRED = ("id", "split", "camera", "clean_path", "corrupted_path")
_VIEW_OPTIONAL = ("processed_path", "gt_particle_mask_path", "gt_occlusion_mask_path", "pred_mask_path")
_CAMERA_REQUIRED = ("fx", "fy", "cx", "cy", "width", "height", "rotation_wc", "translation_wc")
_CAMERA_OPTIONAL = ("near_clip",)
PATH_FIELDS = ("clean_path", "corrupted_path") + _VIEW_OPTIONAL


class ManifestError(ValueError):
    pass


class ManifestSchemaError(ManifestError):
    """Missing or unknown keys, or values of the wrong type."""


class DanglingPathError(ManifestError):
    """A referenced file does not exist."""


class ManifestValidationError(ManifestError):
    """Structurally valid, but unusable (e.g. no train views)."""


@dataclass(frozen=True)
class ViewRecord:
    id: int
    split: str
    camera: Camera
    clean_path: str
    corrupted_path: str
    processed_path: str | None = None
    gt_particle_mask_path: str | None = None
    gt_occlusion_mask_path: str | None = None
    pred_mask_path: str | None = None


@dataclass
class DatasetManifest:
    scene_name: str
    views: list[ViewRecord]
    points_path: str
    seed: int
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    root: Path = field(default=Path("."), compare=False)

    @property
    def train_views(self) -> list[ViewRecord]:
        return [v for v in self.views if v.split == "train"]

    @property
    def test_views(self) -> list[ViewRecord]:
        return [v for v in self.views if v.split == "test"]

    def resolve(self, rel: str | None) -> Path | None:
        return None if rel is None else self.root / rel

    def view(self, view_id: int) -> ViewRecord:
        for v in self.views:
            if v.id == view_id:
                return v
        raise KeyError(f"no view with id {view_id}")

    def with_views(self, views) -> "DatasetManifest":
        return replace(self, views=list(views))

    def validate(self, check_files: bool = True) -> None:
        if len(self.train_views) < 2:
            raise ManifestValidationError(f"need >= 2 train views, found {len(self.train_views)}")
        if len(self.test_views) < 1:
            raise ManifestValidationError("need >= 1 test view")
        ids = [v.id for v in self.views]
        if len(set(ids)) != len(ids):
            raise ManifestValidationError("duplicate view ids")
        if check_files:
            paths = [self.points_path]
            for v in self.views:
                paths.extend(getattr(v, f) for f in PATH_FIELDS)
            for rel in paths:
                if rel is not None and not (self.root / rel).is_file():
                    raise DanglingPathError(f"referenced file does not exist: {self.root / rel}")


def camera_to_dict(cam: Camera) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height, "near_clip": cam.near_clip,
        "rotation_wc": cam.rotation_wc.tolist(),
        "translation_wc": cam.translation_wc.tolist(),
    }


def _check_keys(obj, required, optional, where):
    if not isinstance(obj, dict):
        raise ManifestSchemaError(f"{where}: expected an object")
    missing = [k for k in required if k not in obj]
    if missing:
        raise ManifestSchemaError(f"{where}: missing required field(s) {missing}")
    unknown = sorted(set(obj) - set(required) - set(optional))
    if unknown:
        raise ManifestSchemaError(f"{where}: unknown field(s) {unknown}")


def camera_from_dict(d: dict, where: str = "camera") -> Camera:
    _check_keys(d, _CAMERA_REQUIRED, _CAMERA_OPTIONAL, where)
    try:
        return Camera(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            rotation_wc=np.asarray(d["rotation_wc"], dtype=np.float64),
            translation_wc=np.asarray(d["translation_wc"], dtype=np.float64),
            width=int(d["width"]), height=int(d["height"]),
            near_clip=float(d.get("near_clip", 0.01)),
        )
    except (TypeError, ValueError) as exc:
        raise ManifestSchemaError(f"{where}: {exc}") from exc


def manifest_to_dict(m: DatasetManifest) -> dict:
    views = []
    for v in m.views:
        d = {"id": v.id, "split": v.split, "camera": camera_to_dict(v.camera)}
        for f in PATH_FIELDS:
            value = getattr(v, f)
            if value is not None:
                d[f] = value
        views.append(d)
    return {
        "format": MANIFEST_FORMAT,
        "scene_name": m.scene_name,
        "seed": m.seed,
        "points_path": m.points_path,
        "background": [float(c) for c in m.background],
        "views": views,
    }


def manifest_from_dict(d: dict, root=".") -> DatasetManifest:
    _check_keys(d, _TOP_REQUIRED, _TOP_OPTIONAL, "manifest")
    if d["format"] != MANIFEST_FORMAT:
        raise ManifestSchemaError(f"unsupported manifest format {d['format']!r}")
    if not isinstance(d["views"], list):
        raise ManifestSchemaError("manifest: 'views' must be a list")
    views = []
    for i, vd in enumerate(d["views"]):
        where = f"views[{i}]"
        _check_keys(vd, _VIEW_REQUIRED, _VIEW_OPTIONAL, where)
        if vd["split"] not in ("train", "test"):
            raise ManifestSchemaError(f"{where}: split must be 'train' or 'test'")
        for f in PATH_FIELDS:
            if f in vd and not isinstance(vd[f], str):
                raise ManifestSchemaError(f"{where}: {f} must be a string")
        views.append(
            ViewRecord(
                id=int(vd["id"]),
                split=vd["split"],
                camera=camera_from_dict(vd["camera"], f"{where}.camera"),
                **{f: vd.get(f) for f in PATH_FIELDS},
            )
        )
    bg = tuple(float(c) for c in d.get("background", (0.0, 0.0, 0.0)))
    if len(bg) != 3:
        raise ManifestSchemaError("manifest: background must have 3 channels")
    return DatasetManifest(
        scene_name=str(d["scene_name"]),
        views=views,
        points_path=str(d["points_path"]),
        seed=int(d["seed"]),
        background=bg,
        root=Path(root),
    )


def save_manifest(path, manifest: DatasetManifest, backup: bool = False) -> None:
    """Write the manifest as JSON. With ``backup``, an existing file is first
    copied to ``<path>.bak``."""
    path = Path(path)
    if backup and path.exists():
        shutil.copyfile(path, path.with_name(path.name + ".bak"))
    text = json.dumps(manifest_to_dict(manifest), indent=2, sort_keys=True) + "\n"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def load_manifest(path, validate: bool = True, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestSchemaError(f"{path}: invalid JSON: {exc}") from exc
    m = manifest_from_dict(d, root=path.parent)
    if validate:
        m.validate(check_files=check_files)
    return m

"""Stage drivers shared by the command line and the acceptance suite.

Every stage writes a ``meta.json`` next to its outputs holding the config
hash, so any artifact can be traced back to the settings that made it.
"""

from __future__ import annotations

import filecmp
import json
import logging
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

from . import io
from .config import PipelineConfig
from .manifest import DatasetManifest, load_manifest
from .metrics import EvalReport, compare_runs, evaluate
from .preprocess import PreprocessResult, run_preprocess
from .render import set_threads
from .synth import LAYOUT, default_scene, generate_cameras, make_dataset
from .train import TrainConfig, train

log = logging.getLogger(__name__)

# (label, directory, use_processed, use_masks)
ABLATIONS = (
    ("full", "full", True, True),
    ("w/o AEF", "wo_aef", False, True),
    ("w/o LED", "wo_led", True, False),
    ("vanilla", "vanilla", False, False),
)


class DatasetExistsError(ValueError):
    """The output directory holds a different dataset."""


def write_meta(directory, config: PipelineConfig, stage: str, **extra) -> None:
    d = {"stage": stage, "config_hash": config.hash(), **extra}
    Path(directory).mkdir(parents=True, exist_ok=True)
    (Path(directory) / "meta.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def apply_threads(config: PipelineConfig) -> None:
    set_threads(config.threads)


# -- synth --------------------------------------------------------------------

_SYNTH_DIRS = (LAYOUT.clean, LAYOUT.corrupted, LAYOUT.particles, LAYOUT.occlusion)


def _synth_manifest_view(path: Path) -> dict:
    """Manifest content that the synth stage owns (later stages add paths)."""
    d = json.loads(path.read_text())
    for v in d.get("views", []):
        v.pop("processed_path", None)
        v.pop("pred_mask_path", None)
    return d


def _same_dataset(a: Path, b: Path) -> bool:
    if not (b / LAYOUT.manifest).is_file():
        return False
    for sub in _SYNTH_DIRS:
        names = sorted(p.name for p in (a / sub).iterdir())
        if not (b / sub).is_dir() or names != sorted(p.name for p in (b / sub).iterdir()):
            return False
        _, mismatch, errors = filecmp.cmpfiles(a / sub, b / sub, names, shallow=False)
        if mismatch or errors:
            return False
    if not filecmp.cmp(a / LAYOUT.points, b / LAYOUT.points, shallow=False):
        return False
    return _synth_manifest_view(a / LAYOUT.manifest) == _synth_manifest_view(b / LAYOUT.manifest)


def synth_dataset(config: PipelineConfig, out_dir) -> Path:
    """Write the configured dataset to ``out_dir``; returns the manifest path.

    If ``out_dir`` already holds the identical dataset it is left untouched.
    A different existing dataset raises DatasetExistsError.
    """
    out = Path(out_dir)
    sc = config.scene
    cams = generate_cameras(sc.views, sc.orbit_radius, sc.camera_height, tuple(sc.look_at), sc.focal, sc.focal,
                            sc.width, sc.height)
    recipe = config.weather_params()
    out.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))
    try:
        make_dataset(default_scene(), cams, recipe, scratch, config.seed, n_points=sc.points,
                     supersample=sc.supersample, test_every=sc.test_every)
        write_meta(scratch, config, "synth")
        if out.exists() and any(out.iterdir()):
            if not _same_dataset(scratch, out):
                raise DatasetExistsError(f"{out} already holds a different dataset; choose another --out")
            log.info("dataset in %s is up to date", out)
        else:
            if out.exists():
                out.rmdir()
            scratch.rename(out)
    finally:
        if scratch.exists():
            shutil.rmtree(scratch)
    return out / LAYOUT.manifest


# -- preprocess / train / eval ------------------------------------------------

def preprocess_dataset(config: PipelineConfig, manifest_path) -> PreprocessResult:
    manifest = load_manifest(manifest_path)
    result = run_preprocess(manifest, config.instruction, config.preprocess, manifest_path=manifest_path)
    write_meta(Path(manifest_path).parent / "processed", config, "preprocess", plugin=str(result.plugin),
               cosine=round(result.cosine, 12), mask_coverage=round(result.coverage, 12))
    return result


def train_run(config: PipelineConfig, manifest: DatasetManifest, out_dir, use_processed: bool, use_masks: bool,
              train_config: TrainConfig | None = None):
    tc = train_config or config.train
    cloud, tlog = train(manifest, tc, use_processed=use_processed, use_masks=use_masks, out_dir=out_dir)
    write_meta(out_dir, config, "train", use_processed=use_processed, use_masks=use_masks)
    return cloud, tlog


def eval_run(config: PipelineConfig, manifest: DatasetManifest, checkpoint, out_prefix, label: str = "",
             checkpoint_name: str | None = None) -> EvalReport:
    cloud = io.load_checkpoint(checkpoint)
    rep = evaluate(manifest, cloud, label=label, config_hash=config.hash(),
                   checkpoint=checkpoint_name if checkpoint_name is not None else str(checkpoint))
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    rep.to_csv(out_prefix.with_suffix(".csv"))
    out_prefix.with_suffix(".txt").write_text(rep.to_text())
    return rep


@dataclass
class PipelineSummary:
    out: Path
    plugin: str
    coverage: float
    reports: list
    comparison: object

    def psnr(self, label: str) -> float:
        return next(r.mean_psnr for r in self.reports if r.label == label)


def run_pipeline(config: PipelineConfig, out_dir=None) -> PipelineSummary:
    """synth -> preprocess -> four trainings (full and ablations) -> eval -> comparison."""
    apply_threads(config)
    out = Path(out_dir if out_dir is not None else config.out)
    out.mkdir(parents=True, exist_ok=True)
    write_meta(out, config, "pipeline", settings=config.identity())
    manifest_path = synth_dataset(config, out / "dataset")
    pre = preprocess_dataset(config, manifest_path)
    manifest = load_manifest(manifest_path)
    reports = []
    for label, sub, use_processed, use_masks in ABLATIONS:
        run_dir = out / "runs" / sub
        log.info("training %s", label)
        train_run(config, manifest, run_dir, use_processed, use_masks)
        reports.append(eval_run(config, manifest, run_dir / "final.ckpt", run_dir / "eval", label=label,
                                checkpoint_name=f"runs/{sub}/final.ckpt"))
    comparison = compare_runs(reports)
    comparison.to_csv(out / "comparison.csv")
    (out / "comparison.txt").write_text(comparison.to_text())
    return PipelineSummary(out, str(pre.plugin), pre.coverage, reports, comparison)

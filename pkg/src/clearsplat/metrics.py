"""Held-out view evaluation against clean ground truth and run comparison."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .losses import _pixels, ssim
from .manifest import DatasetManifest
from .render import render
from .scene import GaussianCloud

PSNR_CAP = 99.0


class MetricShapeError(ValueError):
    pass


class EvalError(ValueError):
    pass


def psnr(a, b) -> float:
    """PSNR in dB with peak 1.0; identical images give +inf."""
    x, y = _pixels(a), _pixels(b)
    if x.shape != y.shape:
        raise MetricShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def report_psnr(value: float) -> float:
    return min(value, PSNR_CAP)


@dataclass
class EvalRow:
    view_id: int
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    scene: str
    rows: list
    config_hash: str = ""
    checkpoint: str = ""
    label: str = ""

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("# scene", self.scene))
            w.writerow(("# label", self.label))
            w.writerow(("# config_hash", self.config_hash))
            w.writerow(("# checkpoint", self.checkpoint))
            w.writerow(("view_id", "psnr", "ssim", "lpips"))
            for r in self.rows:
                w.writerow((r.view_id, f"{r.psnr:.6f}", f"{r.ssim:.6f}", "n/a"))
            w.writerow(("average", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}", "n/a"))

    def to_text(self) -> str:
        lines = [f"scene: {self.scene}   label: {self.label}   config: {self.config_hash}",
                 f"{'view':>6} {'PSNR':>10} {'SSIM':>8} {'LPIPS':>6}"]
        for r in self.rows:
            lines.append(f"{r.view_id:>6} {r.psnr:>10.4f} {r.ssim:>8.4f} {'n/a':>6}")
        lines.append(f"{'avg':>6} {self.mean_psnr:>10.4f} {self.mean_ssim:>8.4f} {'n/a':>6}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        meta, rows = {}, []
        with open(path, newline="") as f:
            for rec in csv.reader(f):
                if not rec:
                    continue
                if rec[0].startswith("# "):
                    meta[rec[0][2:]] = rec[1] if len(rec) > 1 else ""
                elif rec[0] not in ("view_id", "average"):
                    rows.append(EvalRow(int(rec[0]), float(rec[1]), float(rec[2])))
        return cls(meta.get("scene", ""), rows, meta.get("config_hash", ""),
                   meta.get("checkpoint", ""), meta.get("label", ""))


def evaluate(manifest: DatasetManifest, cloud: GaussianCloud, label: str = "", config_hash: str = "",
             checkpoint: str = "") -> EvalReport:
    """Render every test view and score it against its clean image."""
    tests = manifest.test_views
    if not tests:
        raise EvalError("manifest has no test views")
    rows = []
    for v in sorted(tests, key=lambda v: v.id):
        if not v.clean_path:
            raise EvalError(f"view {v.id} has no clean reference image")
        ref = io.load_image(manifest.resolve(v.clean_path), expect_shape=(v.camera.height, v.camera.width))
        img, _ = render(cloud, v.camera, background=manifest.background)
        rows.append(EvalRow(v.id, report_psnr(psnr(img, ref)), ssim(img, ref)))
    return EvalReport(manifest.scene_name, rows, config_hash, checkpoint, label)


@dataclass
class Comparison:
    """Runs aligned by scene: per-run PSNR/SSIM, deltas vs the first run, averages."""

    labels: list
    scenes: list
    psnr: np.ndarray  # (runs, scenes)
    ssim: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def avg_psnr(self) -> np.ndarray:
        return self.psnr.mean(axis=1)

    @property
    def avg_ssim(self) -> np.ndarray:
        return self.ssim.mean(axis=1)

    @property
    def delta_psnr(self) -> np.ndarray:
        return self.avg_psnr - self.avg_psnr[0]

    @property
    def delta_ssim(self) -> np.ndarray:
        return self.avg_ssim - self.avg_ssim[0]

    def best(self, metric: str = "psnr") -> int:
        return int(np.argmax(self.avg_psnr if metric == "psnr" else self.avg_ssim))

    def to_rows(self):
        header = ["run"]
        for s in self.scenes:
            header += [f"{s} psnr", f"{s} ssim", f"{s} lpips"]
        header += ["avg psnr", "avg ssim", "avg lpips", "delta psnr", "delta ssim"]
        rows = [header]
        for i, label in enumerate(self.labels):
            row = [label]
            for j in range(len(self.scenes)):
                row += [f"{self.psnr[i, j]:.4f}", f"{self.ssim[i, j]:.4f}", "n/a"]
            row += [f"{self.avg_psnr[i]:.4f}", f"{self.avg_ssim[i]:.4f}", "n/a",
                    f"{self.delta_psnr[i]:+.4f}", f"{self.delta_ssim[i]:+.4f}"]
            rows.append(row)
        return rows

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerows(self.to_rows())

    def to_text(self) -> str:
        rows = self.to_rows()
        # best value per numeric column gets a '*'
        for c in range(1, len(rows[0])):
            if rows[0][c].endswith(("psnr", "ssim")) and not rows[0][c].startswith("delta"):
                vals = [float(r[c]) for r in rows[1:]]
                best = int(np.argmax(vals))
                rows[best + 1][c] += "*"
        widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
        return "\n".join("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows) + "\n"


def compare_runs(reports, labels=None) -> Comparison:
    """Align reports by scene into one table.

    Reports sharing a label are one run across several scenes; by default
    each report's ``label`` (or its position) names its run.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("compare_runs needs at least one report")
    if labels is None:
        labels = [r.label or f"run{i}" for i, r in enumerate(reports)]
    run_names = list(dict.fromkeys(labels))
    scenes = list(dict.fromkeys(r.scene for r in reports))
    p = np.full((len(run_names), len(scenes)), np.nan)
    s = np.full_like(p, np.nan)
    for rep, lab in zip(reports, labels):
        i, j = run_names.index(lab), scenes.index(rep.scene)
        p[i, j] = rep.mean_psnr
        s[i, j] = rep.mean_ssim
    if np.isnan(p).any():
        raise ValueError("every run must have a report for every scene")
    return Comparison(run_names, scenes, p, s)

"""Command-line entry point: ``clearsplat <command> [options]``.

Exit codes: 0 success, 2 usage or validation error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import io
from .config import ConfigError, PipelineConfig, load_config
from .io import CheckpointError, ImageDimensionError, ImageFormatError, MaskValueError
from .manifest import ManifestError, camera_from_dict, load_manifest
from .metrics import EvalError
from .pipeline import (ABLATIONS, DatasetExistsError, apply_threads, eval_run, preprocess_dataset, run_pipeline,
                       synth_dataset, train_run)
from .preprocess import UnknownInstructionError
from .render import render
from .train import TrainDataError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("clearsplat")

# errors that mean "the inputs are wrong", as opposed to a failure while running
USAGE_ERRORS = (
    ConfigError, ManifestError, TrainDataError, UnknownInstructionError, DatasetExistsError, EvalError,
    CheckpointError, ImageFormatError, ImageDimensionError, MaskValueError, FileNotFoundError,
)


class UsageError(ValueError):
    pass


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    return cfg.with_overrides(seed=getattr(args, "seed", None), out=getattr(args, "out", None),
                              threads=getattr(args, "threads", None),
                              instruction=getattr(args, "instruction", None))


def cmd_synth(args) -> int:
    cfg = _config(args)
    apply_threads(cfg)
    path = synth_dataset(cfg, Path(cfg.out) / "dataset" if args.out is None else Path(args.out))
    print(path)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    apply_threads(cfg)
    res = preprocess_dataset(cfg, args.manifest)
    print(f"plugin: {res.plugin}  cosine: {res.cosine:+.4f}  mean mask coverage: {res.coverage:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    apply_threads(cfg)
    manifest = load_manifest(args.manifest)
    out = Path(args.out) if args.out else Path(cfg.out) / "runs" / _run_name(args.use_processed, args.use_masks)
    train_run(cfg, manifest, out, args.use_processed, args.use_masks)
    print(out / "final.ckpt")
    return EXIT_OK


def _run_name(use_processed: bool, use_masks: bool) -> str:
    return next(sub for _, sub, p, m in ABLATIONS if p == use_processed and m == use_masks)


def cmd_render(args) -> int:
    cfg = _config(args)
    apply_threads(cfg)
    cloud = io.load_checkpoint(args.checkpoint)
    background = (0.0, 0.0, 0.0)
    if args.camera:
        try:
            cam = camera_from_dict(json.loads(Path(args.camera).read_text()))
        except (json.JSONDecodeError, OSError) as e:
            raise UsageError(f"cannot read camera file {args.camera}: {e}") from None
    else:
        if args.manifest is None or args.view is None:
            raise UsageError("render needs --camera FILE or both --manifest and --view")
        manifest = load_manifest(args.manifest, check_files=False)
        try:
            cam = manifest.view(args.view).camera
        except KeyError:
            raise UsageError(f"manifest has no view with id {args.view}") from None
        background = manifest.background
    if args.background is not None:
        background = tuple(args.background)
    img, _ = render(cloud, cam, background=background)
    io.save_image(args.out, img)
    print(args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    apply_threads(cfg)
    manifest = load_manifest(args.manifest)
    rep = eval_run(cfg, manifest, args.checkpoint, Path(args.out), label=args.label or "")
    print(rep.to_text(), end="")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    summary = run_pipeline(cfg)
    print(f"plugin: {summary.plugin}  mean mask coverage: {summary.coverage:.4f}")
    print(summary.comparison.to_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clearsplat", description="Weather-robust Gaussian splatting toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory"):
        sp.add_argument("--config", help="YAML config file (see configs/default.yaml)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--threads", type=int, help="worker threads (default: all cores); never changes outputs")
        sp.add_argument("--out", help=out_help)

    sp = sub.add_parser("synth", help="generate a synthetic weather dataset")
    common(sp, "dataset directory (default: <config out>/dataset)")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("preprocess", help="plugin selection, particle filter and occlusion masks")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--instruction", help="weather-removal instruction text")
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", help="optimize a Gaussian cloud on a dataset")
    common(sp, "run directory (default: <config out>/runs/<variant>)")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--use-masks", type=_bool, default=True, metavar="BOOL")
    sp.add_argument("--use-processed", type=_bool, default=True, metavar="BOOL")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("render", help="render one view of a checkpoint to a PPM file")
    common(sp, "output image path")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest")
    sp.add_argument("--view", type=int, help="view id in the manifest")
    sp.add_argument("--camera", help="JSON camera file (manifest camera schema)")
    sp.add_argument("--background", type=float, nargs=3, metavar=("R", "G", "B"))
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("eval", help="score a checkpoint on the test views")
    common(sp, "report path prefix (.csv and .txt are written)")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--label")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("pipeline", help="synth, preprocess, full + ablation trainings, eval, comparison")
    common(sp)
    sp.add_argument("--instruction", help="weather-removal instruction text")
    sp.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    warnings.filterwarnings("ignore", module="numba")
    if args.command == "render" and args.out is None:
        print("error: render needs --out", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "eval" and args.out is None:
        print("error: eval needs --out", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, *USAGE_ERRORS) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

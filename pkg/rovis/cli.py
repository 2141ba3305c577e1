"""Command-line entry point: gen-data, train, infer, eval.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from loguru import logger

from . import __version__
from .checkpoint import load_checkpoint
from .config import load_tracker_config, load_train_config, seed_override
from .dataset_io import load_dataset, save_dataset
from .diagnostics import query_firing_stats
from .errors import ConfigError, RovisError
from .metrics import evaluate, format_table, plot_pr_curves, save_report
from .synthdata import BENCHMARKS, CATEGORY_NAMES, make_benchmark
from .tracker import track_video, track_video_iou_link
from .tracks import VideoResults, load_results, results_dir_entries, save_results
from .trainer import train

MANIFEST_NAME = "run_manifest.json"


class UsageError(RovisError):
    """Bad invocation that argparse cannot catch."""


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: dict
    seed: Optional[int]
    code_version: str = __version__
    started_at: str = ""
    finished_at: Optional[str] = None
    outputs: List[str] = field(default_factory=list)
    ablation: Optional[str] = None


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir: Path, manifest: RunManifest) -> Path:
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(asdict(manifest), indent=2))
    return path


def prepare_out_dir(out_dir: Path, force: bool) -> Path:
    """Create out_dir; a non-empty existing directory needs --force and is cleared."""
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise UsageError(f"output directory {out_dir} is not empty (use --force to overwrite)")
        logger.warning(f"Clearing existing output directory: {out_dir}")
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    logger.remove()
    level = "DEBUG" if verbose else "WARNING" if quiet else "INFO"
    logger.add(sys.stderr, level=level)


def _begin(args, out_dir: Path, config: dict, seed: Optional[int], ablation: Optional[str] = None) -> RunManifest:
    manifest = RunManifest(
        command=args.command,
        argv=list(args.argv),
        config=config,
        seed=seed,
        started_at=_now(),
        ablation=ablation,
    )
    write_manifest(out_dir, manifest)
    return manifest


def _finish(out_dir: Path, manifest: RunManifest, outputs: Sequence[Path]) -> None:
    manifest.finished_at = _now()
    manifest.outputs = sorted(str(Path(p).relative_to(out_dir)) for p in outputs)
    write_manifest(out_dir, manifest)


def cmd_gen_data(args) -> int:
    if args.size < 0:
        raise UsageError(f"--size must be >= 0, got {args.size}")
    out = prepare_out_dir(Path(args.out), args.force)
    seed = seed_override()
    seed = args.seed if seed is None else seed
    config = {"benchmark": args.benchmark, "size": args.size, "length": args.length, "height": args.height, "width": args.width}
    manifest = _begin(args, out, config, seed)
    if args.size == 0:
        logger.warning("--size 0: writing an empty dataset")
    dataset = make_benchmark(args.benchmark, seed, args.size, args.length, args.height, args.width)
    save_dataset(dataset, out)
    _finish(out, manifest, [out / "manifest.json"])
    return 0


def cmd_train(args) -> int:
    config = load_train_config(args.config)
    dataset = load_dataset(args.data)
    out = prepare_out_dir(Path(args.out), args.force)
    manifest = _begin(args, out, config.to_dict(), config.seed, args.ablation)
    videos = dataset.split(args.split) if args.split != "all" else dataset.videos
    if not videos:
        raise UsageError(f"dataset {args.data} has no videos in split {args.split!r}")
    result = train(videos, config, out)
    _finish(out, manifest, [out / "loss_log.jsonl"] + result.checkpoints)
    logger.info(f"Training finished: {len(result.records)} steps, final loss {result.records[-1].total:.4f}")
    return 0


def cmd_infer(args) -> int:
    tracker_config = load_tracker_config(args.tracker)
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    videos = dataset.split(args.split)
    if model.config.num_classes != len(dataset.categories) and not tracker_config.category_agnostic:
        raise ConfigError(
            f"checkpoint predicts {model.config.num_classes} classes but dataset has {len(dataset.categories)} categories"
        )
    out = prepare_out_dir(Path(args.out), args.force)
    config = {"tracker": tracker_config.to_dict(), "model": model.config.to_dict(), "baseline": args.baseline,
              "checkpoint": str(args.checkpoint), "split": args.split, "max_frames": args.max_frames}
    manifest = _begin(args, out, config, None)
    run: Callable = track_video_iou_link if args.baseline == "iou-link" else track_video

    def infer_one(video):
        frames = video.frames[: args.max_frames] if args.max_frames else video.frames
        tracks = run(model, frames, tracker_config)
        path = save_results(
            VideoResults(video.video_id, video.height, video.width, len(frames), tracks),
            out / "results" / f"{video.video_id}.json",
        )
        logger.info(f"{video.video_id}: {len(tracks)} tracks over {len(frames)} frames")
        return video.video_id, tracks, path

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        outcomes = list(pool.map(infer_one, videos))
    outputs = [path for _, _, path in outcomes]
    if args.diagnostics:
        stats = query_firing_stats({vid: tracks for vid, tracks, _ in outcomes})
        diag_path = out / "query_firing.json"
        diag_path.write_text(json.dumps(stats, indent=2))
        outputs.append(diag_path)
    logger.success(f"Saved results for {len(outcomes)} videos: {out / 'results'}")
    _finish(out, manifest, outputs)
    return 0


def cmd_eval(args) -> int:
    dataset = load_dataset(args.gt)
    videos = dataset.split(args.split)
    ground_truth = {v.video_id: v.gt_tracks(args.category_agnostic) for v in videos}
    known = {v.video_id for v in dataset.videos}
    predictions: Dict[str, list] = {}
    entries = results_dir_entries(args.pred)
    for video_id, path in entries:
        results = load_results(path)
        if results.video_id not in known:
            raise RovisError(f"prediction for unknown video id {results.video_id!r} ({path})")
        if results.video_id in ground_truth:
            predictions[results.video_id] = results.tracks
    if not entries:
        logger.warning(f"No prediction files in {args.pred}")
    report = evaluate(predictions, ground_truth, category_agnostic=args.category_agnostic, category_names=CATEGORY_NAMES)
    print(format_table(report))

    if args.out:
        out = prepare_out_dir(Path(args.out), args.force)
        manifest = _begin(args, out, {"pred": str(args.pred), "gt": str(args.gt), "split": args.split}, None)
    else:
        out, manifest = Path(args.pred), None
    outputs = [save_report(report, out / "eval_report.json")]
    if args.plot:
        outputs += plot_pr_curves(report, args.plot)
    if manifest is not None:
        _finish(out, manifest, [p for p in outputs if out in Path(p).parents])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rovis", description="Video instance segmentation with track queries")
    parser.add_argument("--version", action="version", version=f"rovis {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--verbose", "-v", action="store_true", help="Debug-level logging")
    common.add_argument("--quiet", "-q", action="store_true", help="Warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", parents=[common], help="Generate a synthetic benchmark")
    gen.add_argument("--benchmark", required=True, choices=BENCHMARKS)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--size", type=int, required=True, help="Number of videos")
    gen.add_argument("--out", required=True)
    gen.add_argument("--length", type=int, default=16)
    gen.add_argument("--height", type=int, default=64)
    gen.add_argument("--width", type=int, default=64)
    gen.add_argument("--force", action="store_true")
    gen.set_defaults(handler=cmd_gen_data)

    tr = sub.add_parser("train", parents=[common], help="Train a segmenter")
    tr.add_argument("--data", required=True)
    tr.add_argument("--config", help="TrainConfig JSON (defaults when omitted)")
    tr.add_argument("--out", required=True)
    tr.add_argument("--split", default="train", choices=["train", "val", "all"])
    tr.add_argument("--ablation", help="Free-form tag recorded in the run manifest")
    tr.add_argument("--force", action="store_true")
    tr.set_defaults(handler=cmd_train)

    inf = sub.add_parser("infer", parents=[common], help="Track every video of a dataset")
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--data", required=True)
    inf.add_argument("--tracker", help="TrackerConfig JSON (defaults when omitted)")
    inf.add_argument("--baseline", choices=["iou-link"], help="Disable track queries and link by mask IoU")
    inf.add_argument("--out", required=True)
    inf.add_argument("--split", default="val", choices=["train", "val", "all"])
    inf.add_argument("--jobs", type=int, default=1)
    inf.add_argument("--max-frames", type=int, help="Only process the first N frames of each video")
    inf.add_argument("--diagnostics", action="store_true", help="Also write query_firing.json")
    inf.add_argument("--force", action="store_true")
    inf.set_defaults(handler=cmd_infer)

    ev = sub.add_parser("eval", parents=[common], help="Score results against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--split", default="val", choices=["train", "val", "all"])
    ev.add_argument("--plot", help="Directory for PR-curve PNGs")
    ev.add_argument("--out", help="Directory for the report and its manifest (default: next to --pred)")
    ev.add_argument("--category-agnostic", action="store_true")
    ev.add_argument("--force", action="store_true")
    ev.set_defaults(handler=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    configure_logging(args.verbose, args.quiet)
    try:
        return args.handler(args)
    except (UsageError, ConfigError) as exc:
        logger.error(str(exc))
        parser.print_usage(sys.stderr)
        return 2
    except (RovisError, OSError, ValueError) as exc:
        logger.error(f"{args.command} failed: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())

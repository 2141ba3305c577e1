#!/usr/bin/env python3
"""Ablation suite - paired-seed runs of the full model against its ablations.

Variants per seed:
  full      track queries, default FN/FP augmentation
  iou_link  the full model's checkpoint, tracking by mask-IoU linking
  no_fp     trained with p_fp = 0
  no_fn     trained with p_fn = 0

By default both the reappear and the occlusion benchmarks are run.
"""

import argparse
import json
import sys
from dataclasses import asdict, dataclass, replace
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence

sys.path.insert(0, str(Path(__file__).parent.parent))

from rovis.config import load_tracker_config, load_train_config
from rovis.metrics import evaluate
from rovis.synthdata import BENCHMARKS, CATEGORY_NAMES, make_benchmark
from rovis.tracker import track_video, track_video_iou_link
from rovis.trainer import train
from loguru import logger

VARIANTS = ("full", "iou_link", "no_fp", "no_fn")
DEFAULT_BENCHMARKS = ("reappear", "occlusion")
AP50_TARGET = 0.5


@dataclass
class AblationRun:
    benchmark: str
    variant: str
    seed: int
    success: bool = False
    ap: Optional[float] = None
    ap50: Optional[float] = None
    ar10: Optional[float] = None
    num_tracks: int = 0
    error: Optional[str] = None


def run_seed(benchmark: str, seed: int, args, train_config, tracker_config, output_dir: Path) -> List[AblationRun]:
    """Train the three models for one seed and score all four variants on the val split."""
    logger.info(f"Seed {seed}: generating '{benchmark}' ({args.size} videos)")
    dataset = make_benchmark(benchmark, seed, args.size)
    train_videos, val_videos = dataset.split("train"), dataset.split("val")
    ground_truth = {v.video_id: v.gt_tracks() for v in val_videos}

    configs = {
        "full": replace(train_config, seed=seed),
        "no_fp": replace(train_config, seed=seed, p_fp=0.0),
        "no_fn": replace(train_config, seed=seed, p_fn=0.0),
    }
    models = {}
    runs = []
    for variant in VARIANTS:
        run = AblationRun(benchmark, variant, seed)
        try:
            source = "full" if variant == "iou_link" else variant
            if source not in models:
                result = train(train_videos, configs[source], output_dir / benchmark / f"seed_{seed}" / source)
                models[source] = result.model
            track = track_video_iou_link if variant == "iou_link" else track_video
            predictions = {v.video_id: track(models[source], v.frames, tracker_config) for v in val_videos}
            report = evaluate(predictions, ground_truth, category_names=CATEGORY_NAMES)
            run.success = True
            run.ap, run.ap50, run.ar10 = report.ap, report.ap50, report.ar10
            run.num_tracks = report.num_predictions
            logger.info(f"  {variant:<9} AP {report.ap:.4f}  AP50 {report.ap50:.4f}")
        except Exception as e:
            logger.exception(f"Error in {benchmark} seed {seed} / {variant}: {e}")
            run.error = f"{type(e).__name__}: {str(e)}"
        runs.append(run)
    return runs


def summarize_benchmark(runs: List[AblationRun], benchmark: str) -> List[str]:
    """Per-seed AP table, the AP50 check for the full model, and the win count per ablation."""
    seeds = sorted({r.seed for r in runs})
    table: Dict[int, Dict[str, AblationRun]] = {s: {} for s in seeds}
    for r in runs:
        table[r.seed][r.variant] = r

    lines = [
        f"Benchmark: {benchmark} | Seeds: {len(seeds)} | Failed runs: {sum(not r.success for r in runs)}",
        "-" * 60,
        f"{'Seed':<6}" + "".join(f"{v:>12}" for v in VARIANTS),
        "-" * 60,
    ]
    for s in seeds:
        cells = []
        for v in VARIANTS:
            r = table[s].get(v)
            cells.append(f"{r.ap:>12.4f}" if r and r.success else f"{'failed':>12}")
        lines.append(f"{s:<6}" + "".join(cells))

    lines.append("-" * 60)
    full = [table[s]["full"] for s in seeds if table[s].get("full") and table[s]["full"].success]
    if full:
        mean_ap50 = sum(r.ap50 for r in full) / len(full)
        verdict = "met" if mean_ap50 >= AP50_TARGET else "NOT met"
        lines.append(f"full mean AP50 {mean_ap50:.4f} (target >= {AP50_TARGET}) -> {verdict}")
    for variant in VARIANTS[1:]:
        paired = [(table[s]["full"], table[s][variant]) for s in seeds
                  if table[s].get("full") and table[s]["full"].success
                  and table[s].get(variant) and table[s][variant].success]
        wins = sum(f.ap > other.ap for f, other in paired)
        direction = "full better" if 2 * wins > len(paired) else "not confirmed"
        lines.append(f"full vs {variant:<9}: full wins {wins}/{len(paired)} -> {direction}")
    return lines


def generate_summary(runs: List[AblationRun], benchmarks: Sequence[str]) -> str:
    lines = ["=" * 60, "ABLATION SUITE REPORT", "=" * 60]
    for i, benchmark in enumerate(benchmarks):
        if i:
            lines.append("=" * 60)
        lines.extend(summarize_benchmark([r for r in runs if r.benchmark == benchmark], benchmark))
    lines.append("=" * 60)
    return "\n".join(lines)


def main():
    parser = argparse.ArgumentParser(description="Paired-seed ablation suite")
    parser.add_argument("--benchmark", "-b", nargs="+", default=list(DEFAULT_BENCHMARKS), choices=BENCHMARKS)
    parser.add_argument("--seeds", "-n", type=int, default=3, help="Number of paired seeds")
    parser.add_argument("--first-seed", type=int, default=0)
    parser.add_argument("--size", type=int, default=20, help="Videos per generated dataset")
    parser.add_argument("--config", "-c", help="TrainConfig JSON shared by every variant")
    parser.add_argument("--tracker", "-t", help="TrackerConfig JSON")
    parser.add_argument("--output-dir", "-o", default="outputs/ablation")
    parser.add_argument("--output-json")
    parser.add_argument("--output-summary")

    args = parser.parse_args()

    output_dir = Path(args.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    train_config = load_train_config(args.config)
    tracker_config = load_tracker_config(args.tracker)

    runs: List[AblationRun] = []
    for benchmark in args.benchmark:
        for seed in range(args.first_seed, args.first_seed + args.seeds):
            runs.extend(run_seed(benchmark, seed, args, train_config, tracker_config, output_dir))

    summary = generate_summary(runs, args.benchmark)
    print(summary)

    if args.output_summary:
        Path(args.output_summary).write_text(summary)
        logger.success(f"Summary: {args.output_summary}")

    if args.output_json:
        data = {
            "benchmarks": args.benchmark,
            "train_config": train_config.to_dict(),
            "tracker_config": tracker_config.to_dict(),
            "timestamp": datetime.now().isoformat(),
            "runs": [asdict(r) for r in runs],
        }
        Path(args.output_json).write_text(json.dumps(data, indent=2))
        logger.success(f"JSON: {args.output_json}")

    if not all(r.success for r in runs):
        sys.exit(1)


if __name__ == "__main__":
    main()

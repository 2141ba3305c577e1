#!/usr/bin/env python3
"""Compare two evaluation reports (reference vs ablation)."""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from rovis.errors import FormatError
from rovis.metrics import EvalReport, load_report
from loguru import logger


def resolve_report(path: str) -> Path:
    """Accept a report file or a run directory containing eval_report.json."""
    p = Path(path)
    return p / "eval_report.json" if p.is_dir() else p


def format_comparison(reference: EvalReport, ablation: EvalReport, label1: str, label2: str) -> str:
    """Format both summary rows and their difference as a text report."""
    ref_row, abl_row = reference.summary_row(), ablation.summary_row()
    lines = [
        "=" * 60,
        "EVALUATION COMPARISON REPORT",
        "=" * 60,
        f"Reference : {label1}",
        f"Ablation  : {label2}",
        "-" * 60,
        f"{'Metric':<10} {'Reference':>12} {'Ablation':>12} {'Delta':>12}",
        "-" * 60,
    ]
    for name in ref_row:
        lines.append(f"{name:<10} {ref_row[name]:>12.4f} {abl_row[name]:>12.4f} {abl_row[name] - ref_row[name]:>+12.4f}")

    categories = sorted(set(reference.per_category_ap) | set(ablation.per_category_ap))
    if categories:
        lines.append("-" * 60)
        for name in categories:
            ref_ap = reference.per_category_ap.get(name, float("nan"))
            abl_ap = ablation.per_category_ap.get(name, float("nan"))
            lines.append(f"{name:<10} {ref_ap:>12.4f} {abl_ap:>12.4f} {abl_ap - ref_ap:>+12.4f}")

    lines.append("=" * 60)
    return "\n".join(lines)


def main():
    parser = argparse.ArgumentParser(description="Compare two evaluation reports")
    parser.add_argument("--reference", "-r", required=True, help="Reference report (or run directory)")
    parser.add_argument("--ablation", "-a", required=True, help="Ablation report (or run directory)")
    parser.add_argument("--json", "-j", action="store_true", help="Output as JSON")
    parser.add_argument("--output", "-o", help="Save result to file")

    args = parser.parse_args()

    try:
        reference = load_report(resolve_report(args.reference))
        ablation = load_report(resolve_report(args.ablation))
    except FormatError as e:
        logger.error(f"Report not found: {e}")
        sys.exit(1)

    label1, label2 = Path(args.reference).stem, Path(args.ablation).stem
    if args.json:
        output = json.dumps({
            "reference": label1, "ablation": label2,
            "reference_metrics": reference.summary_row(),
            "ablation_metrics": ablation.summary_row(),
            "ap_delta": ablation.ap - reference.ap,
        }, indent=2)
    else:
        output = format_comparison(reference, ablation, label1, label2)

    if args.output:
        Path(args.output).write_text(output)
        logger.success(f"Saved: {args.output}")
    else:
        print(output)

    # non-zero exit when the ablation does not hurt AP
    sys.exit(0 if ablation.ap < reference.ap else 1)


if __name__ == "__main__":
    main()

"""Command-line driver: covscan <data.csv> --output report.json.

Exit codes: 0 = pipeline ran (discoveries may be empty), 2 = input or
configuration validation error, 3 = numerical failure; diagnostics name the
failing stage on stderr.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .pipeline import (
    PipelineConfig,
    PipelineStageError,
    ingest_csv,
    run_pipeline,
    write_regions_csv,
    write_report,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="covscan",
        description=(
            "Scan longitudinal two-group data for feature regions whose "
            "covariance trajectories differ."
        ),
    )
    parser.add_argument("input_csv", help="CSV with subject_id,group,time,<features...>")
    parser.add_argument("--output", required=True, help="path for the JSON report")
    parser.add_argument("--alpha", type=float, default=0.05, help="test level (default 0.05)")
    parser.add_argument(
        "--lambda",
        dest="lam",
        type=float,
        default=None,
        help="graphical lasso penalty; omit to tune for --target-density",
    )
    parser.add_argument("--perms", type=int, default=999, help="permutations (default 999)")
    parser.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    parser.add_argument(
        "--max-radius", type=int, default=None, help="largest ball radius (default: graph eccentricity)"
    )
    parser.add_argument(
        "--stat",
        choices=("trajectory", "product", "glm_slope"),
        default="trajectory",
        help="region statistic (default trajectory)",
    )
    parser.add_argument(
        "--graph-file",
        default=None,
        help="edge-list file ('u v' per line); skips graph estimation",
    )
    parser.add_argument(
        "--covariance",
        choices=("sample", "pearson", "spearman"),
        default="sample",
        help="per-timepoint matrix kind (default sample)",
    )
    parser.add_argument(
        "--min-region-edges",
        type=int,
        default=1,
        help="skip regions with fewer induced edges (default 1)",
    )
    parser.add_argument(
        "--target-density",
        type=float,
        default=0.10,
        help="edge density the penalty is tuned to when --lambda is omitted",
    )
    parser.add_argument(
        "--graph-source",
        choices=("difference", "pooled"),
        default="difference",
        help=(
            "glasso input: group slope-difference matrix, or label-free "
            "pooled slope magnitudes (keeps permutation calibration exact)"
        ),
    )
    parser.add_argument(
        "--regions-csv",
        default=None,
        help="optional CSV flattening of the per-region statistics",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = PipelineConfig(
            alpha=args.alpha,
            lam=args.lam,
            n_perm=args.perms,
            seed=args.seed,
            max_radius=args.max_radius,
            stat_mode=args.stat,
            graph_file=args.graph_file,
            min_region_edges=args.min_region_edges,
            covariance_kind=args.covariance,
            target_density=args.target_density,
            graph_source=args.graph_source,
        )
        dataset = ingest_csv(args.input_csv)
    except (ValueError, OSError) as err:
        print(f"covscan: validation error: {err}", file=sys.stderr)
        return 2

    try:
        result, report = run_pipeline(dataset, config)
    except PipelineStageError as err:
        # LinAlgError subclasses ValueError but is a numerical failure
        validation = isinstance(err.original, (ValueError, OSError)) and not isinstance(
            err.original, np.linalg.LinAlgError
        )
        if validation:
            print(f"covscan: validation error: {err}", file=sys.stderr)
            return 2
        print(f"covscan: numerical failure: {err}", file=sys.stderr)
        return 3

    write_report(report, args.output)
    if args.regions_csv:
        write_regions_csv(report, args.regions_csv)
    verdict = "difference detected" if result.rejects else "no difference detected"
    names = [r["center_name"] for r in report["identified"]]
    print(
        f"{verdict}: max corrected statistic {result.observed_max:.4f} vs "
        f"critical value {result.critical_value:.4f} at alpha {config.alpha}"
    )
    if names:
        print(f"identified region centers: {', '.join(names)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

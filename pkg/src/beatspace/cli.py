"""Command-line interface: fetch, run, report, clusters."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .pipeline import StageError, cmd_clusters, cmd_fetch, cmd_report, cmd_run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="beatspace",
        description="Label-free ECG heartbeat embedding, evaluation, and cluster profiling.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fetch = sub.add_parser("fetch", help="download the 48 MIT-BIH records into the cache")
    p_fetch.add_argument("--config", required=True, help="TOML run configuration")

    p_run = sub.add_parser("run", help="run the full pipeline from a config file")
    p_run.add_argument("--config", required=True, help="TOML run configuration")

    p_report = sub.add_parser("report", help="summarize a finished run's evaluation tables")
    p_report.add_argument("run_dir")

    p_clusters = sub.add_parser("clusters", help="re-extract clusters from a stored embedding")
    p_clusters.add_argument("run_dir")
    p_clusters.add_argument("--algorithm", default="umap")
    p_clusters.add_argument("--lead", default="MLII")
    p_clusters.add_argument("--scope", default="mixed", help='"mixed" or a record id')
    p_clusters.add_argument("--resolution", type=int, default=512)
    p_clusters.add_argument("--dilation-radius", type=int, default=1)
    p_clusters.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "fetch":
            cfg = load_config(args.config)
            manifest = cmd_fetch(cfg)
            print(f"cached {len(manifest['records'])} records "
                  f"({len(manifest['failed'])} failed); study subset: {len(manifest['study_subset'])}")
            return 1 if manifest["failed"] else 0
        if args.command == "run":
            cfg = load_config(args.config)
            run_dir = cmd_run(cfg)
            print(f"run complete: {run_dir}")
            return 0
        if args.command == "report":
            print(cmd_report(args.run_dir), end="")
            return 0
        if args.command == "clusters":
            out_dir = cmd_clusters(
                args.run_dir,
                algorithm=args.algorithm,
                lead=args.lead,
                scope=args.scope,
                resolution=args.resolution,
                dilation_radius=args.dilation_radius,
                seed=args.seed,
            )
            print(f"cluster report: {out_dir}")
            return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

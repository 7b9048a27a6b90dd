"""Command line entry point: ``phtrain run | partition | compare | config``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, harness, partition, preprocess
from .config import default_config_text, load_config, load_default
from .errors import ConfigurationError, PHTError

log = logging.getLogger("phtrain")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


def cmd_run(args) -> int:
    if args.config:
        cfg = load_config(args.config, seed=args.seed, output=args.output)
    else:
        cfg = load_default(seed=args.seed, output=args.output)
    out_dir = Path(cfg.output or f"phtrain-out/{cfg.name}-seed{cfg.seed}")
    if not cfg.output and args.config:
        out_dir = Path(args.config).parent / out_dir
    result = harness.run_experiment(cfg, out_dir)
    for rec in result.records:
        ft = rec.final_test or {}
        status = "aborted: " + str(rec.error) if rec.aborted else f"mean accuracy {ft.get('mean_accuracy', float('nan')):.4f}, mean recall {ft.get('mean_recall', float('nan')):.4f}"
        print(f"{rec.policy.value:<12} {status}")
    print(f"artifacts written to {out_dir}")
    return EXIT_FAILURE if result.failed else EXIT_OK


def cmd_partition(args) -> int:
    rows = preprocess.read_labels_csv(args.labels)
    labels = {}
    for filename, label in rows:
        sid = Path(filename).stem
        if sid in labels:
            raise ConfigurationError(f"{args.labels}: duplicate sample id {sid!r}")
        labels[sid] = label
    spec = partition.PartitionSpec(
        test_fraction=args.test_frac,
        station_count=args.stations,
        validation_fraction=args.validation_frac,
        seed=args.seed,
    )
    test_ids, shards = partition.split(labels, spec)
    text = partition.manifest_json(test_ids, shards, spec, labels_file=Path(args.labels).name)
    if args.output:
        target = Path(args.output)
        if target.is_dir():
            target = target / "partition.json"
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text)
    else:
        sys.stdout.write(text)
    sizes = "/".join(str(len(s)) for s in shards)
    print(f"test {len(test_ids)}, stations {sizes}", file=sys.stderr)
    return EXIT_OK


def cmd_compare(args) -> int:
    summaries = []
    for path in args.summaries:
        try:
            summaries.append(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise ConfigurationError(f"cannot read summary {path}: {exc.strerror or exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: not valid JSON ({exc})") from None
    rows = harness.compare_table(summaries)
    sys.stdout.write(harness.format_compare(rows))
    if args.output:
        digests = {s.get("config_sha256") for s in summaries}
        Path(args.output).write_text(harness.compare_csv(rows, digests.pop() if len(digests) == 1 else None))
    return EXIT_OK


def cmd_config(args) -> int:
    sys.stdout.write(default_config_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phtrain", description="Distributed-training simulator for image classification across data stations.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run every plan in a config and write artifacts")
    r.add_argument("config", nargs="?", help="YAML config (default: the bundled desk-scale config)")
    r.add_argument("--output", help="artifact directory (overrides the config)")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("partition", help="split a labels CSV into test set and station shards")
    s.add_argument("--labels", required=True, help="CSV with header filename,label")
    s.add_argument("--stations", type=int, default=3)
    s.add_argument("--test-frac", type=float, default=0.2)
    s.add_argument("--validation-frac", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", help="manifest file or directory (default: stdout)")
    s.set_defaults(func=cmd_partition)

    c = sub.add_parser("compare", help="tabulate final test metrics of several runs")
    c.add_argument("summaries", nargs="+", help="*_summary.json files")
    c.add_argument("--output", help="also write the table as CSV")
    c.set_defaults(func=cmd_compare)

    d = sub.add_parser("config", help="print the bundled default config")
    d.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PHTError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

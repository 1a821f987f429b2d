"""Command-line entry point.

Exit codes: 0 success, 1 I/O or file-format failure, 2 domain failure
(no fits, no common tensors, short series, bad manifest or config).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .checkpoint_io import open_container
from .classify import DEFAULT_RULESET, ComponentGroup, Ruleset
from .config import WORKERS_ENV, RunConfig, load_config
from .errors import DomainError, ParamScopeError
from .report import (
    TrendSeries,
    analyze_container,
    classify_trend,
    compare_against_ancestor,
    compare_diff,
    emit_report,
    ComparisonReport,
)
from .dynamics import diff_checkpoints
from .synth import load_manifest, synthesize

log = logging.getLogger("paramscope")

EXIT_OK, EXIT_IO, EXIT_DOMAIN = 0, 1, 2


def _common(p: argparse.ArgumentParser, out_default: str = "report") -> None:
    p.add_argument("--config", metavar="FILE", help="JSON config file; flags override it")
    p.add_argument("--min-dim", type=int, help="skip matrices with min(rows, cols) below this (default 64)")
    p.add_argument("--out", metavar="DIR", help=f"output directory (default {out_default!r})")
    p.add_argument("--format", choices=("json", "csv", "both"), help="report format (default both)")
    p.add_argument("--ruleset", metavar="FILE", help="layer classification rules (JSON)")
    p.add_argument("--workers", type=int, help=f"worker threads (default: ${WORKERS_ENV} or CPU count)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paramscope", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress warnings on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="spectral report for one checkpoint")
    p.add_argument("model", help="container file")
    _common(p)
    p.add_argument("--bin-width", type=float, help="alpha histogram bin width (default 0.25)")

    p = sub.add_parser("diff", help="per-layer deltas between two checkpoints")
    p.add_argument("base")
    p.add_argument("target")
    _common(p)
    p.add_argument("--group", action="append", choices=[g.value for g in ComponentGroup],
                   help="restrict to a component group (repeatable)")

    p = sub.add_parser("compare", help="compare several descendants against a shared ancestor")
    p.add_argument("ancestor")
    p.add_argument("descendants", nargs="+")
    _common(p)
    p.add_argument("--group", action="append", choices=[g.value for g in ComponentGroup])
    p.add_argument("--reports", nargs="*", default=[], metavar="REPORT",
                   help="report.json files whose band summaries are attached")

    p = sub.add_parser("trend", help="classify a band-proportion series over checkpoints")
    p.add_argument("reports", nargs="+", help="report.json files (or directories holding one), in order")
    p.add_argument("--reference", metavar="SERIES", help="trend.json of the reference series")
    p.add_argument("--config", metavar="FILE")
    p.add_argument("--out", metavar="DIR", help="output directory (default 'report')")

    p = sub.add_parser("synth", help="write a synthetic fixture container from a manifest")
    p.add_argument("manifest")
    p.add_argument("out")
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    changes = {}
    if getattr(args, "min_dim", None) is not None:
        changes["min_dim"] = args.min_dim
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    if getattr(args, "ruleset", None) is not None:
        changes["ruleset"] = args.ruleset
    if getattr(args, "bin_width", None) is not None:
        changes["bin_width"] = args.bin_width
    out = {}
    if getattr(args, "format", None) is not None:
        out["format"] = args.format
    if getattr(args, "out", None) is not None:
        out["dir"] = args.out
    if out:
        changes["output"] = dataclasses.replace(cfg.output, **out)
    return dataclasses.replace(cfg, **changes)


def _ruleset(cfg: RunConfig) -> Ruleset:
    return Ruleset.from_file(cfg.ruleset) if cfg.ruleset else DEFAULT_RULESET


def cmd_analyze(args) -> int:
    cfg = _config(args)
    handle = open_container(args.model)
    report = analyze_container(handle, cfg, _ruleset(cfg))
    emit_report(report, cfg.output.format, cfg.output.dir)
    print(
        f"{report.checkpoint_id}: alpha in [{cfg.band.lo:g},{cfg.band.hi:g}] {report.band_proportion_pct:.2f}% "
        f"({report.band_color.value}); fitted {report.n_fit}, excluded {report.n_excluded}, "
        f"skipped {len(report.skipped)}"
    )
    return EXIT_OK


def _groups(args):
    return {ComponentGroup(g) for g in args.group} if args.group else None


def cmd_diff(args) -> int:
    cfg = _config(args)
    base, target = open_container(args.base), open_container(args.target)
    diff = diff_checkpoints(base, target, cfg.min_dim, _groups(args), _ruleset(cfg), cfg.workers)
    entry = compare_diff(target.path.stem, diff, cfg.regime)
    emit_report(ComparisonReport(base.path.stem, [entry], cfg.report_dict()), cfg.output.format, cfg.output.dir)
    for name in diff.only_in_base:
        log.warning("only in base: %s", name)
    for name in diff.only_in_target:
        log.warning("only in target: %s", name)
    counts = entry.to_dict()["regime_counts"]
    print(
        f"{base.path.stem} -> {target.path.stem}: {len(diff.deltas)} matched, "
        f"{len(diff.only_in_base) + len(diff.only_in_target)} unmatched; "
        + ", ".join(f"{k} {v}" for k, v in counts.items())
    )
    return EXIT_OK


def _load_report_json(path: str) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    with open(p, encoding="utf-8") as fh:
        return json.load(fh)


def cmd_compare(args) -> int:
    cfg = _config(args)
    ancestor = open_container(args.ancestor)
    descendants = [open_container(d) for d in args.descendants]
    result = compare_against_ancestor(ancestor, descendants, cfg, _ruleset(cfg), groups=_groups(args))
    for path in args.reports:
        doc = _load_report_json(path)
        result.model_summaries[doc["checkpoint_id"]] = doc["summary"]
    emit_report(result, cfg.output.format, cfg.output.dir)
    for entry in result.descendants:
        counts = entry.to_dict()["regime_counts"]
        print(f"{result.ancestor_id} -> {entry.target_id}: " + ", ".join(f"{k} {v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_trend(args) -> int:
    cfg = _config(args)
    docs = [_load_report_json(p) for p in args.reports]
    series = TrendSeries(
        checkpoint_ids=[d["checkpoint_id"] for d in docs],
        proportions_pct=[float(d["summary"]["band_proportion"]) for d in docs],
    )
    if args.reference:
        with open(args.reference, encoding="utf-8") as fh:
            series.reference = TrendSeries.from_dict(json.load(fh))
    series.label = classify_trend(series, cfg.band, cfg.trend)
    out_dir = Path(args.out or cfg.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "trend.json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(series.to_dict(cfg.band), indent=2) + "\n")
    print(series.label.value)
    return EXIT_OK


def cmd_synth(args) -> int:
    synthesize(load_manifest(args.manifest), args.out)
    print(args.out)
    return EXIT_OK


COMMANDS = {
    "analyze": cmd_analyze,
    "diff": cmd_diff,
    "compare": cmd_compare,
    "trend": cmd_trend,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.ERROR if args.quiet else logging.WARNING,
        format="%(levelname)s: %(message)s",
        force=True,
    )
    try:
        return COMMANDS[args.command](args)
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (ParamScopeError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # out-of-range parameters, e.g. --min-dim 0 or a negative bin width
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``sigfuse <stage> ...`` or ``sigfuse run``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .config import ConfigError, load_config, load_models
from .records import read_fused
from .traffic import check_consistency, summarize_violations

log = logging.getLogger("sigfuse")


def _config(args):
    return load_config(args.config, args.seed_override)


def _models(args):
    if getattr(args, "models", None):
        return load_models(args.models)
    return _config(args).models


def _echo(obj) -> None:
    print(json.dumps(obj, indent=2))


def cmd_gen(args) -> int:
    given = {"n_subscribers": args.subscribers, "minutes": args.minutes, "activity_rate": args.rate, "rng_seed": args.seed}
    cfg = replace(_config(args).generator, **{k: v for k, v in given.items() if v is not None})
    cfg.validate()
    _echo(pipeline.gen_files(cfg, Path(args.out)))
    return 0


def cmd_fuse(args) -> int:
    _echo(pipeline.fuse_files(Path(args.inp), Path(args.out), Path(args.stats) if args.stats else None))
    return 0


def cmd_mutate(args) -> int:
    cfg = _config(args)
    seed = args.seed if args.seed is not None else cfg.mutation_seed
    split = args.split_seed if args.split_seed is not None else cfg.split_seed
    report = pipeline.mutate_files(
        Path(args.inp),
        Path(args.out),
        seed,
        Path(args.report) if args.report else None,
        Path(args.origins) if args.origins else None,
        Path(args.pairs) if args.pairs else None,
        split,
        cfg.families,
        cfg.max_retries,
        cfg.pool_fraction,
        cfg.candidate_factor,
    )
    _echo({k: report[k] for k in ("seeds", "expected_without_skips", "total_synthetic_records", "stored_synthetic_records", "pool_candidates", "heldout")})
    return 0


def cmd_flatten(args) -> int:
    _echo(pipeline.flatten_files(
        [Path(p) for p in args.inp], Path(args.out), _models(args), Path(args.origins) if args.origins else None
    ))
    return 0


def cmd_embed(args) -> int:
    cfg = _config(args)
    cache = Path(args.cache) if args.cache else cfg.cache
    min_cov = args.min_coverage if args.min_coverage is not None else cfg.min_coverage
    report = pipeline.embed_files(Path(args.inp), _models(args), cache, Path(args.report) if args.report else None, min_cov)
    _echo(report)
    return 0


def cmd_detect(args) -> int:
    cfg = _config(args)
    audit = pipeline.detect_files(
        Path(args.cache) if args.cache else cfg.cache,
        _models(args),
        Path(args.origins),
        args.pool_seed if args.pool_seed is not None else cfg.pool_seed,
        Path(args.decisions),
        Path(args.audit) if args.audit else None,
        cfg.pool_fraction,
        cfg.contamination,
        cfg.subsample_size,
        cfg.n_trees,
    )
    _echo({m: {"pool": a["size"], "threshold": a["score_threshold"], "flag_rate": a["pool_flag_rate"]} for m, a in audit.items()})
    return 0


def cmd_evaluate(args) -> int:
    models = [m.model_name for m in _models(args)] if (args.models or args.config) else None
    report = pipeline.evaluate_files(
        Path(args.out),
        Path(args.decisions) if args.decisions else None,
        Path(args.origins) if args.origins else None,
        Path(args.pairs) if args.pairs else None,
        models,
        args.fixture,
        Path(args.figures) if args.figures else None,
        Path(args.tables) if args.tables else None,
        args.distance_space,
        Path(args.cache) if args.cache else None,
    )
    section = report if args.fixture else report["heldout_view"]
    for row in section["contingency"]:
        print(
            f"k={row['k']}  |A_k|={row['a'] + row['b']}  background={row['b']}  "
            f"OR={row['odds_ratio']['display']}  p_fisher={row['p_fisher']}  p_chi2={row['p_chi2']}"
        )
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.workdir:
        cfg.workdir = Path(args.workdir).resolve()
        if not (cfg.source.get("paths", {}).get("cache")):
            cfg.cache = cfg.workdir / "cache.jsonl"
    manifest = pipeline.run_all(cfg)
    for stage in manifest["stages"]:
        print(f"{stage['stage']:<9} {stage['seconds']:8.2f}s")
    print(f"report: {cfg.path(pipeline.REPORT)}")
    return 0


def cmd_check(args) -> int:
    records = read_fused(args.inp)
    violations = check_consistency(records)
    _echo({"records": len(records), "violations": len(violations), "by_expectation": summarize_violations(violations)})
    for v in violations[: args.show]:
        print(f"{v.expectation}/{v.check} imsi={v.imsi} {v.minute_ts or ''} {v.detail}")
    return 1 if violations else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sigfuse", description=__doc__)
    parser.add_argument("--config", help="run configuration (TOML); the packaged demo is used when omitted")
    parser.add_argument("--seed-override", action="append", default=[], metavar="K=V",
                        help="override a config value, e.g. detector.pool_seed=3 or pool=3")
    parser.add_argument("--verbose", "-v", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic-subscriber background traffic")
    p.add_argument("--subscribers", type=int)
    p.add_argument("--minutes", type=int)
    p.add_argument("--rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("fuse", help="fuse fragment streams into per-minute records")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stats")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("mutate", help="build the synthetic corpus by field-group swaps")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--report")
    p.add_argument("--origins", help="default: origins.jsonl next to --out")
    p.add_argument("--pairs", help="default: pairs.jsonl next to --out")
    p.set_defaults(func=cmd_mutate)

    p = sub.add_parser("flatten", help="flatten fused records to key=value text")
    p.add_argument("--in", dest="inp", required=True, nargs="+")
    p.add_argument("--models")
    p.add_argument("--origins")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_flatten)

    p = sub.add_parser("embed", help="embed flattened records into the cache")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--models")
    p.add_argument("--cache")
    p.add_argument("--report")
    p.add_argument("--min-coverage", type=float)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("detect", help="fit per-model detectors and write decisions")
    p.add_argument("--cache")
    p.add_argument("--models")
    p.add_argument("--origins", required=True)
    p.add_argument("--pool-seed", type=int)
    p.add_argument("--decisions", required=True)
    p.add_argument("--audit", help="pool audit JSON")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="consensus statistics, tables and figures")
    p.add_argument("--decisions")
    p.add_argument("--origins")
    p.add_argument("--pairs")
    p.add_argument("--models")
    p.add_argument("--out", required=True)
    p.add_argument("--fixture", nargs="?", const="packaged", metavar="COUNTS_JSON",
                   help="evaluate published per-level counts instead of decisions")
    p.add_argument("--figures", metavar="DIR")
    p.add_argument("--tables", metavar="DIR")
    p.add_argument("--distance-space", choices=("decision", "embedding", "both"), default="decision")
    p.add_argument("--cache")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="run every stage from one config")
    p.add_argument("--workdir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check-consistency", help="check fused records against the consistency expectations")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--show", type=int, default=20)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (pipeline.StageError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

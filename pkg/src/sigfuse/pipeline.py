"""Pipeline stages.

Each ``*_files`` function reads and writes artifacts at explicit paths (these
back the individual CLI subcommands).  ``run_all`` chains them under one
run directory and writes a manifest with input hashes, seeds and timings.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Sequence

from . import evaluation, traffic
from .config import RunConfig
from .detection import DetectionError, decide_all, fit_detector
from .embedding import EmbeddingCache, EmbeddingError, FlatItem, ModelConfig, embed_corpus
from .fusion import fuse_streams
from .mutation import FAMILY_IDS, MutationError, generate_synthetic, split_heldout, unique_records
from .records import (
    RecordError,
    RecordOrigin,
    read_fragment_dir,
    read_fused,
    read_origins,
    record_hash,
    write_fragment_dir,
    write_fused,
)
from .serialization import estimate_tokens, flatten

log = logging.getLogger(__name__)

FRAGMENTS = "fragments"
BACKGROUND = "background.jsonl"
SYNTHETIC = "synthetic.jsonl"
ORIGINS = "origins.jsonl"
PAIRS = "pairs.jsonl"
FLAT = "flat.jsonl"
DECISIONS = "decisions.jsonl"
REPORT = "report.json"
MANIFEST = "manifest.json"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str, record_hash: str | None = None):
        where = f" (record {record_hash})" if record_hash else ""
        super().__init__(f"stage {stage} failed{where}: {message}")
        self.stage = stage
        self.record_hash = record_hash


def write_json(path: Path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def read_json(path: Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------------
# path-level stages


def gen_files(config: traffic.GeneratorConfig, out_dir: Path) -> dict:
    streams = traffic.generate(config)
    write_fragment_dir(out_dir, streams)
    return {p: len(v) for p, v in streams.items()}


def fuse_files(in_dir: Path, out: Path, stats_path: Path | None = None) -> dict:
    records, stats = fuse_streams(read_fragment_dir(in_dir))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_fused(out, records)
    if stats_path is not None:
        write_json(stats_path, stats.to_json())
    return stats.to_json()


def write_origin_lines(path: Path, origins: dict[str, RecordOrigin]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h in sorted(origins):
            fh.write(json.dumps({"hash": h, "origin": origins[h].to_json()}, separators=(",", ":")) + "\n")


def mutate_files(
    in_path: Path,
    out: Path,
    seed: int,
    report_path: Path | None = None,
    origins_path: Path | None = None,
    pairs_path: Path | None = None,
    split_seed: int | None = None,
    families: Sequence[str] = FAMILY_IDS,
    max_retries: int = 3,
    pool_fraction: float = 0.05,
    candidate_factor: float = 2.0,
) -> dict:
    """Synthetic corpus with its pool/held-out split, origins (background included) and pairs."""
    background = read_fused(in_path)
    corpus = generate_synthetic(background, seed, families, max_retries)
    unique, repeats = unique_records(corpus.records)
    split_seed = seed if split_seed is None else split_seed
    pool, heldout = split_heldout(unique, len(background), split_seed, pool_fraction, candidate_factor)
    synthetic = sorted(pool + heldout, key=record_hash)
    hashes = write_fused(out, synthetic)
    origins = {record_hash(r): RecordOrigin() for r in background}
    origins.update({h: r.origin for h, r in zip(hashes, synthetic)})
    origins_path = origins_path or out.with_name(ORIGINS)
    pairs_path = pairs_path or out.with_name(PAIRS)
    write_origin_lines(origins_path, origins)
    evaluation.write_pairs(pairs_path, evaluation.pairs_from_origins(origins))
    report = corpus.report_json(len(background))
    report["repeated_content_dropped"] = repeats
    report["stored_synthetic_records"] = len(synthetic)
    report["pool_candidates"] = len(pool)
    report["heldout"] = len(heldout)
    if report_path is not None:
        write_json(report_path, report)
    return report


def flatten_files(in_paths: Sequence[Path], out: Path, models: Sequence[ModelConfig], origins_path: Path | None = None) -> dict:
    """One line per record: {hash, kind, text, token_estimate, eligible_models}."""
    origins = read_origins(origins_path) if origins_path and Path(origins_path).exists() else {}
    count = 0
    with open(out, "w", encoding="utf-8") as fh:
        for path in in_paths:
            for rec in read_fused(path, origins or None):
                h = record_hash(rec)
                if origins and h not in origins:
                    raise StageError("flatten", "record missing from origins", h)
                flat = flatten(rec)
                fh.write(json.dumps(
                    {
                        "hash": h,
                        "kind": rec.origin.kind,
                        "token_estimate": flat.token_estimate,
                        "eligible_models": [
                            m.model_name for m in models if estimate_tokens(flat.text, m) <= m.context_window
                        ],
                        "text": flat.text,
                    },
                    separators=(",", ":"),
                ) + "\n")
                count += 1
    return {"records": count}


def read_flat(path: Path) -> list[FlatItem]:
    with open(path, encoding="utf-8") as fh:
        return [FlatItem(o["hash"], o["text"], o.get("kind", "background")) for o in map(json.loads, fh)]


def embed_files(
    flat_path: Path,
    models: Sequence[ModelConfig],
    cache_path: Path,
    report_path: Path | None = None,
    min_coverage: float = 1.0,
    providers: dict | None = None,
) -> dict:
    report = embed_corpus(read_flat(flat_path), models, EmbeddingCache(cache_path), providers, min_coverage)
    if report_path is not None:
        write_json(report_path, report)
    return report


def detect_files(
    cache_path: Path,
    models: Sequence[ModelConfig],
    origins_path: Path,
    pool_seed: int,
    decisions_path: Path,
    audit_path: Path | None = None,
    pool_fraction: float = 0.05,
    contamination: float = 0.01,
    subsample_size: int = 256,
    n_trees: int = 100,
) -> dict:
    origins = read_origins(origins_path)
    cache = EmbeddingCache(cache_path)
    hashes = sorted(origins)
    decisions = []
    audit = {}
    for model in models:
        vectors = {h: v for h, v in cache.items(model.model_name).items() if h in origins}
        background = {h: vectors[h] for h in hashes if origins[h].kind == "background" and h in vectors}
        candidates = {
            h: (origins[h].mutation.family_id, vectors[h])
            for h in hashes
            if origins[h].split == "pool_candidate" and h in vectors
        }
        try:
            state = fit_detector(
                model.model_name, background, candidates, pool_seed,
                pool_fraction, contamination, subsample_size, n_trees,
            )
        except DetectionError as exc:
            raise StageError("detect", str(exc)) from exc
        leaked = [h for h in state.pool.hashes if origins[h].split == "heldout"]
        if leaked:
            raise StageError("detect", "held-out synthetic record in the training pool", leaked[0])
        decisions.extend(decide_all(state, hashes, vectors))
        audit[model.model_name] = {
            **state.pool.to_json(),
            "pool_sha256": hashlib.sha256("\n".join(state.pool.hashes).encode()).hexdigest(),
            "score_threshold": state.score_threshold,
            "pool_flag_rate": state.pool_flag_rate,
            "vectors": len(vectors),
        }
    evaluation.write_decisions(decisions_path, decisions)
    if audit_path is not None:
        write_json(audit_path, audit)
    return audit


def _side_reports(directory: Path) -> dict:
    extra = {}
    for name in ("fusion_stats", "mutation_report", "embed_report", "pool"):
        p = directory / f"{name}.json"
        if p.exists():
            extra[name] = read_json(p)
    if "mutation_report" in extra:
        mr = extra["mutation_report"]
        extra["count_identity"] = {
            "seeds": mr["seeds"],
            "expected_without_skips": mr["expected_without_skips"],
            "actual": mr["total_synthetic_records"],
            "stored_unique": mr.get("stored_synthetic_records"),
            "published_instance": dict(evaluation.count_identity(8122), synthetic_total=211172,
                                       holds=evaluation.count_identity(8122)["product"] == 211172),
        }
    return extra


def evaluate_files(
    out: Path,
    decisions_path: Path | None = None,
    origins_path: Path | None = None,
    pairs_path: Path | None = None,
    models: Sequence[str] | None = None,
    fixture: str | Path | None = None,
    figures_dir: Path | None = None,
    tables_dir: Path | None = None,
    distance_space: str = "decision",
    cache_path: Path | None = None,
) -> dict:
    """Write report.json plus CSV tables (and PNG figures when ``figures_dir`` is set).

    ``fixture`` switches to published-count mode; the value "packaged" uses
    the counts shipped with the package.
    """
    if fixture:
        counts = evaluation.load_published_counts(None if str(fixture) == "packaged" else fixture)
        report = evaluation.fixture_report(counts)
        sections = {"fixture_": report}
    else:
        if decisions_path is None or origins_path is None:
            raise StageError("evaluate", "decisions and origins are required outside fixture mode")
        origins = read_origins(origins_path)
        matrix = evaluation.consensus(evaluation.read_decisions(decisions_path), origins, models)
        pairs = evaluation.read_pairs(pairs_path) if pairs_path and Path(pairs_path).exists() else None
        embeddings = None
        if distance_space != "decision":
            if cache_path is None:
                raise StageError("evaluate", "embedding-space distances need the embedding cache")
            cache = EmbeddingCache(cache_path)
            embeddings = {m: cache.items(m) for m in matrix.models}
        extra = _side_reports(Path(decisions_path).parent)
        report = evaluation.build_report(matrix, pairs, embeddings, distance_space, extra)
        sections = {"": report["heldout_view"], "all_synthetic_": report["all_synthetic_view"]}
    write_json(out, report)
    from . import plotting

    tables_dir = tables_dir or Path(out).parent / "tables"
    for prefix, section in sections.items():
        plotting.write_tables(section, tables_dir, prefix)
        if figures_dir is not None:
            plotting.render_figures(section, figures_dir, prefix)
    return report


# --------------------------------------------------------------------------
# configuration-driven run


def _stage_calls(cfg: RunConfig) -> dict:
    p = cfg.path
    model_names = [m.model_name for m in cfg.models]
    return {
        "gen": (lambda: gen_files(cfg.generator, p(FRAGMENTS)), []),
        "fuse": (
            lambda: fuse_files(p(FRAGMENTS), p(BACKGROUND), p("fusion_stats.json")),
            [f"{FRAGMENTS}/ss7.jsonl", f"{FRAGMENTS}/diameter.jsonl", f"{FRAGMENTS}/gtp.jsonl"],
        ),
        "mutate": (
            lambda: mutate_files(
                p(BACKGROUND), p(SYNTHETIC), cfg.mutation_seed, p("mutation_report.json"), p(ORIGINS), p(PAIRS),
                cfg.split_seed, cfg.families, cfg.max_retries, cfg.pool_fraction, cfg.candidate_factor,
            ),
            [BACKGROUND],
        ),
        "flatten": (
            lambda: flatten_files([p(BACKGROUND), p(SYNTHETIC)], p(FLAT), cfg.models, p(ORIGINS)),
            [BACKGROUND, SYNTHETIC, ORIGINS],
        ),
        "embed": (
            lambda: embed_files(p(FLAT), cfg.models, cfg.cache, p("embed_report.json"), cfg.min_coverage),
            [FLAT],
        ),
        "detect": (
            lambda: detect_files(
                cfg.cache, cfg.models, p(ORIGINS), cfg.pool_seed, p(DECISIONS), p("pool.json"),
                cfg.pool_fraction, cfg.contamination, cfg.subsample_size, cfg.n_trees,
            ),
            [ORIGINS],
        ),
        "evaluate": (
            lambda: evaluate_files(
                p(REPORT), p(DECISIONS), p(ORIGINS), p(PAIRS), model_names, cfg.fixture,
                p("figures") if cfg.figures else None, p("tables"), cfg.distance_space, cfg.cache,
            ),
            [] if cfg.fixture else [DECISIONS, ORIGINS, PAIRS],
        ),
    }


STAGE_ORDER = ("gen", "fuse", "mutate", "flatten", "embed", "detect", "evaluate")


def run_stage(cfg: RunConfig, name: str) -> dict:
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    call, _ = _stage_calls(cfg)[name]
    try:
        return call()
    except StageError:
        raise
    except (RecordError, MutationError, EmbeddingError, DetectionError, OSError, ValueError, KeyError) as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}", getattr(exc, "record_hash", None)) from exc


def run_all(cfg: RunConfig, stages: Sequence[str] = STAGE_ORDER) -> dict:
    """Run the stages in order; report.json stays free of timings, manifest.json has them."""
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    calls = _stage_calls(cfg)
    manifest: dict = {
        "config": cfg.source,
        "seeds": cfg.seeds(),
        "workdir": str(cfg.workdir),
        "cache": str(cfg.cache),
        "stages": [],
    }
    for name in stages:
        inputs = {rel: file_sha256(cfg.path(rel)) for rel in calls[name][1] if cfg.path(rel).exists()}
        started = time.perf_counter()
        log.info("stage %s", name)
        summary = run_stage(cfg, name)
        manifest["stages"].append({
            "stage": name,
            "inputs": inputs,
            "seconds": round(time.perf_counter() - started, 3),
            "summary": summary if name in ("gen", "fuse", "flatten") else None,
        })
    artifacts = {}
    for path in sorted(cfg.workdir.rglob("*")):
        if path.is_file() and path.name != MANIFEST:
            artifacts[str(path.relative_to(cfg.workdir))] = file_sha256(path)
    if cfg.cache.exists() and not cfg.cache.is_relative_to(cfg.workdir):
        artifacts[str(cfg.cache)] = file_sha256(cfg.cache)
    manifest["artifacts"] = artifacts
    write_json(cfg.path(MANIFEST), manifest)
    return manifest

"""Consensus aggregation and the evaluation report.

A DecisionMatrix has one row per evaluated record and one column per model.
From it come the agreement histogram, the cumulative threshold sets A_k with
precision, the 2x2 association tests per threshold, per-model counts, and
the cosine distances between each synthetic record and its seed.
"""

from __future__ import annotations

import json
import logging
import statistics
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .detection import ANOMALOUS, BENIGN, NO_DECISION, Decision
from .embedding import IntegrityError, cosine_distance_vectors
from .records import RecordOrigin
from .stats import (
    OddsRatio,
    PValue,
    bh_adjust_pvalues,
    chi_square_p,
    decision_cosine_distance,
    fisher_exact_two_sided,
    odds_ratio,
    selected_test,
)

log = logging.getLogger(__name__)

_CODES = {ANOMALOUS: 1, BENIGN: 0, NO_DECISION: -1}


@dataclass
class DecisionMatrix:
    """``cells`` holds 1 / 0 / -1 for anomalous / benign / no_decision.

    Matrices built from published counts have no cells, only S and N.
    """

    models: tuple[str, ...]
    synthetic: np.ndarray
    S: np.ndarray
    N: np.ndarray
    hashes: list[str] = field(default_factory=list)
    cells: np.ndarray | None = None
    origins: dict[str, RecordOrigin] = field(default_factory=dict)

    def __post_init__(self):
        if not (np.all(self.S >= 0) and np.all(self.S <= self.N) and np.all(self.N <= len(self.models))):
            raise IntegrityError("consensus counts violate 0 <= S <= N <= roster size")

    def __len__(self) -> int:
        return int(self.S.shape[0])

    @property
    def eligible(self) -> np.ndarray:
        return self.N >= 1

    @classmethod
    def from_decisions(
        cls,
        decisions: Iterable[Decision],
        origins: Mapping[str, RecordOrigin],
        roster: Sequence[str] | None = None,
    ) -> "DecisionMatrix":
        decisions = list(decisions)
        models = tuple(roster) if roster else tuple(sorted({d.model_name for d in decisions}))
        hashes = sorted(origins)
        row = {h: i for i, h in enumerate(hashes)}
        col = {m: j for j, m in enumerate(models)}
        cells = np.full((len(hashes), len(models)), -1, dtype=np.int8)
        seen = set()
        for d in decisions:
            key = (d.record_hash, d.model_name)
            if key in seen:
                raise IntegrityError(f"duplicate decision for record {d.record_hash} model {d.model_name}")
            seen.add(key)
            if d.model_name not in col:
                raise IntegrityError(f"decision from model {d.model_name!r} outside the roster")
            if d.record_hash not in row:
                raise IntegrityError(f"decision for unknown record {d.record_hash}")
            cells[row[d.record_hash], col[d.model_name]] = _CODES[d.state]
        synthetic = np.array([origins[h].kind == "synthetic" for h in hashes], dtype=bool)
        S = (cells == 1).sum(axis=1)
        N = (cells >= 0).sum(axis=1)
        return cls(models, synthetic, S, N, hashes, cells, dict(origins))

    @classmethod
    def from_counts(
        cls,
        synthetic_by_S: Mapping[int, int],
        background_by_S: Mapping[int, int],
        roster_size: int = 6,
        models: Sequence[str] | None = None,
    ) -> "DecisionMatrix":
        """Expand per-level counts into rows; every row counts as covered by the full roster."""
        models = tuple(models) if models else tuple(f"model_{i + 1}" for i in range(roster_size))
        S_parts, kind_parts = [], []
        for is_synth, hist in ((True, synthetic_by_S), (False, background_by_S)):
            for s, count in sorted((int(k), int(v)) for k, v in hist.items()):
                S_parts.append(np.full(count, s, dtype=np.int64))
                kind_parts.append(np.full(count, is_synth, dtype=bool))
        S = np.concatenate(S_parts) if S_parts else np.zeros(0, dtype=np.int64)
        synthetic = np.concatenate(kind_parts) if kind_parts else np.zeros(0, dtype=bool)
        N = np.full(S.shape[0], len(models), dtype=np.int64)
        return cls(models, synthetic, S, N)

    def subset(self, mask: np.ndarray) -> "DecisionMatrix":
        idx = np.flatnonzero(mask)
        hashes = [self.hashes[i] for i in idx] if self.hashes else []
        return DecisionMatrix(
            self.models,
            self.synthetic[idx],
            self.S[idx],
            self.N[idx],
            hashes,
            None if self.cells is None else self.cells[idx],
            {h: self.origins[h] for h in hashes if h in self.origins},
        )

    def row_of(self, record_hash: str) -> int:
        if not hasattr(self, "_index"):
            self._index = {h: i for i, h in enumerate(self.hashes)}
        return self._index[record_hash]

    def decision_vector(self, record_hash: str) -> list[int]:
        """Binary vote per roster slot, no_decision mapped to 0."""
        if self.cells is None:
            raise IntegrityError("matrix has no per-model cells")
        return [1 if c == 1 else 0 for c in self.cells[self.row_of(record_hash)]]


def consensus(decisions: Iterable[Decision], origins: Mapping[str, RecordOrigin], roster=None) -> DecisionMatrix:
    return DecisionMatrix.from_decisions(decisions, origins, roster)


# --------------------------------------------------------------------------
# agreement and thresholds


def agreement_histogram(matrix: DecisionMatrix) -> dict:
    T = len(matrix)
    levels = []
    for s in range(len(matrix.models) + 1):
        at = matrix.eligible & (matrix.S == s)
        synth = int((at & matrix.synthetic).sum())
        bg = int((at & ~matrix.synthetic).sum())
        levels.append({
            "S": s,
            "synthetic": synth,
            "background": bg,
            "total": synth + bg,
            "percent_of_corpus": 100.0 * (synth + bg) / T if T else None,
        })
    flagged = sum(lv["total"] for lv in levels[1:])
    return {
        "corpus_size": T,
        "no_decision_rows": int((~matrix.eligible).sum()),
        "levels": levels,
        "total_flagged": flagged,
        "total_flagged_percent": 100.0 * flagged / T if T else None,
    }


@dataclass(frozen=True)
class ThresholdSummary:
    k: int
    members: np.ndarray
    total: int
    background: int
    background_share: float | None
    corpus_fraction: float | None

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "total": self.total,
            "background": self.background,
            "background_share": self.background_share,
            "corpus_fraction": self.corpus_fraction,
        }


def _check_k(matrix: DecisionMatrix, k: int) -> None:
    if not 1 <= k <= len(matrix.models):
        raise ValueError(f"threshold k={k} outside 1..{len(matrix.models)}")


def threshold_set(matrix: DecisionMatrix, k: int) -> ThresholdSummary:
    """A_k: covered rows with S >= k, plus its background count and corpus fraction."""
    _check_k(matrix, k)
    members = np.flatnonzero(matrix.eligible & (matrix.S >= k))
    total = int(members.size)
    background = int((~matrix.synthetic[members]).sum())
    T = len(matrix)
    return ThresholdSummary(
        k,
        members,
        total,
        background,
        background / total if total else None,
        total / T if T else None,
    )


def precision_at(matrix: DecisionMatrix, k: int) -> float | None:
    """Synthetic share of A_k; None when A_k is empty."""
    summary = threshold_set(matrix, k)
    if summary.total == 0:
        return None
    return (summary.total - summary.background) / summary.total


@dataclass
class ContingencyResult:
    k: int
    a: int
    b: int
    c: int
    d: int
    odds: OddsRatio
    p_fisher: PValue
    p_chi2: PValue
    selected: str
    p_selected: PValue
    p_fisher_adjusted: PValue | None = None

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "a": self.a,
            "b": self.b,
            "c": self.c,
            "d": self.d,
            "odds_ratio": self.odds.to_json(),
            "p_fisher": self.p_fisher.to_json(),
            "p_fisher_log10": self.p_fisher.log10,
            "p_chi2": self.p_chi2.to_json(),
            "p_chi2_log10": self.p_chi2.log10,
            "selected_test": self.selected,
            "p_selected": self.p_selected.to_json(),
            "p_fisher_adjusted": None if self.p_fisher_adjusted is None else self.p_fisher_adjusted.to_json(),
            "p_fisher_adjusted_log10": None if self.p_fisher_adjusted is None else self.p_fisher_adjusted.log10,
        }


def contingency_at(matrix: DecisionMatrix, k: int) -> ContingencyResult:
    """Synthetic/background by S>=k / S<k over covered rows."""
    _check_k(matrix, k)
    el = matrix.eligible
    high = matrix.S >= k
    syn = matrix.synthetic
    a = int((el & high & syn).sum())
    b = int((el & high & ~syn).sum())
    c = int((el & ~high & syn).sum())
    d = int((el & ~high & ~syn).sum())
    if a + b + c + d == 0:
        raise ValueError("no covered rows")
    test, p_sel = selected_test(a, b, c, d)
    return ContingencyResult(
        k, a, b, c, d, odds_ratio(a, b, c, d), fisher_exact_two_sided(a, b, c, d), chi_square_p(a, b, c, d), test, p_sel
    )


def contingency_table(matrix: DecisionMatrix) -> list[ContingencyResult]:
    """All thresholds, with Fisher p-values BH-adjusted across them."""
    rows = [contingency_at(matrix, k) for k in range(1, len(matrix.models) + 1)]
    for row, adj in zip(rows, bh_adjust_pvalues([r.p_fisher for r in rows])):
        row.p_fisher_adjusted = adj
    return rows


def per_model_counts(matrix: DecisionMatrix) -> list[dict]:
    if matrix.cells is None:
        raise IntegrityError("matrix has no per-model cells")
    syn = matrix.synthetic
    n_syn, n_bg = int(syn.sum()), int((~syn).sum())
    out = []
    for j, name in enumerate(matrix.models):
        col = matrix.cells[:, j]
        sp = int((syn & (col >= 0)).sum())
        bp = int((~syn & (col >= 0)).sum())
        out.append({
            "model": name,
            "synthetic_processed": sp,
            "background_processed": bp,
            "synthetic_coverage": sp / n_syn if n_syn else None,
            "background_coverage": bp / n_bg if n_bg else None,
            "synthetic_anomalous": int((syn & (col == 1)).sum()),
            "background_anomalous": int((~syn & (col == 1)).sum()),
        })
    return out


# --------------------------------------------------------------------------
# pair distances


@dataclass(frozen=True)
class PairDistance:
    seed_hash: str
    synthetic_hash: str
    family_id: str
    synthetic_S: int
    decision_distance: float | None
    embedding_distance: dict[str, float | None] | None = None

    @property
    def defined(self) -> bool:
        return self.decision_distance is not None


def pairs_from_origins(origins: Mapping[str, RecordOrigin]) -> list[dict]:
    return [
        {
            "synthetic_hash": h,
            "seed_hash": o.mutation.seed_hash,
            "partner_hash": o.mutation.partner_hash,
            "family_id": o.mutation.family_id,
        }
        for h, o in sorted(origins.items())
        if o.mutation is not None
    ]


def pair_distances(
    matrix: DecisionMatrix,
    pairs: Iterable[Mapping[str, str]],
    embeddings: Mapping[str, Mapping[str, np.ndarray]] | None = None,
) -> list[PairDistance]:
    present = set(matrix.hashes)
    out = []
    for pair in pairs:
        syn, seed = pair["synthetic_hash"], pair["seed_hash"]
        if syn not in present or seed not in present:
            continue
        emb = None
        if embeddings is not None:
            emb = {}
            for model, vectors in embeddings.items():
                u, v = vectors.get(seed), vectors.get(syn)
                emb[model] = None if u is None or v is None else cosine_distance_vectors(u, v)
        out.append(PairDistance(
            seed,
            syn,
            pair["family_id"],
            int(matrix.S[matrix.row_of(syn)]),
            decision_cosine_distance(matrix.decision_vector(seed), matrix.decision_vector(syn)),
            emb,
        ))
    return out


def _summary(values: list[float]) -> dict:
    return {"pairs": len(values), "mean": statistics.fmean(values), "median": statistics.median(values)}


def pair_distance_report(
    matrix: DecisionMatrix,
    pairs: Iterable[Mapping[str, str]],
    embeddings: Mapping[str, Mapping[str, np.ndarray]] | None = None,
    space: str = "decision",
) -> dict:
    """Mean/median seed-to-synthetic cosine distance per synthetic consensus level.

    ``space`` is "decision" (binary vote vectors), "embedding" (per-model
    embedding vectors) or "both".  Pairs with an all-zero vote vector are
    counted and left out of the decision-space aggregates.
    """
    if space not in ("decision", "embedding", "both"):
        raise ValueError(f"unknown distance space {space!r}")
    want_emb = space in ("embedding", "both")
    rows = pair_distances(matrix, pairs, embeddings if want_emb else None)
    levels, notes = [], []
    undefined = 0
    for s in range(1, len(matrix.models) + 1):
        at = [r for r in rows if r.synthetic_S == s]
        if not at:
            notes.append(f"no pairs at S={s}")
            continue
        defined = [r.decision_distance for r in at if r.decision_distance is not None]
        undefined += len(at) - len(defined)
        entry: dict = {"S": s, "pairs": len(at), "undefined": len(at) - len(defined)}
        if space in ("decision", "both"):
            entry["decision"] = _summary(defined) if defined else None
        if want_emb and embeddings is not None:
            entry["embedding"] = {}
            for model in embeddings:
                vals = [r.embedding_distance[model] for r in at if r.embedding_distance.get(model) is not None]
                entry["embedding"][model] = _summary(vals) if vals else None
        levels.append(entry)
    return {
        "space": space,
        "pairs_total": len(rows),
        "pairs_at_S0": sum(1 for r in rows if r.synthetic_S == 0),
        "undefined_pairs": undefined,
        "levels": levels,
        "notes": notes,
    }


# --------------------------------------------------------------------------
# report assembly


def count_identity(seeds: int, families: int = 13, per_swap: int = 2) -> dict:
    return {"seeds": seeds, "families": families, "records_per_swap": per_swap, "product": seeds * families * per_swap}


def statistics_sections(matrix: DecisionMatrix) -> dict:
    ks = range(1, len(matrix.models) + 1)
    thresholds = []
    for k in ks:
        entry = threshold_set(matrix, k).to_json()
        entry["precision"] = precision_at(matrix, k)
        thresholds.append(entry)
    return {
        "rows": len(matrix),
        "synthetic_rows": int(matrix.synthetic.sum()),
        "background_rows": int((~matrix.synthetic).sum()),
        "agreement": agreement_histogram(matrix),
        "thresholds": thresholds,
        "contingency": [r.to_json() for r in contingency_table(matrix)],
    }


def build_report(
    matrix: DecisionMatrix,
    pairs: Sequence[Mapping[str, str]] | None = None,
    embeddings: Mapping[str, Mapping[str, np.ndarray]] | None = None,
    distance_space: str = "decision",
    extra: Mapping | None = None,
) -> dict:
    """Primary view: background plus held-out synthetic; variant: all synthetic records."""
    if pairs is None:
        pairs = pairs_from_origins(matrix.origins)
    heldout = np.array(
        [not syn or matrix.origins[h].split != "pool_candidate" for h, syn in zip(matrix.hashes, matrix.synthetic)],
        dtype=bool,
    )
    primary = matrix.subset(heldout)
    report: dict = {"models": list(matrix.models)}
    report["heldout_view"] = statistics_sections(primary)
    report["heldout_view"]["per_model"] = per_model_counts(primary)
    report["heldout_view"]["pair_distances"] = pair_distance_report(primary, pairs, embeddings, distance_space)
    report["all_synthetic_view"] = statistics_sections(matrix)
    report["all_synthetic_view"]["per_model"] = per_model_counts(matrix)
    if extra:
        report.update(extra)
    return report


def load_published_counts(path: str | Path | None = None) -> dict:
    if path is None:
        text = resources.files("sigfuse").joinpath("data/published_counts.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    counts = json.loads(text)
    synth = {int(k): int(v) for k, v in counts["synthetic_by_S"].items()}
    if 0 not in synth:
        synth[0] = int(counts["synthetic_total"]) - sum(synth.values())
    counts["synthetic_by_S"] = synth
    counts["background_by_S"] = {int(k): int(v) for k, v in counts["background_by_S"].items()}
    return counts


def fixture_report(counts: Mapping) -> dict:
    """Statistics computed straight from published per-level counts."""
    models = [m["model"] for m in counts.get("models", [])] or None
    matrix = DecisionMatrix.from_counts(counts["synthetic_by_S"], counts["background_by_S"], 6, models)
    report = statistics_sections(matrix)
    per_model = list(counts.get("models", []))
    report["per_model"] = per_model
    if per_model:
        # every anomalous vote is counted once per model and once per consensus level
        votes_syn = sum(s * n for s, n in counts["synthetic_by_S"].items())
        votes_bg = sum(s * n for s, n in counts["background_by_S"].items())
        report["vote_identity"] = {
            "synthetic_votes_by_level": votes_syn,
            "synthetic_votes_by_model": sum(m["synthetic_anomalous"] for m in per_model),
            "background_votes_by_level": votes_bg,
            "background_votes_by_model": sum(m["background_anomalous"] for m in per_model),
        }
    if "seeds" in counts:
        identity = count_identity(int(counts["seeds"]), int(counts.get("families", 13)))
        identity["synthetic_total"] = int(counts.get("synthetic_total", identity["product"]))
        identity["holds"] = identity["product"] == identity["synthetic_total"]
        report["count_identity"] = identity
    return {"mode": "fixture", "models": models, **report}


def read_decisions(path: str | Path) -> list[Decision]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj["state"] not in _CODES:
                raise IntegrityError(f"{path}:{n}: unknown state {obj['state']!r}")
            out.append(Decision(obj["hash"], obj["model"], obj["state"], obj.get("score")))
    return out


def write_decisions(path: str | Path, decisions: Iterable[Decision]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in decisions:
            fh.write(json.dumps(d.to_json(), separators=(",", ":")) + "\n")


def read_pairs(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_pairs(path: str | Path, pairs: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(dict(p), sort_keys=True, separators=(",", ":")) + "\n")

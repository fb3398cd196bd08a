"""Per-model unsupervised detection: standardisation + Isolation Forest.

The forest follows the original algorithm: trees grown on uniform
subsamples of size psi up to height ceil(log2 psi), random split dimension,
split value uniform in the node's range, path length corrected by the
average unsuccessful-search length c(n) at external nodes.  Split
dimensions are drawn among the dimensions that still vary inside the node,
so a node is only left unsplit when its points are all identical.
"""

from __future__ import annotations

import logging
import math
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

EULER_GAMMA = 0.5772156649015329

ANOMALOUS = "anomalous"
BENIGN = "benign"
NO_DECISION = "no_decision"
STATES = (ANOMALOUS, BENIGN, NO_DECISION)


class DetectionError(ValueError):
    pass


# --------------------------------------------------------------------------
# standardisation


@dataclass(frozen=True)
class StandardizationParams:
    mean: np.ndarray
    std: np.ndarray


def standardize_fit(pool: np.ndarray) -> StandardizationParams:
    """Per-dimension mean and population std; zero-variance dims get std 1."""
    pool = np.atleast_2d(np.asarray(pool, dtype=float))
    if pool.shape[0] == 0:
        raise DetectionError("cannot standardise an empty pool")
    mean = pool.mean(axis=0)
    std = pool.std(axis=0)
    std[std == 0] = 1.0
    return StandardizationParams(mean, std)


def standardize_apply(params: StandardizationParams, x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=float) - params.mean) / params.std


# --------------------------------------------------------------------------
# isolation forest


def average_path_length(n) -> np.ndarray | float:
    """c(n) = 2H(n-1) - 2(n-1)/n with c(1) = 0 and c(2) = 1."""
    arr = np.asarray(n, dtype=float)
    out = np.zeros_like(arr)
    two = arr == 2
    big = arr > 2
    out[two] = 1.0
    m = arr[big]
    out[big] = 2.0 * (np.log(m - 1.0) + EULER_GAMMA) - 2.0 * (m - 1.0) / m
    return float(out) if out.ndim == 0 else out


@dataclass
class IsolationTree:
    """Array-backed tree; ``feature == -1`` marks an external node."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    depth: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    def leaf_of(self, X: np.ndarray) -> np.ndarray:
        nodes = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        active = self.feature[nodes] >= 0
        while active.any():
            idx = rows[active]
            cur = nodes[idx]
            go_left = X[idx, self.feature[cur]] < self.threshold[cur]
            nodes[idx] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.feature[nodes] >= 0
        return nodes

    def path_length(self, X: np.ndarray) -> np.ndarray:
        leaves = self.leaf_of(X)
        return self.depth[leaves] + average_path_length(self.size[leaves])


def _grow(X: np.ndarray, height_limit: int, rng: np.random.Generator) -> IsolationTree:
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    size: list[int] = []
    depth: list[int] = []

    def node(d: int, n: int) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(n)
        depth.append(d)
        return len(feature) - 1

    stack = [(node(0, X.shape[0]), np.arange(X.shape[0]), 0)]
    while stack:
        current, idx, d = stack.pop()
        if d >= height_limit or idx.shape[0] <= 1:
            continue
        sub = X[idx]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        varying = np.flatnonzero(hi > lo)
        if varying.size == 0:
            continue
        q = int(varying[rng.integers(varying.size)])
        p = float(rng.uniform(lo[q], hi[q]))
        if not lo[q] < p <= hi[q]:
            p = 0.5 * (lo[q] + hi[q])
        mask = sub[:, q] < p
        li, ri = idx[mask], idx[~mask]
        feature[current] = q
        threshold[current] = p
        left[current] = node(d + 1, li.shape[0])
        right[current] = node(d + 1, ri.shape[0])
        stack.append((right[current], ri, d + 1))
        stack.append((left[current], li, d + 1))

    return IsolationTree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=float),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(size, dtype=np.int64),
        np.asarray(depth, dtype=float),
    )


@dataclass
class IsolationForestModel:
    trees: list[IsolationTree]
    subsample_size: int
    n_trees: int
    height_limit: int
    rng_seed: int | None = None
    n_features: int | None = None
    score_threshold: float | None = None

    def expected_path_length(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.n_features is not None and X.shape[1] != self.n_features:
            raise DetectionError(f"expected {self.n_features} dimensions, got {X.shape[1]}")
        total = np.zeros(X.shape[0])
        for tree in self.trees:
            total += tree.path_length(X)
        return total / len(self.trees)

    def score(self, X: np.ndarray) -> np.ndarray:
        return 2.0 ** (-self.expected_path_length(X) / average_path_length(self.subsample_size))


def iforest_fit(
    pool: np.ndarray,
    subsample_size: int = 256,
    n_trees: int = 100,
    rng_seed: int | np.random.SeedSequence = 0,
) -> IsolationForestModel:
    pool = np.atleast_2d(np.asarray(pool, dtype=float))
    if pool.shape[0] < 2:
        raise DetectionError("Isolation Forest needs at least two pool vectors")
    psi = min(subsample_size, pool.shape[0])
    height_limit = math.ceil(math.log2(psi))
    rng = np.random.default_rng(rng_seed)
    trees = []
    for _ in range(n_trees):
        sample = rng.choice(pool.shape[0], size=psi, replace=False)
        trees.append(_grow(pool[sample], height_limit, rng))
    return IsolationForestModel(
        trees,
        psi,
        n_trees,
        height_limit,
        rng_seed if isinstance(rng_seed, int) else None,
        pool.shape[1],
    )


def iforest_score(model: IsolationForestModel, vector: np.ndarray) -> float | np.ndarray:
    """Anomaly score in (0, 1); a 1-D input gives a float."""
    vector = np.asarray(vector, dtype=float)
    scores = model.score(vector)
    return float(scores[0]) if vector.ndim == 1 else scores


def threshold_from_contamination(train_scores: Sequence[float], contamination: float = 0.01) -> float:
    """The ceil((1 - contamination) * n)-th smallest training score.

    At most ``contamination * n`` training scores lie strictly above it.
    """
    scores = np.sort(np.asarray(train_scores, dtype=float))
    if scores.size == 0:
        raise DetectionError("no training scores")
    k = math.ceil((1 - Fraction(str(contamination))) * scores.size)
    return float(scores[max(k, 1) - 1])


# --------------------------------------------------------------------------
# pool and per-model state


@dataclass(frozen=True)
class Decision:
    record_hash: str
    model_name: str
    state: str
    score: float | None = None

    def to_json(self) -> dict:
        return {"hash": self.record_hash, "model": self.model_name, "state": self.state, "score": self.score}


@dataclass
class Pool:
    hashes: list[str]
    vectors: np.ndarray
    background: int
    synthetic_by_family: dict[str, int]
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "size": len(self.hashes),
            "background": self.background,
            "synthetic": sum(self.synthetic_by_family.values()),
            "synthetic_by_family": dict(sorted(self.synthetic_by_family.items())),
            "warnings": self.warnings,
        }


def _stratified_draw(
    by_family: Mapping[str, Sequence[str]], quota: int, rng: np.random.Generator
) -> tuple[list[str], list[str]]:
    """Round-robin over shuffled families until ``quota`` is met or candidates run out."""
    queues = {fid: list(rng.permutation(sorted(members))) for fid, members in sorted(by_family.items())}
    drawn: list[str] = []
    families = sorted(queues)
    while len(drawn) < quota and any(queues.values()):
        order = [families[i] for i in rng.permutation(len(families))]
        for fid in order:
            if len(drawn) >= quota:
                break
            if queues[fid]:
                drawn.append(str(queues[fid].pop()))
    warnings = []
    if len(drawn) < quota:
        warnings.append(f"only {len(drawn)} synthetic candidates for a quota of {quota}")
    return drawn, warnings


def build_pool(
    background: Mapping[str, np.ndarray],
    candidates: Mapping[str, tuple[str, np.ndarray]],
    fraction: float = 0.05,
    rng_seed: int | np.random.SeedSequence = 0,
) -> Pool:
    """All background vectors plus a family-stratified draw of round(fraction * |background|)
    synthetic candidates.  ``candidates`` maps hash -> (family_id, vector)."""
    rng = np.random.default_rng(rng_seed)
    quota = round(fraction * len(background))
    by_family: dict[str, list[str]] = defaultdict(list)
    for h, (fid, _) in candidates.items():
        by_family[fid].append(h)
    drawn, warnings = _stratified_draw(by_family, quota, rng)
    for w in warnings:
        log.warning(w)
    drawn.sort()
    counts: dict[str, int] = defaultdict(int)
    for h in drawn:
        counts[candidates[h][0]] += 1
    bg_hashes = sorted(background)
    hashes = bg_hashes + drawn
    rows = [background[h] for h in bg_hashes] + [candidates[h][1] for h in drawn]
    vectors = np.vstack(rows) if rows else np.zeros((0, 0))
    return Pool(hashes, vectors, len(bg_hashes), dict(counts), warnings)


def model_seed(pool_seed: int, model_name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([pool_seed, zlib.crc32(model_name.encode("utf-8"))])


@dataclass
class DetectorState:
    model_name: str
    params: StandardizationParams
    forest: IsolationForestModel
    score_threshold: float
    pool: Pool
    pool_flag_rate: float

    def scores(self, X: np.ndarray) -> np.ndarray:
        return self.forest.score(standardize_apply(self.params, X))


def fit_detector(
    model_name: str,
    background: Mapping[str, np.ndarray],
    candidates: Mapping[str, tuple[str, np.ndarray]],
    pool_seed: int,
    fraction: float = 0.05,
    contamination: float = 0.01,
    subsample_size: int = 256,
    n_trees: int = 100,
) -> DetectorState:
    seq = model_seed(pool_seed, model_name)
    pool_ss, forest_ss = seq.spawn(2)
    pool = build_pool(background, candidates, fraction, pool_ss)
    if pool.vectors.shape[0] < 2:
        raise DetectionError(f"{model_name}: pool has fewer than two vectors")
    params = standardize_fit(pool.vectors)
    Z = standardize_apply(params, pool.vectors)
    forest = iforest_fit(Z, subsample_size, n_trees, forest_ss)
    train = forest.score(Z)
    threshold = threshold_from_contamination(train, contamination)
    forest.score_threshold = threshold
    rate = float(np.mean(train > threshold))
    return DetectorState(model_name, params, forest, threshold, pool, rate)


def decide(state: DetectorState, record_hash: str, vector: np.ndarray | None) -> Decision:
    if vector is None:
        return Decision(record_hash, state.model_name, NO_DECISION, None)
    score = float(state.scores(np.atleast_2d(vector))[0])
    return Decision(record_hash, state.model_name, ANOMALOUS if score > state.score_threshold else BENIGN, score)


def decide_all(state: DetectorState, hashes: Sequence[str], vectors: Mapping[str, np.ndarray]) -> list[Decision]:
    """Vectorised ``decide`` over many records; missing vectors give no_decision."""
    have = [h for h in hashes if h in vectors]
    scores = {}
    if have:
        X = np.vstack([vectors[h] for h in have])
        scores = dict(zip(have, state.scores(X).tolist()))
    out = []
    for h in hashes:
        if h not in scores:
            out.append(Decision(h, state.model_name, NO_DECISION, None))
        else:
            s = scores[h]
            out.append(Decision(h, state.model_name, ANOMALOUS if s > state.score_threshold else BENIGN, s))
    return out

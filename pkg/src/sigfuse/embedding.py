"""Embedding providers, persistent vector cache and corpus embedding.

Two providers sit behind one ``embed(text) -> ndarray`` call: an HTTP client
for an Ollama-compatible ``/api/embeddings`` service, and a deterministic
feature-hashing embedder used at desk scale where each seed stands in for a
distinct model.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from filelock import FileLock

from .serialization import estimate_tokens

log = logging.getLogger(__name__)

OFFLINE = "offline"


class EmbeddingError(RuntimeError):
    pass


class TransportError(EmbeddingError):
    """Provider unreachable or returned a non-2xx status; retryable."""


class IntegrityError(EmbeddingError):
    """Provider answered with a malformed or wrongly sized vector."""


class ContractViolation(EmbeddingError):
    """embed() called on a record that does not fit the model's window."""


class CoverageError(EmbeddingError):
    def __init__(self, message: str, report: dict):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class ModelConfig:
    model_name: str
    dimension: int
    context_window: int
    tokens_per_char: float = 0.25
    endpoint: str = OFFLINE
    seed: int = 0
    timeout: float = 60.0
    retries: int = 2
    concurrency: int = 4

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if self.context_window < 1:
            raise ValueError("context_window must be >= 1")
        if self.tokens_per_char <= 0:
            raise ValueError("tokens_per_char must be positive")

    @property
    def offline(self) -> bool:
        return self.endpoint == OFFLINE

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known - {"name"}
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        obj = dict(obj)
        if "name" in obj:
            obj["model_name"] = obj.pop("name")
        return cls(**obj)


@dataclass(frozen=True)
class EmbeddingVector:
    model_name: str
    record_hash: str
    values: np.ndarray


# --------------------------------------------------------------------------
# providers


class OfflineEmbedder:
    """Signed feature hashing of ``path=value`` and ``path`` tokens, L2-normalised."""

    def __init__(self, dimension: int, seed: int):
        if dimension < 8:
            raise ValueError("offline embedder needs dimension >= 8")
        self.dimension = dimension
        self.seed = seed
        self._key = hashlib.sha256(f"sigfuse-offline:{seed}".encode()).digest()[:32]
        self._slots: dict[str, tuple[int, float]] = {}

    def _slot(self, feature: str) -> tuple[int, float]:
        slot = self._slots.get(feature)
        if slot is None:
            digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8, key=self._key).digest()
            h = int.from_bytes(digest, "little")
            slot = (h % self.dimension, 1.0 if (h >> 63) & 1 else -1.0)
            self._slots[feature] = slot
        return slot

    def raw(self, text: str) -> np.ndarray:
        """Un-normalised bucket sums."""
        vec = np.zeros(self.dimension)
        for token in text.split(" "):
            if not token:
                continue
            bucket, sign = self._slot("kv\x00" + token)
            vec[bucket] += sign
            path, eq, _ = token.partition("=")
            if eq:
                bucket, sign = self._slot("p\x00" + path)
                vec[bucket] += sign
        return vec

    def embed(self, text: str) -> np.ndarray:
        vec = self.raw(text)
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            # empty text, or features that cancel exactly
            out = np.zeros(self.dimension)
            out[0] = 1.0
            return out
        return vec / norm


def offline_embed(text: str, dimension: int, seed: int) -> np.ndarray:
    return OfflineEmbedder(dimension, seed).embed(text)


class HttpEmbedder:
    """Client for ``POST {endpoint}/api/embeddings`` with ``{model, prompt}`` bodies."""

    def __init__(self, endpoint: str, model_name: str, timeout: float = 60.0, retries: int = 2, client=None):
        import httpx

        self.url = endpoint.rstrip("/") + "/api/embeddings"
        self.model_name = model_name
        self.retries = retries
        self._httpx = httpx
        self._client = client or httpx.Client(timeout=timeout)

    def embed(self, text: str) -> np.ndarray:
        payload = {"model": self.model_name, "prompt": text}
        for attempt in range(self.retries + 1):
            try:
                response = self._client.post(self.url, json=payload)
            except self._httpx.TransportError as exc:
                if attempt == self.retries:
                    raise TransportError(f"{self.url}: {exc}") from exc
                time.sleep(min(0.1 * 2**attempt, 2.0))
                continue
            if response.status_code >= 500 and attempt < self.retries:
                time.sleep(min(0.1 * 2**attempt, 2.0))
                continue
            if not 200 <= response.status_code < 300:
                raise TransportError(f"{self.url}: HTTP {response.status_code}")
            try:
                body = response.json()
            except ValueError:
                raise IntegrityError(f"{self.url}: response is not JSON") from None
            values = body.get("embedding") if isinstance(body, dict) else None
            if not isinstance(values, list) or not values:
                raise IntegrityError(f"{self.url}: response has no embedding field")
            return np.asarray(values, dtype=float)
        raise TransportError(f"{self.url}: retries exhausted")

    def close(self) -> None:
        self._client.close()


def make_provider(model: ModelConfig):
    if model.offline:
        return OfflineEmbedder(model.dimension, model.seed)
    endpoint = os.environ.get("SIGFUSE_EMBED_ENDPOINT", model.endpoint)
    return HttpEmbedder(endpoint, model.model_name, model.timeout, model.retries)


def _checked(values: np.ndarray, model: ModelConfig) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.shape[0] != model.dimension:
        raise IntegrityError(
            f"{model.model_name}: expected {model.dimension} components, got {values.shape}"
        )
    if not np.all(np.isfinite(values)):
        raise IntegrityError(f"{model.model_name}: non-finite embedding component")
    return values


def embed(text: str, model: ModelConfig, provider=None, record_hash: str = "") -> EmbeddingVector:
    """Embed one flattened record; refuses records that exceed the window."""
    if estimate_tokens(text, model) > model.context_window:
        raise ContractViolation(f"{model.model_name}: record {record_hash or '?'} exceeds context window")
    provider = provider or make_provider(model)
    return EmbeddingVector(model.model_name, record_hash, _checked(provider.embed(text), model))


# --------------------------------------------------------------------------
# cache


class EmbeddingCache:
    """Append-only JSONL vector cache keyed by (model, record hash).

    Appends go through one writer lock (thread lock plus an on-disk lock
    file, so several processes can share a cache).  Re-putting an identical
    vector writes nothing; a differing vector is appended and wins on reload.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.touch(exist_ok=True)
        self._lock = threading.Lock()
        self._file_lock = FileLock(str(self.path) + ".lock")
        self._index: dict[tuple[str, str], np.ndarray] = {}
        self._offset = 0
        self.skipped_lines = 0
        with self._lock:
            self._sync()

    def _sync(self) -> None:
        with open(self.path, "rb") as fh:
            fh.seek(self._offset)
            data = fh.read()
        complete = data.rfind(b"\n") + 1
        for raw in data[:complete].splitlines():
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
                values = np.asarray(obj["values"], dtype=float)
                if values.shape != (int(obj["dim"]),) or not np.all(np.isfinite(values)):
                    raise ValueError("bad vector")
                key = (str(obj["model"]), str(obj["hash"]))
            except (ValueError, KeyError, TypeError):
                self.skipped_lines += 1
                log.warning("skipping corrupt cache line in %s", self.path)
                continue
            self._index[key] = values
        self._offset += complete

    def get(self, model_name: str, record_hash: str) -> np.ndarray | None:
        with self._lock:
            return self._index.get((model_name, record_hash))

    def put(self, model_name: str, record_hash: str, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=float)
        line = json.dumps(
            {"model": model_name, "hash": record_hash, "dim": int(values.shape[0]), "values": values.tolist()},
            separators=(",", ":"),
        )
        with self._lock, self._file_lock:
            self._sync()
            current = self._index.get((model_name, record_hash))
            if current is not None and np.array_equal(current, values):
                return
            with open(self.path, "ab") as fh:
                if self._offset and self._tail_is_partial():
                    fh.write(b"\n")
                fh.write(line.encode("utf-8") + b"\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._sync()

    def _tail_is_partial(self) -> bool:
        size = self.path.stat().st_size
        return size > self._offset

    def __contains__(self, key: tuple[str, str]) -> bool:
        with self._lock:
            return key in self._index

    def items(self, model_name: str) -> dict[str, np.ndarray]:
        with self._lock:
            return {h: v for (m, h), v in self._index.items() if m == model_name}


# --------------------------------------------------------------------------
# corpus


@dataclass
class FlatItem:
    record_hash: str
    text: str
    kind: str = "background"


@dataclass
class ModelCoverage:
    model_name: str
    background_total: int = 0
    synthetic_total: int = 0
    background_eligible: int = 0
    synthetic_eligible: int = 0
    background_embedded: int = 0
    synthetic_embedded: int = 0
    cache_hits: int = 0
    provider_calls: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def eligible(self) -> int:
        return self.background_eligible + self.synthetic_eligible

    @property
    def embedded(self) -> int:
        return self.background_embedded + self.synthetic_embedded

    def to_json(self) -> dict:
        def frac(x, n):
            return x / n if n else None

        return {
            "model": self.model_name,
            "background_total": self.background_total,
            "synthetic_total": self.synthetic_total,
            "background_eligible": self.background_eligible,
            "synthetic_eligible": self.synthetic_eligible,
            "background_embedded": self.background_embedded,
            "synthetic_embedded": self.synthetic_embedded,
            "background_coverage": frac(self.background_embedded, self.background_total),
            "synthetic_coverage": frac(self.synthetic_embedded, self.synthetic_total),
            "cache_hits": self.cache_hits,
            "provider_calls": self.provider_calls,
            "failures": len(self.failures),
        }


def embed_corpus(
    items: Sequence[FlatItem],
    models: Sequence[ModelConfig],
    cache: EmbeddingCache,
    providers: dict | None = None,
    min_coverage: float = 1.0,
) -> dict:
    """Embed every eligible item with every model, reusing cached vectors.

    Raises CoverageError when a model embeds less than ``min_coverage`` of
    its eligible items (transport failures are otherwise only counted).
    """
    providers = dict(providers or {})
    report = {}
    for model in models:
        cov = ModelCoverage(model.model_name)
        todo: list[FlatItem] = []
        for item in items:
            synthetic = item.kind == "synthetic"
            if synthetic:
                cov.synthetic_total += 1
            else:
                cov.background_total += 1
            if estimate_tokens(item.text, model) > model.context_window:
                continue
            if synthetic:
                cov.synthetic_eligible += 1
            else:
                cov.background_eligible += 1
            if (model.model_name, item.record_hash) in cache:
                cov.cache_hits += 1
                _count_embedded(cov, item)
            else:
                todo.append(item)
        if todo:
            provider = providers.get(model.model_name) or make_provider(model)
            providers[model.model_name] = provider

            def work(item: FlatItem):
                try:
                    return item, embed(item.text, model, provider, item.record_hash).values, None
                except (TransportError, IntegrityError) as exc:
                    return item, None, exc

            workers = 1 if isinstance(provider, OfflineEmbedder) else max(1, model.concurrency)
            if workers == 1:
                results: Iterable = map(work, todo)
            else:
                pool = ThreadPoolExecutor(max_workers=workers)
                results = pool.map(work, todo)
            for item, values, error in results:
                cov.provider_calls += 1
                if error is not None:
                    cov.failures.append(f"{item.record_hash}: {error}")
                    continue
                cache.put(model.model_name, item.record_hash, values)
                _count_embedded(cov, item)
            if workers > 1:
                pool.shutdown()
        report[model.model_name] = cov
        log.info("%s: embedded %d/%d eligible", model.model_name, cov.embedded, cov.eligible)

    out = {name: cov.to_json() for name, cov in report.items()}
    for name, cov in report.items():
        if cov.eligible and cov.embedded / cov.eligible < min_coverage:
            raise CoverageError(
                f"{name}: embedded {cov.embedded} of {cov.eligible} eligible records "
                f"(minimum coverage {min_coverage:g}); first failure: {cov.failures[:1]}",
                out,
            )
    return out


def _count_embedded(cov: ModelCoverage, item: FlatItem) -> None:
    if item.kind == "synthetic":
        cov.synthetic_embedded += 1
    else:
        cov.background_embedded += 1


def cosine_distance_vectors(u: np.ndarray, v: np.ndarray) -> float | None:
    nu2, nv2 = float(np.dot(u, u)), float(np.dot(v, v))
    if nu2 == 0.0 or nv2 == 0.0:
        return None
    return min(2.0, max(0.0, 1.0 - float(np.dot(u, v)) / math.sqrt(nu2 * nv2)))


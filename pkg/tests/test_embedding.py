import json
import multiprocessing
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from sigfuse.embedding import (
    ContractViolation,
    CoverageError,
    EmbeddingCache,
    FlatItem,
    HttpEmbedder,
    IntegrityError,
    ModelConfig,
    OfflineEmbedder,
    TransportError,
    embed,
    embed_corpus,
    offline_embed,
)
from sigfuse.serialization import flatten

TEXT = "imsi=1 gtp.0.operations.0.apn=internet gtp.0.operations.0.teid=5"


def test_offline_is_deterministic_and_unit_norm():
    a = offline_embed(TEXT, 32, 7)
    assert np.array_equal(a, offline_embed(TEXT, 32, 7))
    assert abs(np.linalg.norm(a) - 1.0) < 1e-9
    assert not np.array_equal(a, offline_embed(TEXT, 32, 8))


def test_token_order_does_not_matter():
    tokens = TEXT.split(" ")
    assert np.array_equal(offline_embed(" ".join(reversed(tokens)), 32, 7), offline_embed(TEXT, 32, 7))


def test_one_token_change_moves_at_most_two_buckets():
    emb = OfflineEmbedder(64, 3)
    other = TEXT.replace("teid=5", "teid=6")
    before, after = emb.raw(TEXT), emb.raw(other)
    assert 1 <= np.count_nonzero(before != after) <= 2
    assert not np.allclose(emb.embed(TEXT), emb.embed(other))


def test_raw_matches_hashing_definition():
    import hashlib

    emb = OfflineEmbedder(16, 5)
    key = hashlib.sha256(b"sigfuse-offline:5").digest()[:32]
    expected = np.zeros(16)
    for token in TEXT.split(" "):
        for feature in ("kv\x00" + token, "p\x00" + token.partition("=")[0]):
            h = int.from_bytes(hashlib.blake2b(feature.encode(), digest_size=8, key=key).digest(), "little")
            expected[h % 16] += 1.0 if (h >> 63) & 1 else -1.0
    assert np.array_equal(emb.raw(TEXT), expected)


def test_empty_text_gives_basis_vector():
    v = offline_embed("", 8, 1)
    assert v.tolist() == [1.0] + [0.0] * 7


def test_dimension_floor():
    with pytest.raises(ValueError):
        OfflineEmbedder(4, 0)


def test_embed_contract():
    model = ModelConfig("tiny", 8, 2)
    with pytest.raises(ContractViolation):
        embed("x" * 100, model)
    vec = embed("ab", model, record_hash="h")
    assert vec.values.shape == (8,) and vec.record_hash == "h"


def test_embed_rejects_wrong_dimension():
    class Wrong:
        def embed(self, text):
            return np.ones(5)

    with pytest.raises(IntegrityError):
        embed("ab", ModelConfig("m", 8, 100), Wrong())


def test_embed_rejects_nan():
    class Bad:
        def embed(self, text):
            return np.array([np.nan] * 8)

    with pytest.raises(IntegrityError):
        embed("ab", ModelConfig("m", 8, 100), Bad())


# cache


def test_cache_put_get(tmp_path):
    cache = EmbeddingCache(tmp_path / "c.jsonl")
    assert cache.get("m", "h") is None
    v = np.array([0.1, 1 / 3, -2.5e-17])
    cache.put("m", "h", v)
    assert np.array_equal(cache.get("m", "h"), v)
    again = EmbeddingCache(tmp_path / "c.jsonl")
    assert np.array_equal(again.get("m", "h"), v)
    assert ("m", "h") in again and ("x", "h") not in again


def test_cache_put_is_idempotent(tmp_path):
    path = tmp_path / "c.jsonl"
    cache = EmbeddingCache(path)
    cache.put("m", "h", np.ones(3))
    cache.put("m", "h", np.ones(3))
    assert len(path.read_text().splitlines()) == 1
    cache.put("m", "h", np.zeros(3))
    assert np.array_equal(EmbeddingCache(path).get("m", "h"), np.zeros(3))


def test_corrupt_line_is_skipped(tmp_path):
    path = tmp_path / "c.jsonl"
    good = json.dumps({"model": "m", "hash": "a", "dim": 2, "values": [1.0, 2.0]})
    bad_dim = json.dumps({"model": "m", "hash": "b", "dim": 3, "values": [1.0, 2.0]})
    path.write_text(good + "\n{not json\n" + bad_dim + "\n")
    cache = EmbeddingCache(path)
    assert cache.skipped_lines == 2
    assert cache.get("m", "b") is None
    assert cache.get("m", "a").tolist() == [1.0, 2.0]


def test_torn_tail_is_completed_on_next_put(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps({"model": "m", "hash": "a", "dim": 1, "values": [1.0]}) + '\n{"model": "m", "ha')
    cache = EmbeddingCache(path)
    cache.put("m", "b", np.array([2.0]))
    reread = EmbeddingCache(path)
    assert reread.get("m", "b").tolist() == [2.0]
    assert reread.get("m", "a").tolist() == [1.0]


def test_concurrent_thread_puts(tmp_path):
    path = tmp_path / "c.jsonl"
    cache = EmbeddingCache(path)
    v = np.arange(16, dtype=float)
    threads = [threading.Thread(target=cache.put, args=("m", "same", v)) for _ in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    lines = path.read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["values"] == v.tolist()


def _put_from_process(path, i):
    cache = EmbeddingCache(path)
    cache.put("m", "same", np.arange(8, dtype=float))
    cache.put("m", f"own-{i}", np.full(8, float(i)))


def test_concurrent_process_puts(tmp_path):
    path = str(tmp_path / "c.jsonl")
    ctx = multiprocessing.get_context("spawn")
    procs = [ctx.Process(target=_put_from_process, args=(path, i)) for i in range(4)]
    for p in procs:
        p.start()
    for p in procs:
        p.join()
    lines = [json.loads(x) for x in open(path).read().splitlines()]
    assert sum(1 for x in lines if x["hash"] == "same") == 1
    assert EmbeddingCache(path).skipped_lines == 0
    assert {x["hash"] for x in lines} == {"same"} | {f"own-{i}" for i in range(4)}


# http provider


class _Handler(BaseHTTPRequestHandler):
    script: list = []
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((self.path, body))
        status, payload = type(self).script.pop(0) if type(self).script else (200, {"embedding": [0.5] * 8})
        raw = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    _Handler.script = []
    _Handler.seen = []
    srv = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}", _Handler
    srv.shutdown()
    srv.server_close()


def test_http_protocol(server):
    url, handler = server
    client = HttpEmbedder(url, "nomic-embed-text", timeout=5, retries=0)
    assert client.embed("a=b").tolist() == [0.5] * 8
    assert handler.seen == [("/api/embeddings", {"model": "nomic-embed-text", "prompt": "a=b"})]


def test_http_retries_server_errors(server):
    url, handler = server
    handler.script = [(503, {}), (500, {})]
    assert HttpEmbedder(url, "m", timeout=5, retries=2).embed("x").shape == (8,)
    assert len(handler.seen) == 3


def test_http_client_error_is_transport_error(server):
    url, handler = server
    handler.script = [(404, {"error": "no model"})]
    with pytest.raises(TransportError):
        HttpEmbedder(url, "m", timeout=5, retries=2).embed("x")
    assert len(handler.seen) == 1


def test_http_missing_field_is_integrity_error(server):
    url, handler = server
    handler.script = [(200, {"vector": [1.0]})]
    with pytest.raises(IntegrityError):
        HttpEmbedder(url, "m", timeout=5, retries=0).embed("x")
    handler.script = [(200, b"not json")]
    with pytest.raises(IntegrityError):
        HttpEmbedder(url, "m", timeout=5, retries=0).embed("x")


def test_http_unreachable():
    with pytest.raises(TransportError):
        HttpEmbedder("http://127.0.0.1:9", "m", timeout=1, retries=1).embed("x")


def test_http_dimension_mismatch_via_embed(server):
    url, _ = server
    model = ModelConfig("m", 16, 100, endpoint=url, retries=0)
    with pytest.raises(IntegrityError):
        embed("x", model, HttpEmbedder(url, "m", retries=0))


# corpus


def _items(sample_record):
    small = FlatItem("a" * 64, flatten(sample_record).text, "background")
    big = FlatItem("b" * 64, flatten(sample_record).text * 3, "synthetic")
    return [small, big]


def test_embed_corpus_coverage_and_warm_cache(tmp_path, sample_record):
    items = _items(sample_record)
    cutoff = flatten(sample_record).token_estimate
    models = [ModelConfig("wide", 16, 8192, seed=1), ModelConfig("short", 16, cutoff, seed=2)]
    cache = EmbeddingCache(tmp_path / "c.jsonl")
    report = embed_corpus(items, models, cache)
    assert report["wide"]["synthetic_coverage"] == 1.0
    assert report["short"]["synthetic_coverage"] == 0.0
    assert report["short"]["background_coverage"] == 1.0
    assert cache.get("short", "b" * 64) is None
    warm = embed_corpus(items, models, EmbeddingCache(tmp_path / "c.jsonl"))
    assert all(r["provider_calls"] == 0 for r in warm.values())
    assert warm["wide"]["cache_hits"] == 2


def test_window_of_one_gives_zero_coverage(tmp_path, sample_record):
    report = embed_corpus(_items(sample_record), [ModelConfig("none", 8, 1)], EmbeddingCache(tmp_path / "c.jsonl"))
    assert report["none"]["background_coverage"] == 0.0 and report["none"]["failures"] == 0


def test_failures_below_min_coverage_raise(tmp_path, sample_record):
    class Flaky:
        def __init__(self):
            self.n = 0

        def embed(self, text):
            self.n += 1
            if self.n == 1:
                raise TransportError("down")
            return np.ones(8)

    model = ModelConfig("flaky", 8, 8192, endpoint="http://unused", concurrency=1)
    with pytest.raises(CoverageError):
        embed_corpus(_items(sample_record), [model], EmbeddingCache(tmp_path / "c.jsonl"), {"flaky": Flaky()})
    report = embed_corpus(_items(sample_record), [model], EmbeddingCache(tmp_path / "d.jsonl"), {"flaky": Flaky()},
                          min_coverage=0.5)
    assert report["flaky"]["failures"] == 1


def test_concurrent_provider_calls(tmp_path, server, sample_record):
    url, handler = server
    items = [FlatItem(f"{i:064x}", f"k={i}", "background") for i in range(20)]
    model = ModelConfig("remote", 8, 8192, endpoint=url, concurrency=4, retries=0)
    cache = EmbeddingCache(tmp_path / "c.jsonl")
    report = embed_corpus(items, [model], cache, {"remote": HttpEmbedder(url, "remote", retries=0)})
    assert report["remote"]["background_embedded"] == 20
    assert len(cache.items("remote")) == 20

import pytest

from sigfuse.records import serialize_fragment, validate_fragment
from sigfuse.traffic import (
    EXPECTATIONS,
    ConfigError,
    GeneratorConfig,
    check_consistency,
    generate,
    summarize_violations,
)
from sigfuse.fusion import fuse_streams

from conftest import small_corpus


def _dump(streams):
    return {p: "\n".join(serialize_fragment(f) for f in frags) for p, frags in streams.items()}


def test_same_seed_same_bytes():
    cfg = GeneratorConfig(50, 10, rng_seed=42)
    assert _dump(generate(cfg)) == _dump(generate(cfg))


def test_different_seed_differs():
    assert _dump(generate(GeneratorConfig(50, 10, rng_seed=1))) != _dump(generate(GeneratorConfig(50, 10, rng_seed=2)))


def test_minimal_corpus_one_fragment_per_protocol():
    streams = generate(GeneratorConfig(1, 1, activity_rate=1.0, rng_seed=5, max_burst=1))
    assert {p: len(v) for p, v in streams.items()} == {"ss7": 1, "diameter": 1, "gtp": 1}
    frags = [v[0] for v in streams.values()]
    assert len({f.imsi for f in frags}) == 1
    assert len({f.timestamp[:16] for f in frags}) == 1


def test_fragments_are_valid():
    streams = generate(GeneratorConfig(40, 5, rng_seed=9))
    for protocol, frags in streams.items():
        for frag in frags:
            validate_fragment(frag.data, protocol)


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_desk_corpus_has_no_violations(seed):
    records, _ = fuse_streams(generate(GeneratorConfig(500, 30, rng_seed=seed)))
    violations = check_consistency(records)
    assert violations == [], summarize_violations(violations)


def test_checker_sees_a_foreign_imsi():
    records = small_corpus()
    rec = records[0].copy()
    protocol = next(p for p in ("ss7", "diameter", "gtp") if rec.lists()[p])
    rec.lists()[protocol][0]["imsi"] = "999999999999999"
    counts = summarize_violations(check_consistency(records[1:] + [rec]))
    assert counts["identity_coherence"] >= 1
    assert set(counts) == set(EXPECTATIONS)


def test_checker_sees_a_shared_pdn_address():
    records = small_corpus()
    with_ip = [r for r in records if any("end_user_addr" in op for g in r.gtp for op in g["operations"])]
    a, b = with_ip[0], next(r for r in with_ip if r.imsi != with_ip[0].imsi)
    b = b.copy()
    ip = a.gtp[0]["operations"][0]["end_user_addr"]["ipv4"]
    for g in b.gtp:
        for op in g["operations"]:
            op["end_user_addr"]["ipv4"] = ip
    counts = summarize_violations(check_consistency(records + [b]))
    assert counts["address_allocation"] >= 1


@pytest.mark.parametrize(
    "kwargs",
    [
        {"n_subscribers": 0, "minutes": 1},
        {"n_subscribers": 1, "minutes": 0},
        {"n_subscribers": 1, "minutes": 1, "activity_rate": 0.0},
        {"n_subscribers": 1, "minutes": 1, "activity_rate": 1.5},
        {"n_subscribers": 1, "minutes": 1, "max_burst": 0},
        {"n_subscribers": 1, "minutes": 1, "protocol_coupling": 2.0},
    ],
)
def test_config_errors(kwargs):
    with pytest.raises(ConfigError):
        generate(GeneratorConfig(**kwargs))


def test_target_tokens_knob_grows_records():
    from sigfuse.serialization import flatten

    def mean_tokens(cfg):
        recs, _ = fuse_streams(generate(cfg))
        return sum(flatten(r).token_estimate for r in recs) / len(recs)

    small = mean_tokens(GeneratorConfig(60, 10, rng_seed=1, target_mean_tokens=300))
    large = mean_tokens(GeneratorConfig(60, 10, rng_seed=1, target_mean_tokens=3000))
    assert large > 2 * small

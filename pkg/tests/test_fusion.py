from collections import Counter
import json

import pytest

from sigfuse.fusion import filter_multiprotocol, fuse, fuse_streams, minute_bucket
from sigfuse.records import Fragment, FusedRecord, serialize_fragment, validate_record
from sigfuse.traffic import GeneratorConfig, generate


@pytest.mark.parametrize(
    "ts, expected",
    [
        ("2025-10-28T07:40:37Z", "2025-10-28T07:40:00Z"),
        ("2025-10-28T07:40:00Z", "2025-10-28T07:40:00Z"),
        ("2025-10-28T07:40:59Z", "2025-10-28T07:40:00Z"),
        ("2025-10-28T07:40:59.999Z", "2025-10-28T07:40:00Z"),
        ("2025-10-28T09:40:37+02:00", "2025-10-28T07:40:00Z"),
    ],
)
def test_minute_bucket(ts, expected):
    assert minute_bucket(ts) == expected


def test_minute_bucket_error_names_value():
    with pytest.raises(ValueError, match="not-a-time"):
        minute_bucket("not-a-time")


def _contains(big, small):
    if isinstance(small, dict):
        return isinstance(big, dict) and all(k in big and _contains(big[k], v) for k, v in small.items())
    if isinstance(small, list):
        return isinstance(big, list) and len(big) >= len(small) and all(_contains(b, s) for b, s in zip(big, small))
    return big == small


def test_sample_fragments_fuse_to_one_record(sample_streams):
    records = fuse(sample_streams)
    assert len(records) == 1
    rec = records[0]
    assert rec.minute_ts == "2025-10-28T07:40:00Z"
    assert rec.imsi == "001010123456789"
    shown = {
        "minute_ts": "2025-10-28T07:40:00Z",
        "imsi": "001010123456789",
        "ss7": [{"cggt": "001234567890", "operations": [{"opc": 1200, "dpc": 1300}]}],
        "diameter": [{"req": {"avps": {"User-Name": "001010123456789",
                                       "Visited-PLMN-Id": {"mcc": "001", "mnc": "01", "mccmnc": "00101"}}}}],
        "gtp": [{"operations": [{"teid_cp": 314159265, "apn": "internet",
                                 "end_user_addr": {"ipv4": "198.51.100.23"}}]}],
    }
    assert _contains(rec.to_json(), shown)
    validate_record(rec)


def test_single_protocol_window(ss7_sample):
    rec, = fuse({"ss7": [Fragment("ss7", ss7_sample)]})
    assert rec.diameter == [] and rec.gtp == []
    kept, stats = filter_multiprotocol([rec])
    assert kept == [] and stats.candidates == 1


def test_gtp_fragments_sorted_by_time(gtp_sample):
    late = dict(gtp_sample, timestamp="2025-10-28T07:40:55Z")
    early = dict(gtp_sample, timestamp="2025-10-28T07:40:12Z")
    rec, = fuse({"gtp": [Fragment("gtp", late), Fragment("gtp", early)]})
    assert [g["timestamp"] for g in rec.gtp] == ["2025-10-28T07:40:12Z", "2025-10-28T07:40:55Z"]


def test_ties_keep_input_order(gtp_sample):
    first = dict(gtp_sample, marker=1)
    second = dict(gtp_sample, marker=2)
    rec, = fuse({"gtp": [Fragment("gtp", first), Fragment("gtp", second)]})
    assert [g["marker"] for g in rec.gtp] == [1, 2]


def test_empty_input():
    assert fuse({}) == []


def test_filter_counts(ss7_sample, gtp_sample, diameter_sample):
    from sigfuse.records import wrap_diameter

    recs = [
        FusedRecord("2025-10-28T07:40:00Z", "1", [ss7_sample]),
        FusedRecord("2025-10-28T07:40:00Z", "2", [ss7_sample], [], [gtp_sample]),
        FusedRecord("2025-10-28T07:40:00Z", "3", [ss7_sample], [wrap_diameter(diameter_sample)], [gtp_sample]),
    ]
    kept, stats = filter_multiprotocol(recs)
    assert [r.imsi for r in kept] == ["2", "3"]
    assert (stats.kept_two_protocols, stats.kept_three_protocols) == (1, 1)


def test_published_fusion_counts_add_up():
    # published fusion counts: kept = exactly-two + all-three
    assert 4680 + 3442 == 8122
    assert 8122 < 78982


def test_fusion_is_content_preserving():
    streams = generate(GeneratorConfig(80, 8, rng_seed=4))
    records = fuse(streams)
    out = Counter()
    for rec in records:
        for protocol in ("ss7", "diameter", "gtp"):
            for frag in rec.fragments(protocol):
                out[(protocol, serialize_fragment(frag))] += 1
    inp = Counter((p, serialize_fragment(f)) for p, frags in streams.items() for f in frags)
    assert out == inp
    keys = [(r.minute_ts, r.imsi) for r in records]
    assert keys == sorted(keys) and len(set(keys)) == len(keys)


def test_fuse_streams_stats_add_up():
    streams = generate(GeneratorConfig(80, 8, rng_seed=4))
    kept, stats = fuse_streams(streams)
    assert stats.kept == len(kept) == stats.kept_two_protocols + stats.kept_three_protocols
    assert stats.ss7_fragments == len(streams["ss7"])
    for rec in kept:
        validate_record(rec)
    assert json.loads(json.dumps(stats.to_json()))["fused_records_considered"] == stats.kept

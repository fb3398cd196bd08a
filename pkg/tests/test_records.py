import hashlib
import json

import pytest
from hypothesis import given, strategies as st

from sigfuse.records import (
    BACKGROUND,
    FusedRecord,
    MutationMetadata,
    ParseError,
    RecordOrigin,
    SchemaError,
    ValidationError,
    canonical_text,
    parse_fragment,
    parse_instant,
    read_fused,
    read_origins,
    record_hash,
    unwrap_diameter,
    validate_fragment,
    validate_record,
    wrap_diameter,
    write_fused,
    write_origins,
)


def test_parse_ss7_sample(ss7_sample):
    frag = parse_fragment(json.dumps(ss7_sample), "ss7")
    assert frag.data["cggt"] == "001234567890"
    assert frag.data["operations"][0]["opc"] == 1200
    assert frag.imsi == "001010123456789"


def test_parse_keeps_unknown_fields(gtp_sample):
    gtp_sample["vendor_extension"] = {"x": 1}
    frag = parse_fragment(json.dumps(gtp_sample), "gtp")
    assert frag.data["vendor_extension"] == {"x": 1}


def test_empty_object_is_schema_error():
    with pytest.raises(SchemaError) as err:
        parse_fragment("{}", "ss7")
    assert err.value.path == "imsi"
    assert "imsi missing" in str(err.value)


def test_bad_ipv4_is_validation_error(gtp_sample):
    gtp_sample["operations"][0]["end_user_addr"]["ipv4"] = "999.1.1.1"
    with pytest.raises(ValidationError) as err:
        validate_fragment(gtp_sample, "gtp")
    assert err.value.path.endswith("end_user_addr.ipv4")


def test_mccmnc_must_concatenate(diameter_sample):
    diameter_sample["avps"]["Visited-PLMN-Id"]["mccmnc"] = "00102"
    with pytest.raises(ValidationError):
        validate_fragment(diameter_sample, "diameter")


def test_operation_gt_mismatch_rejected_at_ingest_only(ss7_sample):
    ss7_sample["operations"][0]["cggt"] = "009999999999"
    with pytest.raises(ValidationError):
        validate_fragment(ss7_sample, "ss7")
    validate_fragment(ss7_sample, "ss7", ingest=False)


def test_malformed_json_reports_byte_offset():
    line = '{"imsi": "0010", "timestamp": ]'
    with pytest.raises(ParseError) as err:
        parse_fragment(line, "gtp")
    assert err.value.offset == line.index("]")


def test_offset_counts_utf8_bytes():
    line = '{"k": "éé", ]'
    with pytest.raises(ParseError) as err:
        parse_fragment(line, "gtp")
    assert err.value.offset == len(line[: line.index("]")].encode("utf-8"))


def test_parse_instant_normalises_to_utc():
    assert parse_instant("2025-10-28T09:40:37+02:00") == parse_instant("2025-10-28T07:40:37Z")
    assert parse_instant("2025-10-28T07:40:37").tzinfo is not None


def test_diameter_wrap_roundtrip(diameter_sample):
    entry = wrap_diameter(diameter_sample)
    assert entry["req"]["avps"]["User-Name"] == "001010123456789"
    assert unwrap_diameter(entry) == diameter_sample


def test_canonical_text_is_key_order_independent(sample_record):
    shuffled = FusedRecord(
        sample_record.minute_ts,
        sample_record.imsi,
        [dict(reversed(list(sample_record.ss7[0].items())))],
        sample_record.diameter,
        sample_record.gtp,
    )
    assert canonical_text(shuffled) == canonical_text(sample_record)
    assert canonical_text(sample_record).startswith('{"minute_ts":"2025-10-28T07:40:00Z","imsi":')


def test_empty_protocol_list_is_kept(sample_record):
    sample_record.diameter = []
    assert '"diameter":[]' in canonical_text(sample_record)


def test_record_hash_matches_sha256_of_canonical_text(sample_record):
    h = record_hash(sample_record)
    assert len(h) == 64 and int(h, 16) >= 0
    assert h == hashlib.sha256(canonical_text(sample_record).encode("utf-8")).hexdigest()


def test_single_value_change_changes_hash_and_one_span(sample_record):
    other = sample_record.copy()
    other.gtp[0]["operations"][0]["user_location_information"]["ci"] = 2003
    a, b = canonical_text(sample_record), canonical_text(other)
    assert record_hash(sample_record) != record_hash(other)
    start = next(i for i, (x, y) in enumerate(zip(a, b)) if x != y)
    end = next(i for i, (x, y) in enumerate(zip(reversed(a), reversed(b))) if x != y)
    assert a[start : len(a) - end] == "2"
    assert b[start : len(b) - end] == "3"


def test_origin_does_not_affect_hash(sample_record):
    tagged = sample_record.copy()
    tagged.origin = RecordOrigin("synthetic", MutationMetadata("GTP_APN", "a" * 64, "b" * 64, "x"))
    assert record_hash(tagged) == record_hash(sample_record)


def test_validate_record(sample_record):
    validate_record(sample_record)
    only_ss7 = FusedRecord(sample_record.minute_ts, sample_record.imsi, sample_record.ss7)
    with pytest.raises(ValidationError):
        validate_record(only_ss7)
    validate_record(only_ss7, admitted=False)


def test_validate_record_anchors(sample_record):
    sample_record.gtp[0]["timestamp"] = "2025-10-28T07:41:05Z"
    with pytest.raises(ValidationError):
        validate_record(sample_record)
    validate_record(sample_record, anchors=False)


def test_fused_file_roundtrip(tmp_path, sample_record):
    path = tmp_path / "fused.jsonl"
    hashes = write_fused(path, [sample_record])
    assert hashes == [record_hash(sample_record)]
    back = read_fused(path)
    assert canonical_text(back[0]) == canonical_text(sample_record)
    assert back[0].origin == BACKGROUND


def test_origins_roundtrip(tmp_path, sample_record):
    sample_record.origin = RecordOrigin("synthetic", MutationMetadata("GTP_APN", "a" * 64, "b" * 64, "x"), "heldout")
    path = tmp_path / "origins.jsonl"
    write_origins(path, [sample_record])
    origins = read_origins(path)
    assert origins[record_hash(sample_record)] == sample_record.origin
    fused = tmp_path / "f.jsonl"
    write_fused(fused, [sample_record])
    assert read_fused(fused, origins)[0].origin.split == "heldout"


def test_origin_kind_consistency():
    with pytest.raises(ValueError):
        RecordOrigin("synthetic")
    with pytest.raises(ValueError):
        RecordOrigin("background", MutationMetadata("GTP_APN", "a", "b", "c"))


json_leaf = st.one_of(st.integers(-10**6, 10**6), st.text(max_size=8), st.booleans(), st.none())
json_tree = st.recursive(
    json_leaf,
    lambda children: st.lists(children, max_size=3) | st.dictionaries(st.text(max_size=5), children, max_size=3),
    max_leaves=12,
)


@given(st.dictionaries(st.text(min_size=1, max_size=6), json_tree, max_size=4))
def test_canonical_text_roundtrips_through_json(extra):
    rec = FusedRecord("2025-10-28T07:40:00Z", "001010123456789", [extra], [], [dict(extra)])
    text = canonical_text(rec)
    again = FusedRecord.from_json(json.loads(text))
    assert canonical_text(again) == text
    assert record_hash(again) == record_hash(rec)

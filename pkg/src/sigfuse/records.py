"""Signalling fragment and fused-record data model.

Fragments are kept as the decoded JSON objects they arrive as, so fields the
validators do not know about survive every stage untouched.  Validation only
checks the fields the pipeline reads or swaps.
"""

from __future__ import annotations

import copy
import hashlib
import ipaddress
import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Iterator

PROTOCOLS = ("ss7", "diameter", "gtp")
TOP_LEVEL_ORDER = ("minute_ts", "imsi", "ss7", "diameter", "gtp")

_DIGITS = re.compile(r"^[0-9]+$")
_OID = re.compile(r"^[0-9]+(\.[0-9]+)+$")
_COUNTRY = re.compile(r"^[a-z]{2,3}$")


class RecordError(ValueError):
    """Base class for ingestion and validation failures."""


class ParseError(RecordError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SchemaError(RecordError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


class ValidationError(RecordError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


# --------------------------------------------------------------------------
# timestamps


def parse_instant(value: Any) -> datetime:
    """Parse an ISO-8601 instant and normalise it to UTC.

    Naive timestamps are taken to be UTC already.
    """
    if not isinstance(value, str):
        raise ValueError(f"unparseable timestamp {value!r}")
    text = value.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        parsed = datetime.fromisoformat(text)
    except ValueError:
        raise ValueError(f"unparseable timestamp {value!r}") from None
    if parsed.tzinfo is None:
        return parsed.replace(tzinfo=timezone.utc)
    return parsed.astimezone(timezone.utc)


def format_instant(instant: datetime) -> str:
    return instant.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


# --------------------------------------------------------------------------
# field validators


def _require(obj: dict, key: str, path: str) -> Any:
    if key not in obj:
        raise SchemaError(f"{path}{key}", f"{key} missing")
    return obj[key]


def _check_imsi(value: Any, path: str) -> None:
    if not isinstance(value, str):
        raise SchemaError(path, "imsi must be a string")
    if not _DIGITS.match(value) or len(value) > 15:
        raise ValidationError(path, f"imsi must be 1-15 decimal digits, got {value!r}")


def _check_digits(value: Any, path: str, lengths: tuple[int, ...] | None = None) -> None:
    if not isinstance(value, str):
        raise SchemaError(path, "expected a digit string")
    if not _DIGITS.match(value):
        raise ValidationError(path, f"expected decimal digits, got {value!r}")
    if lengths is not None and len(value) not in lengths:
        raise ValidationError(path, f"expected {lengths} digits, got {value!r}")


def _check_uint(value: Any, path: str) -> None:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(path, "expected an integer")
    if value < 0:
        raise ValidationError(path, f"expected a non-negative integer, got {value}")


def _check_str(value: Any, path: str) -> None:
    if not isinstance(value, str) or not value:
        raise SchemaError(path, "expected a non-empty string")


def _check_list(value: Any, path: str) -> list:
    if not isinstance(value, list):
        raise SchemaError(path, "expected a list")
    return value


def _check_dict(value: Any, path: str) -> dict:
    if not isinstance(value, dict):
        raise SchemaError(path, "expected an object")
    return value


def _check_plmn(obj: dict, path: str) -> None:
    mcc = _require(obj, "mcc", path)
    mnc = _require(obj, "mnc", path)
    mccmnc = _require(obj, "mccmnc", path)
    _check_digits(mcc, path + "mcc", (3,))
    _check_digits(mnc, path + "mnc", (2, 3))
    _check_digits(mccmnc, path + "mccmnc", (5, 6))
    if mccmnc != mcc + mnc:
        raise ValidationError(path + "mccmnc", f"{mccmnc!r} != mcc ++ mnc ({mcc + mnc!r})")


def is_dotted_quad(value: Any) -> bool:
    if not isinstance(value, str):
        return False
    try:
        ipaddress.IPv4Address(value)
    except ValueError:
        return False
    return True


def _validate_ss7(data: dict, ingest: bool) -> None:
    _check_str(_require(data, "application_context", ""), "application_context")
    if not _OID.match(data["application_context"]):
        raise ValidationError("application_context", "expected a dotted OID")
    for side in ("cggt", "cdgt"):
        _check_digits(_require(data, side, ""), side)
        if f"{side}_country" in data and not _COUNTRY.match(str(data[f"{side}_country"])):
            raise ValidationError(f"{side}_country", "expected a lowercase country tag")
        if f"{side}_mccmnc" in data:
            _check_digits(data[f"{side}_mccmnc"], f"{side}_mccmnc", (5, 6))
        if f"{side}_tadig" in data:
            _check_str(data[f"{side}_tadig"], f"{side}_tadig")
    ops = _check_list(_require(data, "operations", ""), "operations")
    for i, op in enumerate(ops):
        path = f"operations[{i}]."
        _check_dict(op, path[:-1])
        _check_uint(_require(op, "opc", path), path + "opc")
        _check_uint(_require(op, "dpc", path), path + "dpc")
        if "application_context" in op and not _OID.match(str(op["application_context"])):
            raise ValidationError(path + "application_context", "expected a dotted OID")
        for side in ("cggt", "cdgt"):
            if side in op:
                _check_digits(op[side], path + side)
                if ingest and op[side] != data[side]:
                    raise ValidationError(path + side, f"differs from top-level {side}")


def _validate_diameter(data: dict, ingest: bool) -> None:
    avps = _check_dict(_require(data, "avps", ""), "avps")
    if "User-Name" in avps:
        _check_digits(avps["User-Name"], "avps.User-Name")
    for key in ("Session-Id", "Origin-Host"):
        if key in avps:
            _check_str(avps[key], f"avps.{key}")
    if "Visited-PLMN-Id" in avps:
        _check_plmn(_check_dict(avps["Visited-PLMN-Id"], "avps.Visited-PLMN-Id"), "avps.Visited-PLMN-Id.")
    if "Subscription-Data" in avps:
        sub = _check_dict(avps["Subscription-Data"], "avps.Subscription-Data")
        apns = _check_list(
            _require(sub, "APN-Configuration", "avps.Subscription-Data."),
            "avps.Subscription-Data.APN-Configuration",
        )
        if not apns:
            raise ValidationError("avps.Subscription-Data.APN-Configuration", "must be non-empty")
        for i, entry in enumerate(apns):
            path = f"avps.Subscription-Data.APN-Configuration[{i}]"
            _check_dict(entry, path)
            _check_str(_require(entry, "Service-Selection", path + "."), path + ".Service-Selection")


def _validate_gtp(data: dict, ingest: bool) -> None:
    ops = _check_list(_require(data, "operations", ""), "operations")
    for i, op in enumerate(ops):
        path = f"operations[{i}]."
        _check_dict(op, path[:-1])
        for key in ("teid", "teid_cp"):
            if key in op:
                _check_uint(op[key], path + key)
        if "apn" in op:
            _check_str(op["apn"], path + "apn")
        if "user_location_information" in op:
            uli_path = path + "user_location_information."
            uli = _check_dict(op["user_location_information"], uli_path[:-1])
            _check_plmn(uli, uli_path)
            for key in ("lac", "ci", "tac", "rac"):
                if key in uli:
                    _check_uint(uli[key], uli_path + key)
        if "end_user_addr" in op:
            addr = _check_dict(op["end_user_addr"], path + "end_user_addr")
            if "ipv4" in addr and not is_dotted_quad(addr["ipv4"]):
                raise ValidationError(
                    path + "end_user_addr.ipv4", f"invalid dotted-quad {addr['ipv4']!r}"
                )


_VALIDATORS = {"ss7": _validate_ss7, "diameter": _validate_diameter, "gtp": _validate_gtp}


def validate_fragment(data: Any, protocol: str, ingest: bool = True) -> None:
    """Raise SchemaError/ValidationError if ``data`` is not a valid fragment.

    ``ingest=False`` relaxes the rules that only hold for captured traffic
    (SS7 operation GTs mirroring the top-level GTs), since swaps may break them.
    """
    if protocol not in _VALIDATORS:
        raise ValueError(f"unknown protocol {protocol!r}")
    if not isinstance(data, dict):
        raise SchemaError("$", "fragment must be a JSON object")
    _check_imsi(_require(data, "imsi", ""), "imsi")
    try:
        parse_instant(_require(data, "timestamp", ""))
    except ValueError as exc:
        raise ValidationError("timestamp", str(exc)) from None
    _VALIDATORS[protocol](data, ingest)


# --------------------------------------------------------------------------
# fragments


@dataclass(frozen=True)
class Fragment:
    """One decoded signalling message; ``data`` is the raw JSON object."""

    protocol: str
    data: dict

    @property
    def imsi(self) -> str:
        return self.data["imsi"]

    @property
    def timestamp(self) -> str:
        return self.data["timestamp"]

    @property
    def event_time(self) -> datetime:
        return parse_instant(self.data["timestamp"])


def parse_fragment(line: str | bytes, protocol: str) -> Fragment:
    if isinstance(line, bytes):
        line = line.decode("utf-8")
    try:
        data = json.loads(line)
    except json.JSONDecodeError as exc:
        offset = len(line[: exc.pos].encode("utf-8"))
        raise ParseError(f"malformed JSON: {exc.msg}", offset) from None
    validate_fragment(data, protocol)
    return Fragment(protocol, data)


def serialize_fragment(fragment: Fragment) -> str:
    return json.dumps(fragment.data, ensure_ascii=False, separators=(",", ":"))


def read_fragments(path: str | Path, protocol: str) -> list[Fragment]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(parse_fragment(line, protocol))
            except ParseError as exc:
                raise ParseError(f"{path}:{lineno}: malformed JSON", exc.offset) from None
            except (SchemaError, ValidationError) as exc:
                raise type(exc)(f"{path}:{lineno}:{exc.path}", exc.message) from None
    return out


def read_fragment_dir(directory: str | Path) -> dict[str, list[Fragment]]:
    directory = Path(directory)
    streams = {}
    for protocol in PROTOCOLS:
        path = directory / f"{protocol}.jsonl"
        streams[protocol] = read_fragments(path, protocol) if path.exists() else []
    return streams


def write_fragment_dir(directory: str | Path, streams: dict[str, list[Fragment]]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for protocol in PROTOCOLS:
        with open(directory / f"{protocol}.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for fragment in streams.get(protocol, []):
                fh.write(serialize_fragment(fragment) + "\n")


# --------------------------------------------------------------------------
# diameter wrapping


def wrap_diameter(fragment_data: dict) -> dict:
    """Re-shape a Diameter fragment as the ``{req: {avps: ...}}`` fused entry."""
    entry = {k: v for k, v in fragment_data.items() if k != "avps"}
    entry["req"] = {"avps": fragment_data.get("avps", {})}
    return entry


def unwrap_diameter(entry: dict) -> dict:
    data = {k: v for k, v in entry.items() if k != "req"}
    data["avps"] = entry.get("req", {}).get("avps", {})
    return data


# --------------------------------------------------------------------------
# fused records


@dataclass(frozen=True)
class MutationMetadata:
    family_id: str
    partner_hash: str
    seed_hash: str
    swap_batch_id: str

    def to_json(self) -> dict:
        return {
            "family_id": self.family_id,
            "partner_hash": self.partner_hash,
            "seed_hash": self.seed_hash,
            "swap_batch_id": self.swap_batch_id,
        }


@dataclass(frozen=True)
class RecordOrigin:
    kind: str = "background"
    mutation: MutationMetadata | None = None
    # "pool_candidate" or "heldout" once the synthetic corpus has been split
    split: str | None = None

    def __post_init__(self):
        if self.kind not in ("background", "synthetic"):
            raise ValueError(f"unknown origin kind {self.kind!r}")
        if (self.kind == "synthetic") != (self.mutation is not None):
            raise ValueError("mutation metadata is present iff kind is synthetic")

    def to_json(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind}
        if self.mutation is not None:
            out["mutation"] = self.mutation.to_json()
        if self.split is not None:
            out["split"] = self.split
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "RecordOrigin":
        mutation = obj.get("mutation")
        return cls(
            kind=obj.get("kind", "background"),
            mutation=MutationMetadata(**mutation) if mutation else None,
            split=obj.get("split"),
        )


BACKGROUND = RecordOrigin()


@dataclass
class FusedRecord:
    minute_ts: str
    imsi: str
    ss7: list[dict] = field(default_factory=list)
    diameter: list[dict] = field(default_factory=list)
    gtp: list[dict] = field(default_factory=list)
    origin: RecordOrigin = BACKGROUND

    def lists(self) -> dict[str, list[dict]]:
        return {"ss7": self.ss7, "diameter": self.diameter, "gtp": self.gtp}

    @property
    def protocol_count(self) -> int:
        return sum(1 for entries in self.lists().values() if entries)

    def fragments(self, protocol: str) -> Iterator[Fragment]:
        for entry in self.lists()[protocol]:
            data = unwrap_diameter(entry) if protocol == "diameter" else entry
            yield Fragment(protocol, data)

    def to_json(self) -> dict:
        return {
            "minute_ts": self.minute_ts,
            "imsi": self.imsi,
            "ss7": self.ss7,
            "diameter": self.diameter,
            "gtp": self.gtp,
        }

    @classmethod
    def from_json(cls, obj: dict, origin: RecordOrigin | None = None) -> "FusedRecord":
        for key in TOP_LEVEL_ORDER:
            if key not in obj:
                raise SchemaError(key, f"{key} missing")
        return cls(
            minute_ts=obj["minute_ts"],
            imsi=obj["imsi"],
            ss7=list(obj["ss7"]),
            diameter=list(obj["diameter"]),
            gtp=list(obj["gtp"]),
            origin=origin or BACKGROUND,
        )

    def copy(self) -> "FusedRecord":
        return FusedRecord(
            self.minute_ts,
            self.imsi,
            copy.deepcopy(self.ss7),
            copy.deepcopy(self.diameter),
            copy.deepcopy(self.gtp),
            self.origin,
        )


def validate_record(record: FusedRecord, admitted: bool = True, anchors: bool = True) -> None:
    """Check fragment validity, ordering, anchors and (optionally) the 2-protocol rule."""
    _check_imsi(record.imsi, "imsi")
    minute = parse_instant(record.minute_ts)
    if minute.second or minute.microsecond:
        raise ValidationError("minute_ts", "must be truncated to the minute")
    for protocol in PROTOCOLS:
        previous = None
        for i, fragment in enumerate(record.fragments(protocol)):
            try:
                validate_fragment(fragment.data, protocol, ingest=False)
            except (SchemaError, ValidationError) as exc:
                raise type(exc)(f"{protocol}[{i}].{exc.path}", exc.message) from None
            when = fragment.event_time
            if previous is not None and when < previous:
                raise ValidationError(f"{protocol}[{i}].timestamp", "fragments out of time order")
            previous = when
            if anchors:
                if when.replace(second=0, microsecond=0) != minute:
                    raise ValidationError(f"{protocol}[{i}].timestamp", "outside the record minute")
                if fragment.imsi != record.imsi:
                    raise ValidationError(f"{protocol}[{i}].imsi", "differs from record imsi")
    if admitted and record.protocol_count < 2:
        raise ValidationError("$", "fewer than two protocol families present")


# --------------------------------------------------------------------------
# canonical serialisation


def _sorted_tree(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _sorted_tree(value[k]) for k in sorted(value)}
    if isinstance(value, list):
        return [_sorted_tree(v) for v in value]
    return value


def canonical_json(record: FusedRecord) -> dict:
    """Record as a plain dict in canonical key order (schema order, then lexicographic)."""
    return {key: _sorted_tree(value) for key, value in record.to_json().items()}


def canonical_text(record: FusedRecord) -> str:
    return json.dumps(canonical_json(record), ensure_ascii=False, separators=(",", ":"))


def record_hash(record: FusedRecord) -> str:
    return hashlib.sha256(canonical_text(record).encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# fused corpus files


def write_fused(path: str | Path, records: Iterable[FusedRecord]) -> list[str]:
    hashes = []
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            text = canonical_text(record)
            fh.write(text + "\n")
            hashes.append(hashlib.sha256(text.encode("utf-8")).hexdigest())
    return hashes


def read_fused(path: str | Path, origins: dict[str, RecordOrigin] | None = None) -> list[FusedRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed JSON", exc.pos) from None
            record = FusedRecord.from_json(obj)
            if origins is not None:
                record.origin = origins.get(record_hash(record), BACKGROUND)
            out.append(record)
    return out


def write_origins(path: str | Path, records: Iterable[FusedRecord], mode: str = "w") -> None:
    with open(path, mode, encoding="utf-8", newline="\n") as fh:
        for record in records:
            line = {"hash": record_hash(record), "origin": record.origin.to_json()}
            fh.write(json.dumps(line, separators=(",", ":")) + "\n")


def read_origins(path: str | Path) -> dict[str, RecordOrigin]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out[obj["hash"]] = RecordOrigin.from_json(obj["origin"])
    return out

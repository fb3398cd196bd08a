"""Per-subscriber, per-minute fusion of the three signalling streams."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime
from typing import Iterable

from .records import (
    PROTOCOLS,
    Fragment,
    FusedRecord,
    format_instant,
    parse_instant,
    wrap_diameter,
)


@dataclass(frozen=True, order=True)
class MinuteKey:
    minute_ts: str
    imsi: str


def minute_bucket(timestamp: str | datetime) -> str:
    """Truncate an instant to its UTC minute, e.g. ``07:40:37Z -> 07:40:00Z``."""
    instant = timestamp if isinstance(timestamp, datetime) else parse_instant(timestamp)
    if instant.tzinfo is None:
        raise ValueError(f"naive datetime {timestamp!r}; expected an aware instant")
    return format_instant(instant.replace(second=0, microsecond=0))


def fuse(streams: dict[str, Iterable[Fragment]]) -> list[FusedRecord]:
    """Group fragments by (IMSI, minute) into fused records.

    Each protocol list is ordered by event time with ties kept in input
    order.  Fragment contents are not modified; Diameter fragments are only
    re-wrapped as ``{req: {avps: ...}}``.  Output is ordered by
    (minute_ts, imsi).
    """
    buckets: dict[MinuteKey, dict[str, list[tuple[datetime, int, dict]]]] = {}
    for protocol in PROTOCOLS:
        for position, fragment in enumerate(streams.get(protocol, ())):
            when = fragment.event_time
            key = MinuteKey(minute_bucket(when), fragment.imsi)
            bucket = buckets.setdefault(key, {p: [] for p in PROTOCOLS})
            entry = wrap_diameter(fragment.data) if protocol == "diameter" else fragment.data
            bucket[protocol].append((when, position, entry))

    records = []
    for key in sorted(buckets):
        lists = {
            protocol: [entry for _, _, entry in sorted(items, key=lambda t: (t[0], t[1]))]
            for protocol, items in buckets[key].items()
        }
        records.append(FusedRecord(key.minute_ts, key.imsi, **lists))
    return records


@dataclass
class FusionStats:
    ss7_fragments: int = 0
    diameter_fragments: int = 0
    gtp_fragments: int = 0
    candidates: int = 0
    kept: int = 0
    kept_two_protocols: int = 0
    kept_three_protocols: int = 0

    def to_json(self) -> dict:
        return {
            "total_ss7_fragments": self.ss7_fragments,
            "total_diameter_fragments": self.diameter_fragments,
            "total_gtp_fragments": self.gtp_fragments,
            "fused_candidates": self.candidates,
            "fused_records_considered": self.kept,
            "exactly_two_protocols": self.kept_two_protocols,
            "all_three_protocols": self.kept_three_protocols,
        }


def filter_multiprotocol(records: Iterable[FusedRecord]) -> tuple[list[FusedRecord], FusionStats]:
    stats = FusionStats()
    kept = []
    for record in records:
        stats.candidates += 1
        count = record.protocol_count
        if count < 2:
            continue
        kept.append(record)
        stats.kept += 1
        if count == 2:
            stats.kept_two_protocols += 1
        else:
            stats.kept_three_protocols += 1
    return kept, stats


def fuse_streams(streams: dict[str, list[Fragment]]) -> tuple[list[FusedRecord], FusionStats]:
    """fuse + filter_multiprotocol, with fragment totals filled into the stats."""
    kept, stats = filter_multiprotocol(fuse(streams))
    stats.ss7_fragments = len(streams.get("ss7", ()))
    stats.diameter_fragments = len(streams.get("diameter", ()))
    stats.gtp_fragments = len(streams.get("gtp", ()))
    return kept, stats

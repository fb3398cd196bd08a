"""Synthetic anomalies from single field-group swaps between fused records.

A field group is a set of path patterns (``*`` matches any list index).  A
swap exchanges the values at every matching concrete path between two
records.  Values are aligned per pattern in path order; when the two records
hold different numbers of entries for a pattern, only the common prefix is
exchanged.  Pairing each value with a value of the same pattern keeps e.g.
``opc`` from landing in ``dpc``, and makes keys present on only one side
(optional ULI ``tac``/``rac``) stay put.
"""

from __future__ import annotations

import json
import logging
import math
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .records import FusedRecord, MutationMetadata, RecordOrigin, record_hash

log = logging.getLogger(__name__)

Path = tuple  # concrete path: str keys and int list indices


@dataclass(frozen=True)
class FieldGroup:
    family_id: str
    patterns: tuple[tuple[str, ...], ...]


def _expand(prefix: tuple[str, ...], leaves: Sequence[str]) -> tuple[tuple[str, ...], ...]:
    return tuple(prefix + (leaf,) for leaf in leaves)


_AVPS = ("diameter", "*", "req", "avps")
_GTP_OPS = ("gtp", "*", "operations", "*")

FAMILIES: tuple[FieldGroup, ...] = (
    FieldGroup(
        "SS7_CGGT",
        _expand(("ss7", "*"), ("cggt", "cggt_country", "cggt_mccmnc", "cggt_tadig"))
        + (("ss7", "*", "operations", "*", "cggt"),),
    ),
    FieldGroup(
        "SS7_CDGT",
        _expand(("ss7", "*"), ("cdgt", "cdgt_country", "cdgt_mccmnc", "cdgt_tadig"))
        + (("ss7", "*", "operations", "*", "cdgt"),),
    ),
    FieldGroup("SS7_POINT_CODES", _expand(("ss7", "*", "operations", "*"), ("opc", "dpc"))),
    FieldGroup(
        "SS7_APP_CONTEXT",
        (("ss7", "*", "application_context"), ("ss7", "*", "operations", "*", "application_context")),
    ),
    FieldGroup("DIA_USER_NAME", (_AVPS + ("User-Name",),)),
    FieldGroup("DIA_SESSION_ID", (_AVPS + ("Session-Id",),)),
    FieldGroup("DIA_ORIGIN_HOST", (_AVPS + ("Origin-Host",),)),
    FieldGroup("DIA_VISITED_PLMN", _expand(_AVPS + ("Visited-PLMN-Id",), ("mcc", "mnc", "mccmnc"))),
    FieldGroup(
        "DIA_APN_SERVICE_SELECTION",
        (_AVPS + ("Subscription-Data", "APN-Configuration", "*", "Service-Selection"),),
    ),
    FieldGroup("GTP_TEID", _expand(_GTP_OPS, ("teid", "teid_cp"))),
    FieldGroup("GTP_APN", (_GTP_OPS + ("apn",),)),
    FieldGroup(
        "GTP_ULI",
        _expand(_GTP_OPS + ("user_location_information",), ("mcc", "mnc", "mccmnc", "lac", "tac", "rac", "ci")),
    ),
    FieldGroup("GTP_PDN_IP", (_GTP_OPS + ("end_user_addr", "ipv4"),)),
)

FAMILY_IDS = tuple(g.family_id for g in FAMILIES)
_BY_ID = {g.family_id: g for g in FAMILIES}


class MutationError(ValueError):
    pass


def family(family_id: str | FieldGroup) -> FieldGroup:
    if isinstance(family_id, FieldGroup):
        return family_id
    try:
        return _BY_ID[family_id]
    except KeyError:
        raise MutationError(f"unknown mutation family {family_id!r}") from None


# --------------------------------------------------------------------------
# path matching


def _match(node: Any, pattern: tuple[str, ...], prefix: Path, out: list[tuple[Path, Any]]) -> None:
    if not pattern:
        out.append((prefix, node))
        return
    head, rest = pattern[0], pattern[1:]
    if head == "*":
        if isinstance(node, list):
            for i, child in enumerate(node):
                _match(child, rest, prefix + (i,), out)
    elif isinstance(node, dict) and head in node:
        _match(node[head], rest, prefix + (head,), out)


def _extract_by_pattern(record: FusedRecord, group: FieldGroup) -> list[list[tuple[Path, Any]]]:
    tree = record.to_json()
    per_pattern = []
    for pattern in group.patterns:
        found: list[tuple[Path, Any]] = []
        _match(tree, pattern, (), found)
        found.sort(key=lambda item: item[0])
        per_pattern.append(found)
    return per_pattern


def extract_group(record: FusedRecord, group: str | FieldGroup) -> dict[Path, Any]:
    """All concrete paths of ``group`` present in ``record``, with their values."""
    group = family(group)
    return {path: value for found in _extract_by_pattern(record, group) for path, value in found}


def format_path(path: Path) -> str:
    return ".".join(str(part) for part in path)


def _set(tree: Any, path: Path, value: Any) -> None:
    for part in path[:-1]:
        tree = tree[part]
    tree[path[-1]] = value


def _multiset(values: Iterable[Any]) -> Counter:
    return Counter(json.dumps(v, sort_keys=True) for v in values)


def skip_reason(a: FusedRecord, b: FusedRecord, group: str | FieldGroup) -> str | None:
    """Why swapping ``group`` between ``a`` and ``b`` would be skipped, if it would.

    ``absent``: either record lacks the group.  ``identical``: the value
    multisets are equal, or aligned exchange would leave both records as they
    are.
    """
    group = family(group)
    ea, eb = _extract_by_pattern(a, group), _extract_by_pattern(b, group)
    if not any(ea) or not any(eb):
        return "absent"
    if _multiset(v for found in ea for _, v in found) == _multiset(v for found in eb for _, v in found):
        return "identical"
    for fa, fb in zip(ea, eb):
        for (_, va), (_, vb) in zip(fa, fb):
            if va != vb:
                return None
    return "identical"


def _swapped(a: FusedRecord, b: FusedRecord, group: FieldGroup) -> tuple[FusedRecord, FusedRecord]:
    ea, eb = _extract_by_pattern(a, group), _extract_by_pattern(b, group)
    a2, b2 = a.copy(), b.copy()
    ta, tb = a2.lists(), b2.lists()
    for fa, fb in zip(ea, eb):
        for (pa, va), (pb, vb) in zip(fa, fb):
            _set(ta, pa, vb)
            _set(tb, pb, va)
    return a2, b2


def swap_group(
    a: FusedRecord,
    b: FusedRecord,
    group: str | FieldGroup,
    swap_batch_id: str = "",
) -> tuple[FusedRecord, FusedRecord] | None:
    """Exchange one field group between two records; ``None`` when skipped."""
    group = family(group)
    if a is b:
        raise MutationError("swap partners must be distinct records")
    if skip_reason(a, b, group) is not None:
        return None
    ha, hb = record_hash(a), record_hash(b)
    a2, b2 = _swapped(a, b, group)
    a2.origin = RecordOrigin("synthetic", MutationMetadata(group.family_id, hb, ha, swap_batch_id))
    b2.origin = RecordOrigin("synthetic", MutationMetadata(group.family_id, ha, hb, swap_batch_id))
    return a2, b2


# --------------------------------------------------------------------------
# corpus generation


@dataclass
class FamilyReport:
    pairs_attempted: int = 0
    swaps: int = 0
    skips: Counter = field(default_factory=Counter)
    retries: int = 0
    unmatched: int = 0
    dropped: int = 0
    collisions: int = 0
    repeated_content: int = 0
    records: int = 0

    def to_json(self) -> dict:
        return {
            "pairs_attempted": self.pairs_attempted,
            "swaps": self.swaps,
            "skips": dict(sorted(self.skips.items())),
            "retry_rounds": self.retries,
            "unmatched_seed_slots": self.unmatched,
            "dropped_seed_slots": self.dropped,
            "seed_collisions": self.collisions,
            "repeated_content": self.repeated_content,
            "records": self.records,
        }


@dataclass
class SyntheticCorpus:
    records: list[FusedRecord]
    report: dict[str, FamilyReport]

    def report_json(self, n_seeds: int) -> dict:
        total = sum(r.records for r in self.report.values())
        matched = n_seeds - n_seeds % 2
        return {
            "seeds": n_seeds,
            "families": len(self.report),
            "swaps_per_seed_per_family": MATCHINGS_PER_FAMILY,
            "expected_without_skips": matched * len(self.report) * MATCHINGS_PER_FAMILY,
            "total_synthetic_records": total,
            "per_family": {fid: rep.to_json() for fid, rep in self.report.items()},
        }


# each seed is swapped with two partners per family, so it is the source of
# two synthetic records per family: seeds x families x 2 in total
MATCHINGS_PER_FAMILY = 2


def _pairing(n: int, rng: random.Random, used: set[frozenset], tries: int = 50) -> list[int]:
    """A shuffled order read as consecutive pairs, re-drawn to avoid reusing pairs."""
    best, best_repeats = None, None
    for _ in range(tries):
        order = list(range(n))
        rng.shuffle(order)
        repeats = sum(frozenset(order[p : p + 2]) in used for p in range(0, n - 1, 2))
        if best is None or repeats < best_repeats:
            best, best_repeats = order, repeats
        if repeats == 0:
            break
    return best


def generate_synthetic(
    seeds: Sequence[FusedRecord],
    rng_seed: int,
    families: Sequence[str] = FAMILY_IDS,
    max_retries: int = 3,
) -> SyntheticCorpus:
    """Swap every family across two seeded random perfect matchings of the seeds.

    Each matching pairs every seed once (one is left out when the count is
    odd) and each swap yields both partner outputs, so with no skips a
    family contributes ``2 * len(seeds)`` records.  The second matching
    avoids pairs already used by the first where it can.  Seeds whose pair
    was skipped are re-paired among themselves for up to ``max_retries``
    rounds, then dropped for that matching.

    Outputs whose content equals a seed are discarded.  Outputs repeating
    another output's content are kept (they carry different metadata) and
    counted as ``repeated_content``; see ``unique_records``.
    """
    if len(seeds) < 2:
        raise MutationError("need at least two seed records")
    seed_hashes = [record_hash(r) for r in seeds]
    seed_set = set(seed_hashes)
    out: list[FusedRecord] = []
    reports: dict[str, FamilyReport] = {}
    for fid in families:
        group = family(fid)
        rep = reports[fid] = FamilyReport()
        rng = random.Random(f"{rng_seed}:{fid}")
        has_group = [bool(extract_group(r, group)) for r in seeds]
        used: set[frozenset] = set()
        produced: set[str] = set()
        for matching in range(MATCHINGS_PER_FAMILY):
            order = _pairing(len(seeds), rng, used)
            if len(order) % 2:
                order.pop()
                rep.unmatched += 1
            round_no = 0
            while order:
                failed: list[int] = []
                for p in range(0, len(order) - 1, 2):
                    i, j = order[p], order[p + 1]
                    used.add(frozenset((i, j)))
                    rep.pairs_attempted += 1
                    reason = skip_reason(seeds[i], seeds[j], group)
                    if reason is not None:
                        rep.skips[reason] += 1
                        failed.extend((i, j))
                        continue
                    a2, b2 = _swapped(seeds[i], seeds[j], group)
                    batch = f"{fid}:{matching}.{round_no}:{p // 2}"
                    a2.origin = RecordOrigin("synthetic", MutationMetadata(fid, seed_hashes[j], seed_hashes[i], batch))
                    b2.origin = RecordOrigin("synthetic", MutationMetadata(fid, seed_hashes[i], seed_hashes[j], batch))
                    rep.swaps += 1
                    for rec in (a2, b2):
                        h = record_hash(rec)
                        if h in seed_set:
                            rep.collisions += 1
                            continue
                        if h in produced:
                            rep.repeated_content += 1
                        produced.add(h)
                        out.append(rec)
                        rep.records += 1
                if len(order) % 2:
                    failed.append(order[-1])
                if not failed or round_no >= max_retries or len(failed) < 2:
                    rep.dropped += len(failed)
                    break
                # seeds without this group can never swap; stop re-pairing them
                usable = [i for i in failed if has_group[i]]
                rep.dropped += len(failed) - len(usable)
                if len(usable) < 2:
                    rep.dropped += len(usable)
                    break
                round_no += 1
                rep.retries += 1
                rng.shuffle(usable)
                order = usable
    log.info("generated %d synthetic records from %d seeds", len(out), len(seeds))
    return SyntheticCorpus(out, reports)


def unique_records(records: Iterable[FusedRecord]) -> tuple[list[FusedRecord], int]:
    """First record per content hash, and how many repeats were dropped."""
    records = list(records)
    seen: set[str] = set()
    kept = []
    for rec in records:
        h = record_hash(rec)
        if h not in seen:
            seen.add(h)
            kept.append(rec)
    return kept, len(records) - len(kept)


def split_heldout(
    synthetic: Sequence[FusedRecord],
    n_background: int,
    rng_seed: int,
    pool_fraction: float = 0.05,
    candidate_factor: float = 2.0,
) -> tuple[list[FusedRecord], list[FusedRecord]]:
    """Split synthetic records into detector-pool candidates and a held-out set.

    The candidate side holds about ``candidate_factor`` times the synthetic
    pool quota (``pool_fraction`` of the background), spread evenly over
    families.  Any family with two or more records lands on both sides.
    Returns copies with ``origin.split`` set.
    """
    by_family: dict[str, list[FusedRecord]] = defaultdict(list)
    for rec in synthetic:
        if rec.origin.mutation is None:
            raise MutationError("split_heldout expects synthetic records")
        by_family[rec.origin.mutation.family_id].append(rec)
    families = sorted(by_family)
    quota = round(pool_fraction * n_background)
    per_family = math.ceil(candidate_factor * quota / max(len(families), 1))
    pool: list[FusedRecord] = []
    heldout: list[FusedRecord] = []
    for fid in families:
        members = by_family[fid]
        rng = random.Random(f"{rng_seed}:split:{fid}")
        idx = list(range(len(members)))
        rng.shuffle(idx)
        take = 0 if len(members) < 2 else min(max(per_family, 1), len(members) - 1)
        chosen = set(idx[:take])
        for k, rec in enumerate(members):
            part = "pool_candidate" if k in chosen else "heldout"
            tagged = FusedRecord(rec.minute_ts, rec.imsi, rec.ss7, rec.diameter, rec.gtp,
                                 RecordOrigin(rec.origin.kind, rec.origin.mutation, part))
            (pool if k in chosen else heldout).append(tagged)
    return pool, heldout

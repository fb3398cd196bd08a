"""Seeded generator of internally consistent background signalling.

Subscribers never move: each one is pinned to a visited network, a serving
MSC/VLR + MME node, a cell, an HLR, a PDN address and an APN profile for the
whole run.  That fixed context is what the consistency checker verifies.
"""

from __future__ import annotations

import ipaddress
import logging
import random
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Iterable

from .records import Fragment, FusedRecord, format_instant

log = logging.getLogger(__name__)

# invoked MAP operation -> application context it must run under
MAP_CONTEXTS = {
    "updateLocation": "4.0.0.1.0.1.3",
    "cancelLocation": "4.0.0.1.0.2.3",
    "sendRoutingInfo": "4.0.0.1.0.5.3",
    "sendAuthenticationInfo": "4.0.0.1.0.14.3",
    "insertSubscriberData": "4.0.0.1.0.16.3",
    "anyTimeInterrogation": "4.0.0.1.0.29.3",
}

APN_PROFILES = (
    ("internet",),
    ("internet", "ims"),
    ("internet", "mms"),
    ("iot.m2m",),
    ("corp.vpn", "internet"),
)

# RFC 5737 documentation ranges first, then RFC 6598 shared space
_ADDRESS_BLOCKS = ("192.0.2.0/24", "198.51.100.0/24", "203.0.113.0/24", "100.64.0.0/10")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    n_subscribers: int
    minutes: int
    activity_rate: float = 0.15
    rng_seed: int = 0
    target_mean_tokens: int | None = None
    max_burst: int = 3
    start: str = "2025-10-28T07:00:00Z"
    n_visited_networks: int = 4
    nodes_per_network: int = 3
    # chance that a subscriber-minute reuses one uniform draw for every
    # protocol; keeps each protocol's marginal rate at activity_rate while
    # producing more three-protocol windows
    protocol_coupling: float = 0.3

    def validate(self) -> None:
        if self.n_subscribers < 1:
            raise ConfigError("n_subscribers must be positive")
        if self.minutes < 1:
            raise ConfigError("minutes must be positive")
        if not 0 < self.activity_rate <= 1:
            raise ConfigError("activity_rate must lie in (0, 1]")
        if not 0 <= self.protocol_coupling <= 1:
            raise ConfigError("protocol_coupling must lie in [0, 1]")
        if self.max_burst < 1:
            raise ConfigError("max_burst must be >= 1")
        if self.target_mean_tokens is not None and self.target_mean_tokens < 1:
            raise ConfigError("target_mean_tokens must be positive")


@dataclass(frozen=True)
class ServingNode:
    vlr_gt: str
    vlr_pc: int
    mme_host: str
    lac: int


@dataclass(frozen=True)
class Network:
    mcc: str
    mnc: str
    country: str
    tadig: str
    nodes: tuple[ServingNode, ...]

    @property
    def mccmnc(self) -> str:
        return self.mcc + self.mnc


@dataclass(frozen=True)
class Hlr:
    gt: str
    pc: int
    mccmnc: str
    country: str
    tadig: str


@dataclass
class SubscriberProfile:
    imsi: str
    home_plmn: tuple[str, str]
    visited: Network
    node: ServingNode
    hlr: Hlr
    cell: dict
    serving_origin_host: str
    subscribed_apns: tuple[str, ...]
    active_apn: str
    gt_pool: tuple[str, ...]
    pdn_ipv4: str
    session_seq: int = 0
    teid_seq: int = 0


# approximate token cost of one fragment at 0.25 tokens/char, used only to
# turn target_mean_tokens into a burst size
_TOKENS_PER_FRAGMENT = 95
_MEAN_PROTOCOLS_PER_RECORD = 2.3


def _burst_for_target(target: int) -> int:
    mean_burst = target / (_TOKENS_PER_FRAGMENT * _MEAN_PROTOCOLS_PER_RECORD)
    return max(1, round(2 * mean_burst - 1))


def _networks(rng: random.Random, cfg: GeneratorConfig) -> list[Network]:
    countries = ["zz", "zy", "zx", "zw", "zv", "zu", "zt", "zs"]
    networks = []
    for i in range(cfg.n_visited_networks):
        mcc = f"{1 + i // 4:03d}"
        mnc = f"{1 + i % 4:02d}"
        nodes = []
        for j in range(cfg.nodes_per_network):
            nodes.append(
                ServingNode(
                    vlr_gt=f"{mcc}{mnc}{2000000 + 1000 * j + i:07d}",
                    vlr_pc=1200 + 100 * i + j,
                    mme_host=f"mme{j + 1:02d}.epc.mnc{int(mnc):03d}.mcc{mcc}.3gppnetwork.org",
                    lac=1000 + 100 * i + j,
                )
            )
        country = countries[i % len(countries)]
        networks.append(Network(mcc, mnc, country, f"TST{country.upper()}", tuple(nodes)))
    rng.shuffle(networks)
    return networks


def _address_pool() -> Iterable[str]:
    for block in _ADDRESS_BLOCKS:
        for host in ipaddress.IPv4Network(block).hosts():
            yield str(host)


def _profiles(rng: random.Random, cfg: GeneratorConfig, networks: list[Network]) -> list[SubscriberProfile]:
    homes = [("001", "01"), ("001", "02")]
    hlrs = {
        home: [
            Hlr(
                gt=f"{home[0]}{home[1]}98765{k:04d}",
                pc=2300 + 10 * h + k,
                mccmnc=home[0] + home[1],
                country="zz",
                tadig="TSTZZ",
            )
            for k in range(2)
        ]
        for h, home in enumerate(homes)
    }
    addresses = _address_pool()
    msins = rng.sample(range(10**9, 10**10), cfg.n_subscribers)
    profiles = []
    for msin in msins:
        home = rng.choice(homes)
        visited = rng.choice(networks)
        node = rng.choice(visited.nodes)
        hlr = rng.choice(hlrs[home])
        cell = {
            "mcc": visited.mcc,
            "mnc": visited.mnc,
            "mccmnc": visited.mccmnc,
            "lac": node.lac,
            "ci": rng.randrange(2000, 2999),
        }
        if rng.random() < 0.5:
            cell["tac"] = node.lac + 20000
        if rng.random() < 0.3:
            cell["rac"] = rng.randrange(1, 255)
        apns = rng.choice(APN_PROFILES)
        try:
            ipv4 = next(addresses)
        except StopIteration:
            raise ConfigError("too many subscribers for the PDN address pool") from None
        profiles.append(
            SubscriberProfile(
                imsi=f"{home[0]}{home[1]}{msin:010d}",
                home_plmn=home,
                visited=visited,
                node=node,
                hlr=hlr,
                cell=cell,
                serving_origin_host=node.mme_host,
                subscribed_apns=apns,
                active_apn=apns[0],
                gt_pool=(node.vlr_gt, hlr.gt),
                pdn_ipv4=ipv4,
            )
        )
    return profiles


class _Counters:
    """Corpus-wide unique identifiers."""

    def __init__(self, rng: random.Random):
        self.rng = rng
        self.session = 0
        self.used_teids: set[int] = {0}

    def next_session(self) -> int:
        self.session += 1
        return self.session

    def teid(self) -> int:
        while True:
            value = self.rng.randrange(1, 2**32)
            if value not in self.used_teids:
                self.used_teids.add(value)
                return value


def _ss7_fragment(p: SubscriberProfile, when: datetime, rng: random.Random) -> dict:
    operation = rng.choice(sorted(MAP_CONTEXTS))
    acn = MAP_CONTEXTS[operation]
    v, h = p.visited, p.hlr
    return {
        "imsi": p.imsi,
        "timestamp": format_instant(when),
        "application_context": acn,
        "cggt": p.node.vlr_gt,
        "cggt_country": v.country,
        "cggt_mccmnc": v.mccmnc,
        "cggt_tadig": v.tadig,
        "cdgt": h.gt,
        "cdgt_country": h.country,
        "cdgt_mccmnc": h.mccmnc,
        "cdgt_tadig": h.tadig,
        "operations": [
            {
                "application_context": acn,
                "opc": p.node.vlr_pc,
                "dpc": h.pc,
                "cggt": p.node.vlr_gt,
                "cdgt": h.gt,
                "operation": operation,
            }
        ],
    }


def _diameter_fragment(p: SubscriberProfile, when: datetime, counters: _Counters) -> dict:
    p.session_seq += 1
    session = counters.next_session()
    v = p.visited
    return {
        "imsi": p.imsi,
        "timestamp": format_instant(when),
        "avps": {
            "User-Name": p.imsi,
            "Session-Id": f"{p.serving_origin_host};{session};{p.session_seq}",
            "Origin-Host": p.serving_origin_host,
            "Origin-Realm": p.serving_origin_host.split(".", 1)[1],
            "Visited-PLMN-Id": {"mcc": v.mcc, "mnc": v.mnc, "mccmnc": v.mccmnc},
            "Subscription-Data": {
                "APN-Configuration": [{"Service-Selection": apn} for apn in p.subscribed_apns]
            },
        },
    }


def _gtp_fragment(p: SubscriberProfile, when: datetime, rng: random.Random, counters: _Counters) -> dict:
    operations = []
    for _ in range(rng.choice((1, 1, 2))):
        p.teid_seq += 1
        operations.append(
            {
                "teid": counters.teid() if rng.random() < 0.5 else 0,
                "teid_cp": counters.teid(),
                "apn": p.active_apn,
                "user_location_information": dict(p.cell),
                "end_user_addr": {"ipv4": p.pdn_ipv4},
            }
        )
    return {"imsi": p.imsi, "timestamp": format_instant(when), "operations": operations}


def generate(config: GeneratorConfig) -> dict[str, list[Fragment]]:
    """Generate the three fragment streams for ``config``.

    Output is a pure function of the config (including ``rng_seed``).
    """
    config.validate()
    rng = random.Random(config.rng_seed)
    max_burst = config.max_burst
    if config.target_mean_tokens is not None:
        max_burst = _burst_for_target(config.target_mean_tokens)
    networks = _networks(rng, config)
    profiles = _profiles(rng, config, networks)
    counters = _Counters(rng)
    start = datetime.fromisoformat(config.start.replace("Z", "+00:00")).astimezone(timezone.utc)
    start = start.replace(second=0, microsecond=0)

    streams: dict[str, list[Fragment]] = {"ss7": [], "diameter": [], "gtp": []}
    for minute in range(config.minutes):
        base = start + timedelta(minutes=minute)
        for p in profiles:
            coupled = rng.random() < config.protocol_coupling
            shared = rng.random()
            for protocol in ("ss7", "diameter", "gtp"):
                draw = shared if coupled else rng.random()
                if draw >= config.activity_rate:
                    continue
                for _ in range(rng.randint(1, max_burst)):
                    when = base + timedelta(seconds=rng.randrange(60))
                    if protocol == "ss7":
                        data = _ss7_fragment(p, when, rng)
                    elif protocol == "diameter":
                        data = _diameter_fragment(p, when, counters)
                    else:
                        data = _gtp_fragment(p, when, rng, counters)
                    streams[protocol].append(Fragment(protocol, data))
    log.info(
        "generated %d ss7 / %d diameter / %d gtp fragments",
        *(len(streams[k]) for k in ("ss7", "diameter", "gtp")),
    )
    return streams


# --------------------------------------------------------------------------
# consistency checker

EXPECTATIONS = (
    "identity_coherence",
    "location_compatibility",
    "unique_references",
    "address_allocation",
    "routing_plausibility",
    "protocol_semantics",
    "access_profile",
)


@dataclass(frozen=True)
class Violation:
    expectation: str
    check: str
    imsi: str
    detail: str
    minute_ts: str | None = None


@dataclass
class _Bindings:
    """Values that must stay fixed per subscriber, or per identifier."""

    per_imsi: dict = field(default_factory=lambda: defaultdict(lambda: defaultdict(set)))
    owners: dict = field(default_factory=lambda: defaultdict(lambda: defaultdict(set)))


# binding name -> expectation it enforces
_PER_IMSI = {
    "calling_gt": "routing_plausibility",
    "called_gt": "routing_plausibility",
    "point_codes": "routing_plausibility",
    "origin_host": "routing_plausibility",
    "visited_plmn": "location_compatibility",
    "user_location": "location_compatibility",
    "subscribed_apns": "access_profile",
    "active_apn": "access_profile",
    "pdn_address": "address_allocation",
}
_OWNED = {
    "session_id": "unique_references",
    "teid": "unique_references",
    "teid_cp": "unique_references",
    "pdn_address": "address_allocation",
}
_FUNCTIONAL = {
    "calling_gt_pc": "routing_plausibility",
    "called_gt_pc": "routing_plausibility",
}


def _record_checks(record: FusedRecord, b: _Bindings, emit) -> None:
    imsi, minute = record.imsi, record.minute_ts
    per = b.per_imsi[imsi]
    plmns = set()
    subscribed: set[str] | None = None

    for protocol in ("ss7", "diameter", "gtp"):
        for frag in record.fragments(protocol):
            if frag.data.get("imsi") != imsi:
                emit("identity_coherence", "fragment_imsi", imsi, f"{protocol} imsi {frag.data.get('imsi')}", minute)

    for frag in record.fragments("ss7"):
        d = frag.data
        per["calling_gt"].add((d.get("cggt"), d.get("cggt_country"), d.get("cggt_mccmnc"), d.get("cggt_tadig")))
        per["called_gt"].add((d.get("cdgt"), d.get("cdgt_country"), d.get("cdgt_mccmnc"), d.get("cdgt_tadig")))
        if d.get("cggt_mccmnc"):
            plmns.add(("ss7 calling GT", d["cggt_mccmnc"]))
        for op in d.get("operations", []):
            per["point_codes"].add((op.get("opc"), op.get("dpc")))
            b.owners["calling_gt_pc"][d.get("cggt")].add(op.get("opc"))
            b.owners["called_gt_pc"][d.get("cdgt")].add(op.get("dpc"))
            for side in ("cggt", "cdgt"):
                if side in op and op[side] != d.get(side):
                    emit("routing_plausibility", "operation_gt", imsi, f"operation {side} {op[side]} vs {d.get(side)}", minute)
            acn = op.get("application_context", d.get("application_context"))
            if acn != d.get("application_context"):
                emit("protocol_semantics", "dialogue_context", imsi, f"operation context {acn} vs dialogue {d.get('application_context')}", minute)
            expected = MAP_CONTEXTS.get(op.get("operation"))
            if expected is not None and acn != expected:
                emit("protocol_semantics", "operation_context", imsi, f"{op['operation']} under {acn}", minute)

    for frag in record.fragments("diameter"):
        avps = frag.data.get("avps", {})
        if "User-Name" in avps and avps["User-Name"] != imsi:
            emit("identity_coherence", "user_name", imsi, f"User-Name {avps['User-Name']}", minute)
        host = avps.get("Origin-Host")
        if host is not None:
            per["origin_host"].add(host)
        session = avps.get("Session-Id")
        if session is not None:
            b.owners["session_id"][session].add(imsi)
            if host is not None and session.split(";", 1)[0] != host:
                emit("routing_plausibility", "session_origin", imsi, f"Session-Id {session} not issued by {host}", minute)
        vplmn = avps.get("Visited-PLMN-Id")
        if vplmn:
            per["visited_plmn"].add(vplmn.get("mccmnc"))
            plmns.add(("diameter Visited-PLMN-Id", vplmn.get("mccmnc")))
        sub = avps.get("Subscription-Data")
        if sub:
            apns = tuple(e.get("Service-Selection") for e in sub.get("APN-Configuration", []))
            per["subscribed_apns"].add(apns)
            subscribed = (subscribed or set()) | set(apns)

    for frag in record.fragments("gtp"):
        for op in frag.data.get("operations", []):
            if "apn" in op:
                per["active_apn"].add(op["apn"])
                if subscribed is not None and op["apn"] not in subscribed:
                    emit("access_profile", "apn_subscribed", imsi, f"apn {op['apn']} not in {sorted(subscribed)}", minute)
            uli = op.get("user_location_information")
            if uli:
                per["user_location"].add(tuple(sorted(uli.items())))
                plmns.add(("gtp ULI", uli.get("mccmnc")))
            for key in ("teid", "teid_cp"):
                value = op.get(key)
                if value:
                    b.owners[key][value].add(imsi)
            ipv4 = op.get("end_user_addr", {}).get("ipv4")
            if ipv4 is not None:
                per["pdn_address"].add(ipv4)
                b.owners["pdn_address"][ipv4].add(imsi)

    if len({value for _, value in plmns}) > 1:
        emit("location_compatibility", "plmn_agreement", imsi, "; ".join(f"{src}={val}" for src, val in sorted(plmns)), minute)


def check_consistency(records: Iterable[FusedRecord]) -> list[Violation]:
    """Re-verify the cross-protocol consistency expectations over a corpus.

    Within-record checks cover identity, PLMN agreement, operation/context
    pairing and APN subscription.  Corpus-level checks require every
    subscriber to present one fixed serving context and every session,
    tunnel and PDN address to belong to a single subscriber.
    """
    violations: list[Violation] = []

    def emit(expectation, check, imsi, detail, minute_ts=None):
        violations.append(Violation(expectation, check, imsi, detail, minute_ts))

    bindings = _Bindings()
    for record in records:
        _record_checks(record, bindings, emit)

    for imsi in sorted(bindings.per_imsi):
        for name, values in sorted(bindings.per_imsi[imsi].items()):
            if len(values) > 1:
                emit(_PER_IMSI[name], f"stable_{name}", imsi, f"{len(values)} distinct values: {sorted(map(str, values))}")
    for name, expectation in _OWNED.items():
        for value, owners in bindings.owners[name].items():
            if len(owners) > 1:
                emit(expectation, f"shared_{name}", ",".join(sorted(owners)), f"{name} {value} shared by {len(owners)} subscribers")
    for name, expectation in _FUNCTIONAL.items():
        for gt, codes in bindings.owners[name].items():
            if len(codes) > 1:
                emit(expectation, name, "", f"global title {gt} maps to point codes {sorted(map(str, codes))}")
    return violations


def summarize_violations(violations: Iterable[Violation]) -> dict[str, int]:
    counts = {name: 0 for name in EXPECTATIONS}
    for v in violations:
        counts[v.expectation] += 1
    return counts


__all__ = [
    "GeneratorConfig",
    "ConfigError",
    "SubscriberProfile",
    "generate",
    "check_consistency",
    "summarize_violations",
    "Violation",
    "EXPECTATIONS",
    "MAP_CONTEXTS",
]

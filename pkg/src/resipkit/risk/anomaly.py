"""Rule engine surfacing abnormal relayed flows."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from ..appid import DOH, HTTP, HTTPS, QUIC, DestinationRecord, ProtocolTag
from ..capture import Flow
from ..triage import RELAYED, FlowClass
from .threatintel import ThreatVerdict

R1, R2, R3, R4, R5 = "R1", "R2", "R3", "R4", "R5"
RULES = (R1, R2, R3, R4, R5)
RULE_NAMES = {
    R1: "threat-alert",
    R2: "uncommon-port",
    R3: "no-fqdn",
    R4: "non-web-protocol",
    R5: "location-asymmetric",
}

DEFAULT_COMMON_PORTS = frozenset({21, 22, 25, 53, 80, 110, 143, 443, 465, 587, 993, 995})
WEB_PROTOCOLS = frozenset({HTTP, HTTPS, QUIC, DOH})
DEFAULT_LOCATIONS = ("CN", "US")


@dataclass(frozen=True)
class AnomalyConfig:
    common_ports: frozenset[int] = DEFAULT_COMMON_PORTS
    web_protocols: frozenset[str] = WEB_PROTOCOLS


class LocationIndex:
    """Which capture locations observed each destination address."""

    def __init__(self, locations: Iterable[str] = DEFAULT_LOCATIONS):
        self.locations = tuple(sorted(set(locations)))
        self._seen: dict[str, set[str]] = defaultdict(set)

    def observe(self, address: str | None, location: str) -> None:
        if address:
            self._seen[address].add(location)

    def observe_destination(self, dest: DestinationRecord, location: str) -> None:
        for addr in (dest.ip, dest.fqdn, dest.url):
            self.observe(addr, location)

    def seen_at(self, address: str) -> frozenset[str]:
        return frozenset(self._seen.get(address, ()))

    def missing(self, address: str) -> list[str]:
        return [loc for loc in self.locations if loc not in self._seen.get(address, ())]


@dataclass
class AnomalyReport:
    flow_id: str
    rules: tuple[str, ...]
    evidence: dict[str, str] = field(default_factory=dict)
    not_evaluated: tuple[str, ...] = ()

    @property
    def flagged(self) -> bool:
        return bool(self.rules)

    def as_dict(self) -> dict:
        return {
            "flow_id": self.flow_id,
            "flagged": self.flagged,
            "rules": list(self.rules),
            "rule_names": [RULE_NAMES[r] for r in self.rules],
            "evidence": dict(sorted(self.evidence.items())),
            "not_evaluated": list(self.not_evaluated),
        }


def evaluate_anomaly_rules(
    flow: Flow,
    flow_class: FlowClass,
    dest: DestinationRecord,
    tag: ProtocolTag,
    verdicts: Mapping[str, ThreatVerdict] | None = None,
    locations: LocationIndex | None = None,
    config: AnomalyConfig = AnomalyConfig(),
) -> AnomalyReport:
    """Evaluate R1-R5 independently. Only relayed flows are eligible.

    Without a verdict lookup R1 is reported as not evaluated; likewise R5
    without a location index.
    """
    if flow_class.kind != RELAYED:
        raise ValueError(f"anomaly rules apply to relayed flows only; {flow.flow_id} is {flow_class.kind}")
    hit: dict[str, str] = {}
    skipped = []
    addresses = [a for a in (dest.ip, dest.fqdn, dest.url) if a]

    if verdicts is None:
        skipped.append(R1)
    else:
        bad = [a for a in addresses if a in verdicts and verdicts[a].malicious]
        if bad:
            hit[R1] = "malicious verdict for " + ", ".join(bad)

    if dest.port not in config.common_ports:
        hit[R2] = f"destination port {dest.port}"

    if not dest.fqdn:
        hit[R3] = "no FQDN from host header, SNI or DNS"

    if tag.protocol not in config.web_protocols:
        hit[R4] = f"protocol {tag.protocol}"

    if locations is None:
        skipped.append(R5)
    else:
        gaps = {a: locations.missing(a) for a in addresses}
        gaps = {a: m for a, m in gaps.items() if m}
        if gaps:
            hit[R5] = "; ".join(f"{a} unseen in {','.join(m)}" for a, m in gaps.items())

    rules = tuple(r for r in RULES if r in hit)
    return AnomalyReport(flow.flow_id, rules, hit, tuple(skipped))

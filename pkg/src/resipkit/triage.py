"""Signature-based split of RESIP node traffic into control, tunnel and relayed flows."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

from . import tlsrec
from .appid import DestinationRecord
from .capture import DOWN, UP, Flow

CONTROL = "control"
TUNNEL = "tunnel"
RELAYED = "relayed"
CLASSES = (CONTROL, TUNNEL, RELAYED)

FQDN_MATCH = "fqdn-match"
HEURISTIC = "protocol-heuristic"
DEFAULT = "default"

HEADERLESS_WINDOW = 4096


def detect_headerless_tls(flow: Flow, window: int = HEADERLESS_WINDOW) -> bool:
    """TLS-framed payload in both directions with no ClientHello anywhere.

    Flows lacking payload in either direction are never flagged.
    """
    if not flow.payloads(UP) or not flow.payloads(DOWN):
        return False
    for direction in (UP, DOWN):
        if any(tlsrec.is_client_hello(p) for p in flow.payloads(direction)):
            return False
    for direction in (UP, DOWN):
        if not tlsrec.records_well_formed(flow.stream(direction), window, more_follows=False):
            return False
    return True


HEURISTICS: dict[str, Callable[[Flow], bool]] = {
    "tls-records-without-handshake": detect_headerless_tls,
}


def domain_matches(fqdn: str, pattern: str) -> bool:
    """Exact match, or suffix match for patterns with a leading dot."""
    pattern = pattern.lower()
    if pattern.startswith("."):
        return fqdn.endswith(pattern)
    return fqdn == pattern


@dataclass(frozen=True)
class ProviderSignatureSet:
    provider: str
    control_domains: tuple[str, ...] = ()
    tunnel_domains: tuple[str, ...] = ()
    tunnel_protocol_heuristics: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "control_domains", tuple(d.lower() for d in self.control_domains))
        object.__setattr__(self, "tunnel_domains", tuple(d.lower() for d in self.tunnel_domains))
        object.__setattr__(self, "tunnel_protocol_heuristics", tuple(self.tunnel_protocol_heuristics))
        overlap = set(self.control_domains) & set(self.tunnel_domains)
        if overlap:
            raise ValueError(f"{self.provider}: domains listed as both control and tunnel: {sorted(overlap)}")
        unknown = [h for h in self.tunnel_protocol_heuristics if h not in HEURISTICS]
        if unknown:
            raise ValueError(f"{self.provider}: unknown protocol heuristics {unknown}")


@dataclass(frozen=True)
class FlowClass:
    kind: str
    provider: str | None = None
    matched_signature: str | None = None
    evidence: str = DEFAULT
    conflicts: tuple[str, ...] = field(default=())

    def as_dict(self):
        return {
            "class": self.kind,
            "provider": self.provider,
            "matched_signature": self.matched_signature,
            "evidence": self.evidence,
            "conflicts": list(self.conflicts),
        }


def classify_flow(flow: Flow, dest: DestinationRecord, sigs: list[ProviderSignatureSet]) -> FlowClass:
    """Control/tunnel/relayed verdict.

    Domain signatures are checked before protocol heuristics. When several
    providers claim the same FQDN the first provider in ``sigs`` wins and the
    others are reported in ``conflicts``.
    """
    if dest.fqdn:
        hits = []
        for s in sigs:
            for kind, patterns in ((CONTROL, s.control_domains), (TUNNEL, s.tunnel_domains)):
                pat = next((p for p in patterns if domain_matches(dest.fqdn, p)), None)
                if pat is not None:
                    hits.append((s.provider, kind, pat))
                    break
        if hits:
            provider, kind, pat = hits[0]
            others = tuple(dict.fromkeys(p for p, _, _ in hits[1:] if p != provider))
            return FlowClass(kind, provider, pat, FQDN_MATCH, others)
    results: dict[str, bool] = {}
    for s in sigs:
        for name in s.tunnel_protocol_heuristics:
            if name not in results:
                results[name] = HEURISTICS[name](flow)
            if results[name]:
                return FlowClass(TUNNEL, s.provider, name, HEURISTIC)
    return FlowClass(RELAYED)


def parse_signatures(doc: dict) -> list[ProviderSignatureSet]:
    out = []
    for entry in doc.get("providers", []):
        out.append(
            ProviderSignatureSet(
                provider=entry["name"],
                control_domains=tuple(entry.get("control_domains", ())),
                tunnel_domains=tuple(entry.get("tunnel_domains", ())),
                tunnel_protocol_heuristics=tuple(entry.get("tunnel_protocol_heuristics", ())),
            )
        )
    names = [s.provider for s in out]
    if len(set(names)) != len(names):
        raise ValueError("duplicate provider names in signature file")
    return out


def load_signatures(path: str | Path | None = None) -> list[ProviderSignatureSet]:
    """Signature sets from a JSON file; the bundled defaults when ``path`` is None."""
    if path is None:
        text = resources.files("resipkit").joinpath("data/signatures.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return parse_signatures(json.loads(text))

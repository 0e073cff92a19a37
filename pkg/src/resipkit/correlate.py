"""Match infiltration probe logs to relayed flows; compare node-IP datasets.

Candidate pairs need the same destination IP and port, a start time within
``dt`` seconds of the probe's send time, and upstream bytes within ``dbytes``
of the request size. Among candidates the assignment is one-to-one and
maximises the number of matched pairs first, then minimises the summed time
offset, then the summed size difference. Maximising the count first is what
guarantees that tightening either tolerance can only remove matches.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable

import numpy as np
from scipy.optimize import linear_sum_assignment

from .appid import DestinationRecord
from .capture import Flow

DEFAULT_DT = 5.0
DEFAULT_DBYTES = 64


@dataclass(frozen=True)
class ProbeLogEntry:
    probe_id: str
    ip: str
    port: int
    sent_at: float
    request_size: int
    response_size: int = 0
    url: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeLogEntry":
        return cls(
            probe_id=str(d["probe_id"]),
            ip=d["ip"],
            port=int(d["port"]),
            sent_at=float(d["sent_at"]),
            request_size=int(d["request_size"]),
            response_size=int(d.get("response_size", 0)),
            url=d.get("url"),
        )


@dataclass(frozen=True)
class FlowSummary:
    """The parts of a relayed flow that correlation looks at."""

    flow_id: str
    ip: str
    port: int
    start: float
    up_bytes: int

    @classmethod
    def of(cls, flow: Flow, dest: DestinationRecord | None = None) -> "FlowSummary":
        ip, port = (dest.ip, dest.port) if dest else (flow.key.dst_ip, flow.key.dst_port)
        return cls(flow.flow_id, ip, port, flow.first_ts, flow.bytes_up)

    @classmethod
    def from_dict(cls, d: dict) -> "FlowSummary":
        return cls(str(d["flow_id"]), d["dst_ip"], int(d["dst_port"]), float(d["first_ts"]), int(d["bytes_up"]))


@dataclass(frozen=True)
class MatchResult:
    probe_id: str
    flow_id: str
    time_offset: float
    size_diff: int

    def as_dict(self) -> dict:
        return {"probe_id": self.probe_id, "flow_id": self.flow_id, "time_offset": self.time_offset, "size_diff": self.size_diff}


@dataclass
class CorrelationResult:
    matches: list[MatchResult]
    unmatched_probes: list[str]
    unmatched_flows: list[str]


def _components(edges: list[tuple[int, int]]) -> list[tuple[list[int], list[int]]]:
    parent: dict = {}

    def find(x):
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for p, f in edges:
        parent[find(("p", p))] = find(("f", f))
    groups: dict = defaultdict(lambda: ([], []))
    for node in list(parent):
        side, idx = node
        groups[find(node)][0 if side == "p" else 1].append(idx)
    return [(sorted(ps), sorted(fs)) for ps, fs in groups.values()]


def correlate_probes(
    probes: Iterable[ProbeLogEntry],
    flows: Iterable[FlowSummary],
    dt: float = DEFAULT_DT,
    dbytes: int = DEFAULT_DBYTES,
) -> CorrelationResult:
    if dt <= 0 or dbytes <= 0:
        raise ValueError("tolerances must be positive")
    probes = sorted(probes, key=lambda p: (p.probe_id, p.sent_at))
    flows = sorted(flows, key=lambda f: (f.flow_id, f.start))
    by_dest: dict[tuple[str, int], list[int]] = defaultdict(list)
    for j, f in enumerate(flows):
        by_dest[(f.ip, f.port)].append(j)

    edges: dict[tuple[int, int], int] = {}
    for i, p in enumerate(probes):
        for j in by_dest.get((p.ip, p.port), ()):
            f = flows[j]
            t_off = abs(f.start - p.sent_at)
            s_off = abs(f.up_bytes - p.request_size)
            if t_off <= dt and s_off <= dbytes:
                # integer microseconds then bytes, packed lexicographically
                edges[(i, j)] = int(round(t_off * 1e6)) * (dbytes + 1) + s_off

    matches = []
    for ps, fs in _components(list(edges)):
        costs = [edges[(i, j)] for i in ps for j in fs if (i, j) in edges]
        big = (max(costs) + 1) * (min(len(ps), len(fs)) + 1)
        m = np.full((len(ps), len(fs)), float(big))
        for a, i in enumerate(ps):
            for b, j in enumerate(fs):
                if (i, j) in edges:
                    m[a, b] = edges[(i, j)]
        rows, cols = linear_sum_assignment(m)
        for a, b in zip(rows, cols):
            i, j = ps[a], fs[b]
            if (i, j) in edges:
                p, f = probes[i], flows[j]
                matches.append(MatchResult(p.probe_id, f.flow_id, f.start - p.sent_at, f.up_bytes - p.request_size))
    matches.sort(key=lambda r: (r.probe_id, r.flow_id))
    hit_p = {r.probe_id for r in matches}
    hit_f = {r.flow_id for r in matches}
    return CorrelationResult(
        matches,
        [p.probe_id for p in probes if p.probe_id not in hit_p],
        [f.flow_id for f in flows if f.flow_id not in hit_f],
    )


def read_probe_log(fh: IO[str]) -> list[ProbeLogEntry]:
    out = []
    for lineno, line in enumerate(fh, start=1):
        if line.strip():
            try:
                out.append(ProbeLogEntry.from_dict(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"probe log line {lineno}: {exc}") from None
    return out


def read_flow_summaries(fh: IO[str]) -> list[FlowSummary]:
    return [FlowSummary.from_dict(json.loads(line)) for line in fh if line.strip()]


# -- dataset overlap -------------------------------------------------------------


def read_ip_set(path: str | Path) -> set[str]:
    with open(path, encoding="utf-8") as fh:
        return {ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")}


def dataset_overlap(ours: set[str], prior: list[tuple[str, set[str]]]) -> dict:
    """Share of ``ours`` present in each prior dataset and in their union."""
    if not ours:
        raise ValueError("empty base set")
    union: set[str] = set()
    per = []
    for name, ips in prior:
        common = ours & ips
        union |= common
        per.append({"name": name, "size": len(ips), "overlap": len(common), "pct": 100.0 * len(common) / len(ours)})
    return {
        "base_size": len(ours),
        "datasets": per,
        "union_overlap": len(union),
        "union_pct": 100.0 * len(union) / len(ours),
    }

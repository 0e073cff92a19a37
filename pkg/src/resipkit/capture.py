"""Packet capture ingestion: bidirectional flow assembly and the DNS IP->name map."""

from __future__ import annotations

import ipaddress
import json
import logging
import socket
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import IO, Iterable, Iterator

import dpkt

logger = logging.getLogger(__name__)

UP = "up"
DOWN = "down"
ALL = "all"

TCP = "tcp"
UDP = "udp"

_PCAPNG_MAGIC = b"\x0a\x0d\x0d\x0a"
_SEQ_MOD = 1 << 32


@dataclass(frozen=True)
class AssemblyConfig:
    idle_timeout: float = 300.0
    payload_only: bool = True

    def __post_init__(self):
        if self.idle_timeout <= 0:
            raise ValueError(f"idle_timeout must be positive, got {self.idle_timeout}")


@dataclass(frozen=True)
class FlowKey:
    """5-tuple oriented so that ``src`` is the flow initiator."""

    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    transport: str

    def __str__(self):
        return f"{self.transport}:{_fmt_ep(self.src_ip, self.src_port)}->{_fmt_ep(self.dst_ip, self.dst_port)}"

    def as_dict(self):
        return {
            "src_ip": self.src_ip,
            "src_port": self.src_port,
            "dst_ip": self.dst_ip,
            "dst_port": self.dst_port,
            "transport": self.transport,
        }


def _fmt_ep(ip: str, port: int) -> str:
    return f"[{ip}]:{port}" if ":" in ip else f"{ip}:{port}"


@dataclass(frozen=True)
class PacketRecord:
    timestamp: float
    direction: str
    payload: bytes
    src: tuple[str, int]
    dst: tuple[str, int]
    transport: str
    tcp_flags: int = 0
    seq: int | None = None

    @property
    def transport_payload_len(self) -> int:
        return len(self.payload)


@dataclass(frozen=True)
class Flow:
    """An assembled bidirectional conversation.

    ``packets`` holds every packet assigned to the flow in timestamp order.
    Packet-count features (``fp_*``) and the per-direction series used for
    feature extraction skip zero-payload packets when ``payload_only`` is set.
    """

    key: FlowKey
    packets: tuple[PacketRecord, ...]
    payload_only: bool = True

    @property
    def first_ts(self) -> float:
        return self.packets[0].timestamp

    @property
    def last_ts(self) -> float:
        return self.packets[-1].timestamp

    @property
    def flow_id(self) -> str:
        return f"{self.key}@{self.first_ts:.6f}"

    @cached_property
    def _totals(self) -> dict[str, int]:
        t = {"bytes_up": 0, "bytes_down": 0, "pkts_up": 0, "pkts_down": 0}
        for p in self.packets:
            t[f"bytes_{p.direction}"] += len(p.payload)
            t[f"pkts_{p.direction}"] += 1
        return t

    @property
    def bytes_up(self) -> int:
        return self._totals["bytes_up"]

    @property
    def bytes_down(self) -> int:
        return self._totals["bytes_down"]

    @property
    def pkts_up(self) -> int:
        return self._totals["pkts_up"]

    @property
    def pkts_down(self) -> int:
        return self._totals["pkts_down"]

    def series(self, direction: str = ALL) -> tuple[PacketRecord, ...]:
        """Packets that feed the feature sequences for ``direction``."""
        return self._series[direction]

    @cached_property
    def _series(self) -> dict[str, tuple[PacketRecord, ...]]:
        keep = [p for p in self.packets if p.payload or not self.payload_only]
        return {
            UP: tuple(p for p in keep if p.direction == UP),
            DOWN: tuple(p for p in keep if p.direction == DOWN),
            ALL: tuple(keep),
        }

    @property
    def fp_up(self) -> int:
        return len(self._series[UP])

    @property
    def fp_down(self) -> int:
        return len(self._series[DOWN])

    @property
    def fp_all(self) -> int:
        return len(self._series[ALL])

    def payloads(self, direction: str) -> list[bytes]:
        """Non-empty payloads in capture order (datagrams for UDP)."""
        return [p.payload for p in self.packets if p.direction == direction and p.payload]

    def stream(self, direction: str) -> bytes:
        """Application byte stream for one direction.

        TCP segments are placed by sequence number; duplicated ranges keep the
        first copy seen. UDP payloads are concatenated in capture order.
        """
        return self._streams[direction]

    @cached_property
    def _streams(self) -> dict[str, bytes]:
        return {d: _reassemble([p for p in self.packets if p.direction == d], self.key.transport) for d in (UP, DOWN)}

    def summary(self) -> dict:
        return {
            "flow_id": self.flow_id,
            "key": self.key.as_dict(),
            "first_ts": self.first_ts,
            "last_ts": self.last_ts,
            "pkts_up": self.pkts_up,
            "pkts_down": self.pkts_down,
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "fp_up": self.fp_up,
            "fp_down": self.fp_down,
            "fp_all": self.fp_all,
        }


def _reassemble(packets: list[PacketRecord], transport: str) -> bytes:
    data = [p for p in packets if p.payload]
    if not data:
        return b""
    if transport != TCP or any(p.seq is None for p in data):
        return b"".join(p.payload for p in data)
    first = data[0].seq
    rel = [((p.seq - first + (1 << 31)) % _SEQ_MOD) - (1 << 31) for p in data]
    low = min(rel)
    segs = sorted((r - low, i, p.payload) for i, (r, p) in enumerate(zip(rel, data)))
    out = bytearray()
    for off, _, payload in segs:
        end = off + len(payload)
        if end <= len(out):
            continue
        if off > len(out):
            # Missing bytes (capture loss); stitch what we have.
            out.extend(payload)
        else:
            out.extend(payload[len(out) - off:])
    return bytes(out)


class DnsMap:
    """IP -> names observed in DNS answers, with CNAME chains collapsed.

    Collapsing walks each A/AAAA owner name back through the recorded CNAME
    aliases to the leftmost (originally queried) names.
    """

    def __init__(self):
        self._owners: dict[str, dict[str, float]] = defaultdict(dict)
        self._aliases: dict[str, set[str]] = defaultdict(set)

    def add_address(self, ip: str, name: str, ts: float) -> None:
        ip = _norm_ip(ip)
        name = normalize_name(name)
        prev = self._owners[ip].get(name)
        if prev is None or ts < prev:
            self._owners[ip][name] = ts

    def add_cname(self, alias: str, target: str) -> None:
        alias, target = normalize_name(alias), normalize_name(target)
        if alias != target:
            self._aliases[target].add(alias)

    def merge(self, other: "DnsMap") -> None:
        for ip, owners in other._owners.items():
            for name, ts in owners.items():
                self.add_address(ip, name, ts)
        for target, aliases in other._aliases.items():
            self._aliases[target] |= aliases

    def _roots(self, name: str) -> set[str]:
        out, seen, stack = set(), {name}, [name]
        while stack:
            n = stack.pop()
            parents = self._aliases.get(n)
            if not parents:
                out.add(n)
                continue
            for alias in parents:
                if alias not in seen:
                    seen.add(alias)
                    stack.append(alias)
        return out or {name}

    def names(self, ip: str) -> frozenset[str]:
        owners = self._owners.get(_norm_ip(ip), {})
        result: set[str] = set()
        for name in owners:
            result |= self._roots(name)
        return frozenset(result)

    def resolution_times(self, ip: str) -> dict[str, float]:
        """Earliest answer timestamp per collapsed name."""
        times: dict[str, float] = {}
        for name, ts in self._owners.get(_norm_ip(ip), {}).items():
            for root in self._roots(name):
                if root not in times or ts < times[root]:
                    times[root] = ts
        return times

    def ips(self) -> list[str]:
        return sorted(self._owners)

    def lookup_unique(self, ip: str) -> str | None:
        names = self.names(ip)
        if len(names) == 1:
            return next(iter(names))
        return None

    def __len__(self):
        return len(self._owners)

    def __contains__(self, ip):
        return _norm_ip(ip) in self._owners

    def as_dict(self) -> dict[str, list[str]]:
        return {ip: sorted(self.names(ip)) for ip in self.ips()}


def lookup_unique_fqdn(dns: DnsMap, ip: str) -> str | None:
    """The single name ``ip`` maps to, or None when absent or ambiguous."""
    return dns.lookup_unique(ip)


def normalize_name(name: str | bytes) -> str:
    if isinstance(name, bytes):
        name = name.decode("ascii", "replace")
    return name.strip().rstrip(".").lower()


def _norm_ip(ip: str) -> str:
    try:
        return str(ipaddress.ip_address(ip))
    except ValueError:
        return ip


@dataclass
class IngestStats:
    packets: int = 0
    assigned: int = 0
    skipped_truncated: int = 0
    non_ip: int = 0
    non_transport: int = 0
    dns_responses: int = 0
    payload_bytes: int = 0

    def merge(self, other: "IngestStats") -> None:
        for f in self.__dataclass_fields__:
            setattr(self, f, getattr(self, f) + getattr(other, f))

    def as_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


@dataclass
class CaptureResult:
    flows: list[Flow]
    dns: DnsMap
    stats: IngestStats = field(default_factory=IngestStats)


@dataclass
class _RawPacket:
    ts: float
    src: tuple[str, int]
    dst: tuple[str, int]
    transport: str
    payload: bytes
    flags: int
    seq: int | None


def _open_reader(fh: IO[bytes]):
    magic = fh.read(4)
    fh.seek(0)
    if len(magic) < 4:
        raise ValueError("file too short to be a capture")
    if magic == _PCAPNG_MAGIC:
        return dpkt.pcapng.Reader(fh)
    try:
        return dpkt.pcap.Reader(fh)
    except ValueError as exc:
        raise ValueError(f"not a pcap or pcapng file: {exc}") from exc


def _decode_link(linktype: int, buf: bytes):
    """Return a dpkt IP/IP6 object, or None for non-IP frames."""
    if linktype == dpkt.pcap.DLT_EN10MB:
        frame = dpkt.ethernet.Ethernet(buf)
        net = frame.data
        if isinstance(net, bytes) and frame.type in (dpkt.ethernet.ETH_TYPE_IP, dpkt.ethernet.ETH_TYPE_IP6):
            # dpkt leaves an undecodable IP header as raw bytes
            raise dpkt.NeedData("truncated IP header")
    elif linktype in (dpkt.pcap.DLT_NULL, dpkt.pcap.DLT_LOOP):
        net = dpkt.loopback.Loopback(buf).data
    elif linktype == dpkt.pcap.DLT_LINUX_SLL:
        net = dpkt.sll.SLL(buf).data
    elif linktype == 276:
        net = dpkt.sll2.SLL2(buf).data
    elif linktype in (12, 14, 101, 228, 229):
        if not buf:
            return None
        version = buf[0] >> 4
        net = dpkt.ip.IP(buf) if version == 4 else dpkt.ip6.IP6(buf) if version == 6 else None
    else:
        return None
    if isinstance(net, (dpkt.ip.IP, dpkt.ip6.IP6)):
        return net
    return None


class _Truncated(Exception):
    pass


def _transport_of(net) -> tuple[str, object] | None:
    if isinstance(net, dpkt.ip.IP):
        if net.offset or net.mf:
            return None  # fragments carry no usable transport header
        declared = net.len - net.hl * 4
        proto = net.p
        src, dst = socket.inet_ntop(socket.AF_INET, net.src), socket.inet_ntop(socket.AF_INET, net.dst)
    else:
        declared = net.plen
        proto = net.nxt
        src, dst = socket.inet_ntop(socket.AF_INET6, net.src), socket.inet_ntop(socket.AF_INET6, net.dst)
    seg = net.data
    if proto == dpkt.ip.IP_PROTO_TCP:
        if not isinstance(seg, dpkt.tcp.TCP):
            raise _Truncated
        got = len(seg)
    elif proto == dpkt.ip.IP_PROTO_UDP:
        if not isinstance(seg, dpkt.udp.UDP):
            raise _Truncated
        got = len(seg)
        if seg.ulen and len(seg.data) < seg.ulen - 8:
            raise _Truncated
    else:
        return None
    if isinstance(net, dpkt.ip.IP) and got < declared:
        raise _Truncated
    if isinstance(net, dpkt.ip6.IP6) and got < declared - _ip6_ext_len(net):
        raise _Truncated
    return (src, dst), seg


def _ip6_ext_len(net) -> int:
    return sum(len(h) for h in getattr(net, "extension_hdrs", {}).values() if h is not None)


def _iter_packets(path: Path, stats: IngestStats) -> Iterator[_RawPacket]:
    with open(path, "rb") as fh:
        reader = _open_reader(fh)
        linktype = reader.datalink()
        for ts, buf in reader:
            stats.packets += 1
            try:
                net = _decode_link(linktype, buf)
            except (dpkt.UnpackError, dpkt.NeedData, ValueError, IndexError):
                stats.skipped_truncated += 1
                continue
            if net is None:
                stats.non_ip += 1
                continue
            try:
                decoded = _transport_of(net)
            except _Truncated:
                stats.skipped_truncated += 1
                continue
            if decoded is None:
                stats.non_transport += 1
                continue
            (src, dst), seg = decoded
            payload = bytes(seg.data)
            if isinstance(seg, dpkt.tcp.TCP):
                yield _RawPacket(round(float(ts), 6), (src, seg.sport), (dst, seg.dport), TCP, payload, seg.flags, seg.seq)
            else:
                yield _RawPacket(round(float(ts), 6), (src, seg.sport), (dst, seg.dport), UDP, payload, 0, None)


def _record_dns(pkt: _RawPacket, dns: DnsMap, stats: IngestStats) -> None:
    if pkt.transport != UDP or pkt.src[1] != 53 or not pkt.payload:
        return
    try:
        msg = dpkt.dns.DNS(pkt.payload)
    except (dpkt.UnpackError, dpkt.NeedData, IndexError, ValueError):
        return
    if not msg.qr or msg.rcode != dpkt.dns.DNS_RCODE_NOERR:
        return
    stats.dns_responses += 1
    for rr in msg.an:
        if rr.type == dpkt.dns.DNS_CNAME:
            dns.add_cname(rr.name, rr.cname)
        elif rr.type == dpkt.dns.DNS_A and len(rr.rdata) == 4:
            dns.add_address(socket.inet_ntop(socket.AF_INET, rr.rdata), rr.name, pkt.ts)
        elif rr.type == dpkt.dns.DNS_AAAA and len(rr.rdata) == 16:
            dns.add_address(socket.inet_ntop(socket.AF_INET6, rr.rdata), rr.name, pkt.ts)


def _initiator(pkts: list[_RawPacket]) -> tuple[tuple[str, int], tuple[str, int]]:
    if pkts[0].transport == TCP:
        for p in pkts:
            syn, ack = p.flags & dpkt.tcp.TH_SYN, p.flags & dpkt.tcp.TH_ACK
            if syn and not ack:
                return p.src, p.dst
            if syn and ack:
                return p.dst, p.src
    return pkts[0].src, pkts[0].dst


def _build_flow(pkts: list[_RawPacket], payload_only: bool) -> Flow:
    src, dst = _initiator(pkts)
    key = FlowKey(src[0], src[1], dst[0], dst[1], pkts[0].transport)
    records = tuple(
        PacketRecord(
            timestamp=p.ts,
            direction=UP if p.src == src else DOWN,
            payload=p.payload,
            src=p.src,
            dst=p.dst,
            transport=p.transport,
            tcp_flags=p.flags,
            seq=p.seq,
        )
        for p in pkts
    )
    return Flow(key=key, packets=records, payload_only=payload_only)


def assemble_flows(packets: Iterable[_RawPacket], config: AssemblyConfig) -> list[Flow]:
    conversations: dict[tuple, list[_RawPacket]] = defaultdict(list)
    for p in packets:
        conv = (p.transport,) + tuple(sorted((p.src, p.dst)))
        conversations[conv].append(p)
    flows = []
    for pkts in conversations.values():
        pkts.sort(key=lambda p: p.ts)  # stable: ties keep capture order
        start = 0
        for i in range(1, len(pkts) + 1):
            if i == len(pkts) or pkts[i].ts - pkts[i - 1].ts > config.idle_timeout:
                flows.append(_build_flow(pkts[start:i], config.payload_only))
                start = i
    flows.sort(key=lambda f: (f.first_ts, str(f.key)))
    return flows


def read_capture(path: str | Path, config: AssemblyConfig | None = None) -> CaptureResult:
    """Ingest one pcap/pcapng file. Raises OSError if unreadable."""
    config = config or AssemblyConfig()
    stats = IngestStats()
    dns = DnsMap()
    raw = []
    for pkt in _iter_packets(Path(path), stats):
        stats.assigned += 1
        stats.payload_bytes += len(pkt.payload)
        _record_dns(pkt, dns, stats)
        raw.append(pkt)
    flows = assemble_flows(raw, config)
    logger.info("%s: %d packets, %d flows, %d skipped", path, stats.packets, len(flows), stats.skipped_truncated)
    return CaptureResult(flows, dns, stats)


def ingest_capture(path: str | Path, config: AssemblyConfig | None = None) -> tuple[list[Flow], DnsMap]:
    result = read_capture(path, config)
    return result.flows, result.dns


def write_flow_summaries(flows: Iterable[Flow], fh: IO[str]) -> int:
    n = 0
    for flow in flows:
        fh.write(json.dumps(flow.summary(), sort_keys=True) + "\n")
        n += 1
    return n

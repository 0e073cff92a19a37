"""Application-protocol identification and destination extraction."""

from __future__ import annotations

import csv
import ipaddress
import re
import struct
from collections import Counter
from dataclasses import asdict, dataclass
from typing import IO, Iterable

import dpkt

from . import tlsrec
from .capture import DOWN, TCP, UP, DnsMap, Flow
from .suffix import SuffixList, default_suffix_list

HTTP = "HTTP"
HTTPS = "HTTPS"
QUIC = "QUIC"
SMTP = "SMTP"
IMAP = "IMAP"
POP3 = "POP3"
DNS = "DNS"
DOH = "DoH"
SSDP = "SSDP"
NATPMP = "NAT-PMP"
OTHER = "Other"
UNKNOWN = "Unknown"

PAYLOAD = "payload-parse"
PORT = "port-convention"

DEFAULT_DOH_ENDPOINTS = frozenset({"cloudflare-dns.com"})

# IANA assignments; IMAP is 143/993 and POP3 110/995.
TCP_PORTS = {
    80: HTTP,
    443: HTTPS,
    25: SMTP,
    465: SMTP,
    587: SMTP,
    143: IMAP,
    993: IMAP,
    110: POP3,
    995: POP3,
    53: DNS,
    21: OTHER,
    22: OTHER,
}
UDP_PORTS = {53: DNS, 443: QUIC, 1900: SSDP, 5351: NATPMP}
_TLS_PORT_PROTOCOL = {993: IMAP, 995: POP3, 465: SMTP}

_HTTP_METHODS = "GET|POST|HEAD|PUT|DELETE|OPTIONS|PATCH|CONNECT|TRACE"
_REQUEST_LINE = re.compile(rb"^(" + _HTTP_METHODS.encode() + rb") (\S+) HTTP/1\.[01]\r?\n")
_STATUS_LINE = re.compile(rb"^HTTP/1\.[01] \d{3}[ \r]")
_SMTP_CMD = re.compile(rb"^(EHLO|HELO)[ \r]", re.I)
_SMTP_REPLY = re.compile(rb"^\d{3}[ -]")
_IMAP_GREETING = re.compile(rb"^\* (OK|PREAUTH|BYE)[ \r]", re.I)
_IMAP_CMD = re.compile(rb"^[A-Za-z0-9.]+ (LOGIN|CAPABILITY|AUTHENTICATE|STARTTLS|NOOP|ID)[ \r]", re.I)
_POP3_REPLY = re.compile(rb"^(\+OK|-ERR)")
_POP3_CMD = re.compile(rb"^(USER|APOP|CAPA|AUTH|STLS)[ \r]", re.I)
_SSDP = re.compile(rb"^(M-SEARCH|NOTIFY) \* HTTP/1\.1\r\n")
_QUIC_VERSIONS = {0x00000001, 0x6B3343CF}


@dataclass(frozen=True)
class ProtocolTag:
    protocol: str
    evidence: str


@dataclass(frozen=True)
class DestinationRecord:
    ip: str
    port: int
    fqdn: str | None = None
    fqdn_source: str = "none"
    url: str | None = None
    apex_domain: str | None = None

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class HttpRequest:
    method: str
    target: str
    host: str | None


def _smtp_banner(down: bytes, port: int) -> bool:
    if not _SMTP_REPLY.match(down):
        return False
    first = down.split(b"\n", 1)[0]
    return b"SMTP" in first.upper() or port in (25, 465, 587, 2525)


def _quic_long_header(dgram: bytes) -> bool:
    if len(dgram) < 7 or dgram[0] & 0xC0 != 0xC0:
        return False
    version = struct.unpack("!I", dgram[1:5])[0]
    if version not in _QUIC_VERSIONS and version >> 8 != 0xFF0000:
        return False
    return dgram[5] <= 20


def _dns_message(dgram: bytes) -> bool:
    if len(dgram) < 12:
        return False
    try:
        msg = dpkt.dns.DNS(dgram)
    except (dpkt.UnpackError, dpkt.NeedData, IndexError, ValueError):
        return False
    return msg.opcode == dpkt.dns.DNS_QUERY and len(msg.qd) >= 1


def _nat_pmp(dgram: bytes) -> bool:
    if len(dgram) < 2 or dgram[0] != 0:
        return False
    op = dgram[1]
    return (op == 0 and len(dgram) == 2) or (op in (1, 2) and len(dgram) == 12) or (op >= 128 and len(dgram) in (12, 16))


def _by_payload_tcp(up: bytes, down: bytes, port: int, doh: frozenset[str]) -> str | None:
    if tlsrec.is_client_hello(up):
        if tlsrec.client_hello_sni(up) in doh:
            return DOH
        return _TLS_PORT_PROTOCOL.get(port, HTTPS)
    if _REQUEST_LINE.match(up) or (not up and _STATUS_LINE.match(down)):
        return HTTP
    if _SMTP_CMD.match(up) or _smtp_banner(down, port):
        return SMTP
    if _IMAP_GREETING.match(down) or _IMAP_CMD.match(up):
        return IMAP
    if _POP3_REPLY.match(down) or _POP3_CMD.match(up):
        return POP3
    if len(up) >= 14 and int.from_bytes(up[:2], "big") <= len(up) - 2 and _dns_message(up[2:2 + int.from_bytes(up[:2], "big")]):
        return DNS
    if up.startswith(b"SSH-") or down.startswith(b"SSH-"):
        return OTHER
    return None


def _by_payload_udp(up: list[bytes], down: list[bytes]) -> str | None:
    first = up[0] if up else (down[0] if down else b"")
    if not first:
        return None
    if _quic_long_header(first):
        return QUIC
    if _SSDP.match(first) or (down and down[0].startswith(b"HTTP/1.1 200 OK\r\n") and b"\r\nST:" in down[0]):
        return SSDP
    if _nat_pmp(first):
        return NATPMP
    if _dns_message(first):
        return DNS
    return None


def identify_protocol(flow: Flow, doh_endpoints: Iterable[str] = DEFAULT_DOH_ENDPOINTS) -> ProtocolTag:
    """Payload-first protocol detection with a typical-port fallback."""
    doh = frozenset(doh_endpoints)
    port = flow.key.dst_port
    if flow.key.transport == TCP:
        proto = _by_payload_tcp(flow.stream(UP)[:8192], flow.stream(DOWN)[:8192], port, doh)
        table = TCP_PORTS
    else:
        proto = _by_payload_udp(flow.payloads(UP), flow.payloads(DOWN))
        table = UDP_PORTS
    if proto is not None:
        return ProtocolTag(proto, PAYLOAD)
    if port in table:
        return ProtocolTag(table[port], PORT)
    return ProtocolTag(UNKNOWN, PORT)


def http_requests(flow: Flow, limit: int = 256) -> list[HttpRequest]:
    """Every pipelined/keep-alive HTTP/1.x request in the upstream byte stream."""
    data = flow.stream(UP)
    out = []
    pos = 0
    while pos < len(data) and len(out) < limit:
        m = _REQUEST_LINE.match(data, pos)
        if not m:
            break
        head_end = data.find(b"\r\n\r\n", pos)
        if head_end < 0:
            head_end = len(data)
        headers = _parse_headers(data[m.end():head_end])
        out.append(HttpRequest(m.group(1).decode(), m.group(2).decode("latin-1"), headers.get("host")))
        pos = head_end + 4
        if "chunked" in headers.get("transfer-encoding", "").lower():
            break
        try:
            pos += int(headers.get("content-length", "0"))
        except ValueError:
            break
    return out


def _parse_headers(block: bytes) -> dict[str, str]:
    headers = {}
    for line in block.split(b"\n"):
        name, sep, value = line.partition(b":")
        if sep:
            key = name.strip().lower().decode("latin-1")
            headers.setdefault(key, value.strip().decode("latin-1"))
    return headers


def _host_to_fqdn(host: str | None) -> str | None:
    if not host:
        return None
    host = host.strip().lower()
    if host.startswith("["):
        return None  # IPv6 literal
    host = host.rsplit(":", 1)[0] if host.count(":") == 1 else host
    host = host.rstrip(".")
    try:
        ipaddress.ip_address(host)
        return None
    except ValueError:
        pass
    return host if tlsrec.valid_hostname(host) else None


def _build_url(req: HttpRequest, ip: str) -> str:
    if req.target.lower().startswith(("http://", "https://")):
        return req.target
    host = (req.host or (f"[{ip}]" if ":" in ip else ip)).strip().lower()
    target = req.target if req.target.startswith("/") else "/" + req.target
    return f"http://{host}{target}"


def extract_destination(flow: Flow, tag: ProtocolTag, dns: DnsMap | None = None, suffixes: SuffixList | None = None) -> DestinationRecord:
    """Hierarchical destination of a flow.

    FQDN sources are tried in order Host header, SNI, unique DNS-map entry.
    """
    suffixes = suffixes or default_suffix_list()
    ip, port = flow.key.dst_ip, flow.key.dst_port
    fqdn, source, url = None, "none", None
    requests = http_requests(flow, limit=1) if flow.key.transport == TCP else []
    if requests:
        fqdn = _host_to_fqdn(requests[0].host)
        if fqdn:
            source = "host-header"
        if tag.protocol == HTTP:
            url = _build_url(requests[0], ip)
    if fqdn is None and flow.key.transport == TCP:
        fqdn = tlsrec.client_hello_sni(flow.stream(UP))
        if fqdn:
            source = "sni"
    if fqdn is None and dns is not None:
        fqdn = dns.lookup_unique(ip)
        if fqdn:
            source = "dns-map"
    apex = suffixes.apex(fqdn) if fqdn else None
    return DestinationRecord(ip=ip, port=port, fqdn=fqdn, fqdn_source=source, url=url, apex_domain=apex)


# -- protocol mix report --------------------------------------------------------

MIX_ROWS = (
    ("HTTP", "TCP 80"),
    ("HTTPS", "TCP 443"),
    ("SMTP", "TCP 25/587"),
    ("IMAP", "TCP 143/993"),
    ("POP3", "TCP 110/995"),
    ("Others", "N/A"),
    ("Unknown", "N/A"),
)
_ROW_OF = {HTTP: "HTTP", HTTPS: "HTTPS", DOH: "HTTPS", SMTP: "SMTP", IMAP: "IMAP", POP3: "POP3", UNKNOWN: "Unknown"}


@dataclass(frozen=True)
class MixRow:
    service: str
    typical_port: str
    flows: int
    volume: int
    pct_flows: float
    pct_volume: float


def mix_counts(items: Iterable[tuple[Flow, ProtocolTag]]) -> Counter:
    """Partial counts; merge several with ``+`` before rendering."""
    c: Counter = Counter()
    for flow, tag in items:
        row = _ROW_OF.get(tag.protocol, "Others")
        c[("flows", row)] += 1
        c[("bytes", row)] += flow.bytes_up + flow.bytes_down
    return c


def mix_rows(counts: Counter) -> list[MixRow]:
    total_flows = sum(v for (kind, _), v in counts.items() if kind == "flows")
    if total_flows == 0:
        return []
    total_bytes = sum(v for (kind, _), v in counts.items() if kind == "bytes")
    rows = []
    for service, port in MIX_ROWS:
        n, b = counts[("flows", service)], counts[("bytes", service)]
        pv = round(100.0 * b / total_bytes, 2) if total_bytes else 0.0
        rows.append(MixRow(service, port, n, b, round(100.0 * n / total_flows, 2), pv))
    return rows


def protocol_mix_report(items: Iterable[tuple[Flow, ProtocolTag]]) -> list[MixRow]:
    return mix_rows(mix_counts(items))


def write_mix_csv(rows: list[MixRow], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["Service", "Typical Port", "%Flows", "%Volume"])
    for r in rows:
        w.writerow([r.service, r.typical_port, f"{r.pct_flows:.2f}", f"{r.pct_volume:.2f}"])

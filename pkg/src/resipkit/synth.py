"""Deterministic synthetic capture generation.

Used for fixtures and the bundled demo capture. Every flow written through
:class:`CaptureBuilder` is recorded in ``builder.ledger`` with the byte and
packet totals the ingestor is expected to recover.
"""

from __future__ import annotations

import random
import socket
import struct
from dataclasses import dataclass, field
from pathlib import Path

import dpkt

from .capture import DOWN, TCP, UDP, UP, Flow, FlowKey, PacketRecord

_MAC_A = b"\x02\x00\x00\x00\x00\x01"
_MAC_B = b"\x02\x00\x00\x00\x00\x02"


@dataclass
class FlowLedger:
    key: FlowKey
    bytes_up: int = 0
    bytes_down: int = 0
    fp_up: int = 0
    fp_down: int = 0
    packets: int = 0
    tags: dict = field(default_factory=dict)


def _ip_packet(src: str, dst: str, proto: int, seg) -> bytes:
    if ":" in src:
        ip = dpkt.ip6.IP6(
            src=socket.inet_pton(socket.AF_INET6, src),
            dst=socket.inet_pton(socket.AF_INET6, dst),
            nxt=proto,
            hlim=64,
            data=seg,
        )
        ip.plen = len(bytes(seg))
        eth_type = dpkt.ethernet.ETH_TYPE_IP6
    else:
        ip = dpkt.ip.IP(src=socket.inet_aton(src), dst=socket.inet_aton(dst), p=proto, ttl=64, data=seg)
        ip.len = len(bytes(ip))
        eth_type = dpkt.ethernet.ETH_TYPE_IP
    return bytes(dpkt.ethernet.Ethernet(src=_MAC_A, dst=_MAC_B, type=eth_type, data=ip))


class CaptureBuilder:
    def __init__(self):
        self._frames: list[tuple[float, int, bytes]] = []
        self.ledger: list[FlowLedger] = []

    def _emit(self, ts: float, frame: bytes) -> None:
        self._frames.append((round(ts, 6), len(self._frames), frame))

    def raw_frame(self, ts: float, frame: bytes) -> None:
        self._emit(ts, frame)

    def _tcp(self, ts, src, dst, seq, ack, flags, payload=b""):
        seg = dpkt.tcp.TCP(sport=src[1], dport=dst[1], seq=seq % (1 << 32), ack=ack % (1 << 32), flags=flags, win=65535, data=payload)
        self._emit(ts, _ip_packet(src[0], dst[0], dpkt.ip.IP_PROTO_TCP, seg))

    def tcp_session(
        self,
        client: tuple[str, int],
        server: tuple[str, int],
        messages: list[tuple[float, str, bytes]],
        handshake: bool = True,
        close: bool = True,
        ack_data: bool = True,
        isn: tuple[int, int] = (1000, 50000),
        tags: dict | None = None,
    ) -> FlowLedger:
        """One TCP connection. ``messages`` are ``(ts, "up"|"down", payload)``."""
        led = FlowLedger(FlowKey(client[0], client[1], server[0], server[1], TCP), tags=dict(tags or {}))
        seq = {UP: isn[0], DOWN: isn[1]}
        ends = {UP: (client, server), DOWN: (server, client)}
        t0 = messages[0][0] if messages else 0.0
        A, S, P, F = dpkt.tcp.TH_ACK, dpkt.tcp.TH_SYN, dpkt.tcp.TH_PUSH, dpkt.tcp.TH_FIN
        if handshake:
            self._tcp(t0 - 0.003, client, server, seq[UP], 0, S)
            self._tcp(t0 - 0.002, server, client, seq[DOWN], seq[UP] + 1, S | A)
            self._tcp(t0 - 0.001, client, server, seq[UP] + 1, seq[DOWN] + 1, A)
            led.packets += 3
            seq[UP] += 1
            seq[DOWN] += 1
        for ts, direction, payload in messages:
            src, dst = ends[direction]
            other = DOWN if direction == UP else UP
            self._tcp(ts, src, dst, seq[direction], seq[other], P | A, payload)
            seq[direction] += len(payload)
            led.packets += 1
            if payload:
                setattr(led, f"bytes_{direction}", getattr(led, f"bytes_{direction}") + len(payload))
                setattr(led, f"fp_{direction}", getattr(led, f"fp_{direction}") + 1)
            if ack_data:
                self._tcp(ts + 0.00005, dst, src, seq[other], seq[direction], A)
                led.packets += 1
        if close:
            t_end = (messages[-1][0] if messages else t0) + 0.001
            self._tcp(t_end, client, server, seq[UP], seq[DOWN], F | A)
            self._tcp(t_end + 0.0001, server, client, seq[DOWN], seq[UP] + 1, F | A)
            self._tcp(t_end + 0.0002, client, server, seq[UP] + 1, seq[DOWN] + 1, A)
            led.packets += 3
        self.ledger.append(led)
        return led

    def udp_exchange(
        self,
        client: tuple[str, int],
        server: tuple[str, int],
        messages: list[tuple[float, str, bytes]],
        tags: dict | None = None,
    ) -> FlowLedger:
        led = FlowLedger(FlowKey(client[0], client[1], server[0], server[1], UDP), tags=dict(tags or {}))
        for ts, direction, payload in messages:
            src, dst = (client, server) if direction == UP else (server, client)
            seg = dpkt.udp.UDP(sport=src[1], dport=dst[1], data=payload)
            seg.ulen = len(bytes(seg))
            self._emit(ts, _ip_packet(src[0], dst[0], dpkt.ip.IP_PROTO_UDP, seg))
            led.packets += 1
            if payload:
                setattr(led, f"bytes_{direction}", getattr(led, f"bytes_{direction}") + len(payload))
                setattr(led, f"fp_{direction}", getattr(led, f"fp_{direction}") + 1)
        self.ledger.append(led)
        return led

    def dns_lookup(
        self,
        client: tuple[str, int],
        resolver: str,
        qname: str,
        answers: list[tuple[str, str, str]],
        ts: float,
        qid: int = 1,
    ) -> FlowLedger:
        """Query + response. ``answers`` are ``(type, owner, value)`` with type A/AAAA/CNAME."""
        q = dns_query(qname, qid)
        r = dns_response(qname, answers, qid)
        return self.udp_exchange(client, (resolver, 53), [(ts, UP, q), (ts + 0.01, DOWN, r)])

    def write(self, path: str | Path, fmt: str = "pcap") -> Path:
        path = Path(path)
        frames = sorted(self._frames)
        with open(path, "wb") as fh:
            writer = dpkt.pcapng.Writer(fh) if fmt == "pcapng" else dpkt.pcap.Writer(fh)
            for ts, _, frame in frames:
                writer.writepkt(frame, ts=ts)
        return path


def dns_query(qname: str, qid: int = 1) -> bytes:
    msg = dpkt.dns.DNS(id=qid, qr=dpkt.dns.DNS_Q, rd=1, qd=[dpkt.dns.DNS.Q(name=qname, type=dpkt.dns.DNS_A)])
    return bytes(msg)


def dns_response(qname: str, answers: list[tuple[str, str, str]], qid: int = 1) -> bytes:
    msg = dpkt.dns.DNS(id=qid, qr=dpkt.dns.DNS_R, rd=1, ra=1, qd=[dpkt.dns.DNS.Q(name=qname, type=dpkt.dns.DNS_A)])
    ans = []
    for rtype, owner, value in answers:
        if rtype == "CNAME":
            ans.append(dpkt.dns.DNS.RR(name=owner, type=dpkt.dns.DNS_CNAME, cname=value, ttl=300))
        elif rtype == "AAAA":
            ans.append(dpkt.dns.DNS.RR(name=owner, type=dpkt.dns.DNS_AAAA, rdata=socket.inet_pton(socket.AF_INET6, value), ttl=300))
        else:
            ans.append(dpkt.dns.DNS.RR(name=owner, type=dpkt.dns.DNS_A, rdata=socket.inet_aton(value), ttl=300))
    msg.an = ans
    return bytes(msg)


# -- payload factories -------------------------------------------------------


def tls_record(ctype: int, body: bytes, version: int = 0x0303) -> bytes:
    return struct.pack("!BHH", ctype, version, len(body)) + body


def client_hello(sni: str | None = None, rng: random.Random | None = None, raw_sni: bytes | None = None) -> bytes:
    rng = rng or random.Random(0)
    body = b"\x03\x03" + bytes(rng.getrandbits(8) for _ in range(32))
    body += b"\x20" + bytes(rng.getrandbits(8) for _ in range(32))
    suites = b"\x13\x01\x13\x02\x13\x03\xc0\x2b\xc0\x2f"
    body += struct.pack("!H", len(suites)) + suites + b"\x01\x00"
    exts = b""
    name = raw_sni if raw_sni is not None else (sni.encode("ascii") if sni else None)
    if name is not None:
        entry = b"\x00" + struct.pack("!H", len(name)) + name
        sn = struct.pack("!H", len(entry)) + entry
        exts += struct.pack("!HH", 0, len(sn)) + sn
    groups = b"\x00\x04\x00\x1d\x00\x17"
    exts += struct.pack("!HH", 10, len(groups)) + groups
    exts += struct.pack("!HH", 43, 3) + b"\x02\x03\x04"
    body += struct.pack("!H", len(exts)) + exts
    hs = b"\x01" + len(body).to_bytes(3, "big") + body
    return tls_record(0x16, hs, 0x0301)


def server_hello(rng: random.Random | None = None) -> bytes:
    rng = rng or random.Random(1)
    body = b"\x03\x03" + bytes(rng.getrandbits(8) for _ in range(32)) + b"\x00" + b"\x13\x01" + b"\x00" + b"\x00\x00"
    hs = b"\x02" + len(body).to_bytes(3, "big") + body
    return tls_record(0x16, hs) + tls_record(0x14, b"\x01")


def app_data(size: int, rng: random.Random | None = None) -> bytes:
    rng = rng or random.Random(size)
    return tls_record(0x17, bytes(rng.getrandbits(8) for _ in range(size)))


def http_request(method: str = "GET", target: str = "/", host: str | None = "example.com", headers: dict | None = None) -> bytes:
    lines = [f"{method} {target} HTTP/1.1"]
    if host is not None:
        lines.append(f"Host: {host}")
    for k, v in (headers or {"User-Agent": "Mozilla/5.0", "Accept": "*/*"}).items():
        lines.append(f"{k}: {v}")
    return ("\r\n".join(lines) + "\r\n\r\n").encode("latin-1")


def http_response(body_len: int = 100, status: str = "200 OK") -> bytes:
    head = f"HTTP/1.1 {status}\r\nContent-Type: text/html\r\nContent-Length: {body_len}\r\n\r\n"
    return head.encode("latin-1") + b"x" * body_len


def dialogue(exchanges: list[tuple[str, str | bytes]], start: float, step: float = 0.05) -> list[tuple[float, str, bytes]]:
    """Timestamped messages from ``("up"|"down", text)`` pairs."""
    out = []
    for i, (direction, text) in enumerate(exchanges):
        data = text.encode("latin-1") if isinstance(text, str) else text
        out.append((start + i * step, direction, data))
    return out


def https_exchange(sni: str | None, start: float, n_records: int = 3, rng: random.Random | None = None) -> list[tuple[float, str, bytes]]:
    rng = rng or random.Random(int(start * 1000))
    msgs = [(start, UP, client_hello(sni, rng)), (start + 0.02, DOWN, server_hello(rng))]
    t = start + 0.04
    for _ in range(n_records):
        msgs.append((t, UP, app_data(rng.randint(60, 400), rng)))
        msgs.append((t + 0.02, DOWN, app_data(rng.randint(200, 1300), rng)))
        t += 0.05
    return msgs


def headerless_tls_exchange(start: float, n_records: int = 4, rng: random.Random | None = None) -> list[tuple[float, str, bytes]]:
    """Application-data records only, no handshake."""
    rng = rng or random.Random(int(start * 1000) + 7)
    msgs = []
    t = start
    for _ in range(n_records):
        msgs.append((t, UP, app_data(rng.randint(40, 600), rng)))
        msgs.append((t + 0.01, DOWN, app_data(rng.randint(40, 1200), rng)))
        t += 0.03
    return msgs


def flow_from_series(
    series: list[tuple[float, str, int]],
    key: FlowKey | None = None,
) -> Flow:
    """In-memory flow from ``(ts, "up"|"down", payload_size)`` triples."""
    key = key or FlowKey("10.0.0.2", 40000, "203.0.113.10", 443, TCP)
    ends = {UP: ((key.src_ip, key.src_port), (key.dst_ip, key.dst_port))}
    ends[DOWN] = ends[UP][::-1]
    packets = [
        PacketRecord(ts, d, b"\x17" * size, ends[d][0], ends[d][1], key.transport)
        for ts, d, size in sorted(series, key=lambda s: s[0])
    ]
    return Flow(key, tuple(packets))


NODE_IP = "192.168.1.50"


def _smtp_dialogue(lines: list[tuple[str, str]], start: float) -> list[tuple[float, str, bytes]]:
    return dialogue([(d, t if t.endswith("\r\n") else t + "\r\n") for d, t in lines], start, step=0.04)


def build_demo_capture(seed: int = 7) -> CaptureBuilder:
    """A small exit-node capture exercising every analysis stage.

    Holds control and tunnel flows for three providers, relayed web, mail and
    odd-port traffic, and the DNS answers that name some of the destinations.
    """
    rng = random.Random(seed)
    b = CaptureBuilder()
    node = NODE_IP
    port = iter(range(41000, 42000))
    t = 1_700_000_000.0

    def step(dt: float = 1.5) -> float:
        nonlocal t
        t += dt
        return t

    resolver = "192.168.1.1"
    for qid, (name, ip) in enumerate(
        [("www.example.com", "93.184.216.34"), ("files.example.net", "198.51.100.80"), ("mail.example.org", "198.51.100.25")],
        start=1,
    ):
        b.dns_lookup((node, next(port)), resolver, name, [("A", name, ip)], step(0.2), qid)

    # provider control and tunnel flows
    b.tcp_session((node, next(port)), ("34.120.10.5", 443), https_exchange("proxy.packetstream.io", step(), 6, rng), tags={"class": "tunnel"})
    b.tcp_session((node, next(port)), ("104.18.20.3", 443), https_exchange("api.iproyal.com", step(), 2, rng), tags={"class": "control"})
    b.tcp_session((node, next(port)), ("45.77.10.9", 9443), headerless_tls_exchange(step(), 6, rng), tags={"class": "tunnel"})
    b.tcp_session((node, next(port)), ("104.16.248.249", 443), https_exchange("cloudflare-dns.com", step(), 2, rng), tags={"class": "control"})
    b.tcp_session((node, next(port)), ("52.20.1.7", 443), https_exchange("api.honeygain.com", step(), 2, rng), tags={"class": "control"})

    # relayed web traffic
    b.tcp_session(
        (node, next(port)),
        ("93.184.216.34", 80),
        dialogue([(UP, http_request("GET", "/index.html", "www.example.com")), (DOWN, http_response(1200))], step()),
        tags={"class": "relayed"},
    )
    b.tcp_session(
        (node, next(port)),
        ("198.51.100.80", 80),
        dialogue([(UP, http_request("GET", "/pub/a.zip", None)), (DOWN, http_response(3000))], step()),
        tags={"class": "relayed"},
    )
    for sni, ip in [("shop.example.org", "203.0.113.20"), ("mfa.gov.hu", "203.0.113.30"), ("www.university.edu.cn", "203.0.113.40")]:
        b.tcp_session((node, next(port)), (ip, 443), https_exchange(sni, step(), 3, rng), tags={"class": "relayed"})
    b.tcp_session(
        (node, next(port)),
        ("203.0.113.7", 8443),
        [(step(), UP, bytes(rng.getrandbits(8) for _ in range(90))), (t + 0.05, DOWN, bytes(rng.getrandbits(8) for _ in range(300)))],
        tags={"class": "relayed"},
    )
    quic = bytes([0xC3]) + struct.pack("!I", 1) + b"\x08" + bytes(rng.getrandbits(8) for _ in range(8)) + b"\x00" * 40
    b.udp_exchange((node, next(port)), ("142.250.1.1", 443), [(step(), UP, quic), (t + 0.03, DOWN, bytes([0xC1]) + struct.pack("!I", 1) + b"\x00" * 30)], tags={"class": "relayed"})

    # relayed SMTP: one per stage
    spam = (
        "Subject: your documents\r\nContent-Type: text/plain; charset=utf-8\r\n"
        "Content-Transfer-Encoding: quoted-printable\r\n\r\n"
        "Hello, I have attached your invitation. The password is: =F0=9D=9F=BF=F0=9D=9F=B9=\r\n"
        "=F0=9D=9F=B8=F0=9D=9F=B9.\r\n"
    )
    mx = ("198.51.100.25", 25)
    sessions = [
        [("down", "554 mx.example.org service unavailable")],
        [("down", "220 mx.example.org ESMTP"), ("up", "EHLO host-1.example"), ("down", "250 mx.example.org"),
         ("up", "MAIL FROM:<promo@spam.example>"), ("down", "421 unusual rate of unsolicited mail originating from your IP address")],
        [("down", "220 mx.example.org ESMTP"), ("up", "EHLO host-2.example"), ("down", "250 mx.example.org"),
         ("up", "MAIL FROM:<promo@spam.example>"), ("down", "250 ok"), ("up", "RCPT TO:<alice@example.org>"), ("down", "250 ok"),
         ("up", "DATA"), ("down", "354 go ahead"), ("up", spam + "."),
         ("down", "550 Our system has detected that this message is likely unsolicited mail."), ("up", "QUIT"), ("down", "221 bye")],
        [("down", "220 mx.example.org ESMTP"), ("up", "HELO host-3.example"), ("down", "250 mx.example.org"),
         ("up", "MAIL FROM:<news@spam.example>"), ("down", "250 ok"), ("up", "RCPT TO:<bob@example.org>"), ("down", "250 ok"),
         ("up", "RCPT TO:<carol@example.org>"), ("down", "250 ok"),
         ("up", "DATA"), ("down", "354 go ahead"), ("up", spam + "."), ("down", "250 queued"), ("up", "QUIT"), ("down", "221 bye")],
    ]
    for lines in sessions:
        b.tcp_session((node, next(port)), mx, _smtp_dialogue(lines, step()), tags={"class": "relayed"})

    # relayed mail retrieval
    b.tcp_session(
        (node, next(port)),
        ("198.51.100.110", 110),
        _smtp_dialogue([("down", "+OK POP3 ready"), ("up", "USER alice"), ("down", "+OK"), ("up", "PASS hunter2"), ("down", "+OK logged in"),
                        ("up", "RETR 1"), ("down", "+OK 20 octets\r\nSubject: x\r\n\r\nhello\r\n."), ("up", "QUIT"), ("down", "+OK bye")], step()),
        tags={"class": "relayed"},
    )
    b.tcp_session(
        (node, next(port)),
        ("198.51.100.143", 143),
        _smtp_dialogue([("down", "* OK IMAP4rev1 ready"), ("up", 'a1 LOGIN bob "wrong pass"'), ("down", "a1 NO LOGIN failed"),
                        ("up", "a2 LOGOUT"), ("down", "* BYE\r\na2 OK")], step()),
        tags={"class": "relayed"},
    )
    return b


def write_demo_capture(path: str | Path, seed: int = 7) -> Path:
    return build_demo_capture(seed).write(path)

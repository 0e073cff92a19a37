"""Reference oracles and fixture builders shared by the test modules.

The oracles here are deliberately naive: they recompute values straight from
their definitions with no incremental state, so they can check the library's
one-pass implementations.
"""

from __future__ import annotations

import math
import random

import numpy as np

from resipkit.capture import DOWN, TCP, UP, Flow, FlowKey, PacketRecord
from resipkit.synth import (
    CaptureBuilder,
    app_data,
    dialogue,
    flow_from_series,
    headerless_tls_exchange,
    http_request,
    http_response,
    https_exchange,
)

# -- feature oracle ---------------------------------------------------------------


def oracle_seq(n: int) -> list[int]:
    return [2 ** k for k in range(1, 64) if 2 ** k <= n]


def oracle_length(n_up: int, n_down: int, n_all: int) -> int:
    """Counts feature names block by block, written out longhand."""
    count = 0
    count += len(oracle_seq(n_up))  # UpRatio
    for n in (n_up, n_down, n_all):
        count += 4 * len(oracle_seq(n))  # PAT stats
    for n in (n_up, n_down, n_all):
        count += 2 * len(oracle_seq(n))  # BPS, PPS
    for n in (n_up, n_down, n_all):
        count += 4 * len(oracle_seq(n))  # PS stats
    return count


def _window(i: int, n: int) -> int:
    if n >= i:
        return i
    if n < 2:
        return n
    return 2 ** int(math.floor(math.log2(n)))


def _stats(xs: list[float]) -> list[float]:
    if not xs:
        return [0.0, 0.0, 0.0, 0.0]
    m = sum(xs) / len(xs)
    return [m, min(xs), max(xs), math.sqrt(sum((x - m) ** 2 for x in xs) / len(xs))]


def oracle_features(packets: list[tuple[float, str, int]], caps: tuple[int, int, int]) -> list[float]:
    """Reference feature vector from ``(ts, direction, size)`` triples."""
    packets = sorted(packets)
    series = {
        "up": [(t, s) for t, d, s in packets if d == UP],
        "down": [(t, s) for t, d, s in packets if d == DOWN],
        "all": [(t, s) for t, _, s in packets],
    }
    cap = dict(zip(("up", "down", "all"), caps))
    out: list[float] = []
    up, down = series["up"], series["down"]
    for i in oracle_seq(cap["up"]):
        k = _window(i, len(up))
        if k == 0:
            out.append(0.0)
            continue
        t_k = up[k - 1][0]
        up_len = sum(s for _, s in up[:k])
        down_len = sum(s for t, s in down if t <= t_k)
        out.append(up_len / (up_len + down_len))
    for d in ("up", "down", "all"):
        for i in oracle_seq(cap[d]):
            w = series[d][: _window(i, len(series[d]))]
            out += _stats([w[j][0] - w[j - 1][0] for j in range(1, len(w))])
    for d in ("up", "down", "all"):
        for i in oracle_seq(cap[d]):
            w = series[d][: _window(i, len(series[d]))]
            if not w:
                out += [0.0, 0.0]
                continue
            span = max(w[-1][0] - w[0][0], 1e-6)
            out += [sum(s for _, s in w) / span, len(w) / span]
    for d in ("up", "down", "all"):
        for i in oracle_seq(cap[d]):
            w = series[d][: _window(i, len(series[d]))]
            out += _stats([float(s) for _, s in w])
    return out


def random_series(rng: random.Random, max_packets: int = 80) -> list[tuple[float, str, int]]:
    n = rng.randint(1, max_packets)
    t = rng.uniform(0, 1000)
    out = []
    for _ in range(n):
        t += rng.expovariate(20.0) + 1e-4
        out.append((round(t, 6), rng.choice((UP, DOWN)), rng.randint(1, 1500)))
    return out


# -- in-memory flows from scripted payloads ------------------------------------------


def message_flow(messages: list[tuple[float, str, bytes]], key: FlowKey) -> Flow:
    """Flow built from ``(ts, direction, payload)`` with consistent TCP sequence numbers."""
    seq = {UP: 1000, DOWN: 50000}
    ends = {UP: ((key.src_ip, key.src_port), (key.dst_ip, key.dst_port))}
    ends[DOWN] = ends[UP][::-1]
    pkts = []
    for ts, d, payload in sorted(messages, key=lambda m: m[0]):
        pkts.append(PacketRecord(ts, d, payload, ends[d][0], ends[d][1], key.transport, seq=seq[d] if key.transport == TCP else None))
        seq[d] += len(payload)
    return Flow(key, tuple(pkts))


def script_flow(lines: list[tuple[str, str]], port: int = 25, client_port: int = 40000, start: float = 100.0, server: str = "198.51.100.25") -> Flow:
    """Line-oriented dialogue; CRLF appended to each line."""
    msgs = dialogue([(d, t + "\r\n") for d, t in lines], start, step=0.01)
    return message_flow(msgs, FlowKey("10.0.0.5", client_port, server, port, TCP))


SMTP_OPEN = [("down", "220 mx.example.org ESMTP"), ("up", "EHLO client.example"), ("down", "250 mx.example.org")]


def smtp_lines(stage: str, reject_text: str = "") -> list[tuple[str, str]]:
    """Scripted SMTP dialogue ending at ``stage``."""
    if stage == "rejected-before-helo":
        return [("down", f"554 {reject_text or 'service unavailable'}")]
    lines = list(SMTP_OPEN) + [("up", "MAIL FROM:<a@spam.example>"), ("down", "250 ok")]
    if stage == "closed-before-rcpt":
        return lines + [("up", "RCPT TO:<v@example.org>"), ("down", f"550 {reject_text or 'no such user'}"), ("up", "QUIT"), ("down", "221 bye")]
    lines += [("up", "RCPT TO:<v@example.org>"), ("down", "250 ok"), ("up", "DATA"), ("down", "354 go ahead"),
              ("up", "Subject: hi\r\n\r\nbuy cheap pills now\r\n.")]
    if stage == "rejected-after-data":
        return lines + [("down", f"550 {reject_text or 'rejected'}"), ("up", "QUIT"), ("down", "221 bye")]
    return lines + [("down", "250 queued"), ("up", "QUIT"), ("down", "221 bye")]


def retrieval_flows(successes: int, failures: int) -> list[Flow]:
    """Alternating POP3 and IMAP logins; successful ones fetch one message."""
    out = []
    for k in range(successes + failures):
        ok = k < successes
        port = 40000 + k
        if k % 2:
            lines = [("down", "* OK ready"), ("up", f'a1 LOGIN user{k} "pw"'), ("down", "a1 OK done" if ok else "a1 NO denied")]
            if ok:
                lines += [("up", "a2 FETCH 1 BODY[]"), ("down", "* 1 FETCH (BODY[] {5}\r\nhello)\r\na2 OK")]
            out.append(script_flow(lines, 143, port, server="198.51.100.143"))
        else:
            lines = [("down", "+OK ready"), ("up", f"USER user{k}"), ("down", "+OK"), ("up", "PASS pw"), ("down", "+OK in" if ok else "-ERR denied")]
            if ok:
                lines += [("up", "RETR 1"), ("down", "+OK 5 octets\r\nhello\r\n.")]
            out.append(script_flow(lines + [("up", "QUIT"), ("down", "+OK bye")], 110, port, server="198.51.100.110"))
    return out


# 388/893/4 of 1285 failures round to 30.19/69.49/0.31 (found by exhaustive search)
CAUSE_SPLIT = {"ip-blocklist": 388, "content-filter": 893, "auth-failure": 4}
CAUSE_PHRASES = {
    "ip-blocklist": "part of their network is on our block list",
    "content-filter": "Our system has detected that this message is likely unsolicited mail",
    "auth-failure": "message failed the sender authentication check",
}


def cause_split_flows(delivered: int = 15) -> list[Flow]:
    """Failed sessions in the engineered cause proportions plus some deliveries."""
    stages = ("rejected-before-helo", "closed-before-rcpt", "rejected-after-data")
    out = []
    k = 0
    for cause, n in CAUSE_SPLIT.items():
        for _ in range(n):
            out.append(script_flow(smtp_lines(stages[k % 3], CAUSE_PHRASES[cause]), client_port=1024 + k))
            k += 1
    for _ in range(delivered):
        out.append(script_flow(smtp_lines("delivered"), client_port=1024 + k))
        k += 1
    return out


# -- triage fixture capture ---------------------------------------------------------


NODE = "10.1.1.50"


def plaintext_dialogues(start: float) -> list[tuple[str, int, list[tuple[float, str, bytes]]]]:
    """24 relayed flows over plaintext protocols: ``(server_ip, port, messages)``."""
    rng = random.Random(5)
    out = []
    t = start
    for k in range(8):
        host = f"site{k}.example.com"
        out.append((f"198.18.0.{k + 1}", 80, dialogue([(UP, http_request("GET", f"/p{k}", host)), (DOWN, http_response(200 + 97 * k))], t)))
        t += 1
    for k in range(4):
        out.append((f"198.18.1.{k + 1}", 25, dialogue([(DOWN, "220 mx ESMTP\r\n"), (UP, "EHLO a.example\r\n"), (DOWN, "250 mx\r\n"), (UP, "QUIT\r\n"), (DOWN, "221 bye\r\n")], t)))
        t += 1
    for k in range(4):
        out.append((f"198.18.2.{k + 1}", 110, dialogue([(DOWN, "+OK ready\r\n"), (UP, "USER u\r\n"), (DOWN, "+OK\r\n"), (UP, "PASS p\r\n"), (DOWN, "-ERR denied\r\n")], t)))
        t += 1
    for k in range(4):
        out.append((f"198.18.3.{k + 1}", 143, dialogue([(DOWN, "* OK IMAP ready\r\n"), (UP, "a1 LOGIN u p\r\n"), (DOWN, "a1 NO failed\r\n")], t)))
        t += 1
    for k in range(2):
        out.append((f"198.18.4.{k + 1}", 21, dialogue([(DOWN, "220 ftp ready\r\n"), (UP, "USER anonymous\r\n"), (DOWN, "331 password\r\n")], t)))
        t += 1
    for k in range(2):
        # ASCII junk on an odd port
        text = "".join(rng.choice("abcdefghij \r\n") for _ in range(300))
        out.append((f"198.18.5.{k + 1}", 7000 + k, dialogue([(UP, text), (DOWN, text[::-1])], t)))
        t += 1
    return out


def triage_fixture(path) -> dict[tuple[str, int], str]:
    """Writes the triage capture and returns ``(dst_ip, dst_port) -> expected class``."""
    rng = random.Random(11)
    b = CaptureBuilder()
    expected = {}
    t = 1_600_000_000.0
    ports = iter(range(30000, 31000))

    def add(ip, port, msgs, cls):
        b.tcp_session((NODE, next(ports)), (ip, port), msgs)
        expected[(ip, port)] = cls

    add("34.120.10.5", 443, https_exchange("proxy.packetstream.io", t, 8, rng), "tunnel")
    add("104.18.20.3", 443, https_exchange("api.iproyal.com", t + 1, 2, rng), "control")
    add("45.77.10.9", 9443, headerless_tls_exchange(t + 2, 10, rng), "tunnel")
    for ip, port, msgs in plaintext_dialogues(t + 10):
        add(ip, port, msgs, "relayed")
    add("203.0.113.20", 443, https_exchange("shop.example.org", t + 50, 3, rng), "relayed")
    add("203.0.113.21", 443, https_exchange(None, t + 51, 3, rng), "relayed")
    b.write(path)
    return expected


# -- forest corpora -------------------------------------------------------------------


def tunnel_vs_relayed_flows(n: int, seed: int) -> list[tuple[Flow, int]]:
    """Tunnel flows (label 1) carry large packets for a long time; relayed flows
    are short with small packets. Packet-size means never overlap."""
    rng = random.Random(seed)
    out = []
    for k in range(n):
        label = k % 2
        t = rng.uniform(0, 1e5)
        pkts = []
        count = rng.randint(20, 60) if label else rng.randint(3, 16)
        lo, hi = (1000, 1460) if label else (60, 700)
        for _ in range(count):
            t += rng.expovariate(2.0 if label else 30.0) + 1e-3
            pkts.append((t, rng.choice((UP, DOWN)), rng.randint(lo, hi)))
        out.append((flow_from_series(pkts), label))
    rng.shuffle(out)
    return out


def planted_matrix(names: list[str], informative: str, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Noise everywhere except ``informative``, which alone decides the label."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, size=(n, len(names)))
    y = (X[:, names.index(informative)] > 0.5).astype(int)
    return X, y


# -- correlation corpus ------------------------------------------------------------------


def planted_probe_corpus(n_probes: int, n_background: int, seed: int, dt: float = 5.0, dbytes: int = 64):
    """Probes with one true flow each, buried among background flows that are
    never within tolerance of any probe. Returns (probes, flows, truth)."""
    from resipkit.correlate import FlowSummary, ProbeLogEntry

    rng = random.Random(seed)
    dests = [(f"203.0.{k // 200}.{k % 200 + 1}", rng.choice((80, 443, 8080))) for k in range(200)]
    probes, flows, truth = [], [], {}
    for k in range(n_probes):
        ip, port = dests[k % len(dests)]
        sent = 1000.0 + 60.0 * k
        size = rng.randint(200, 900)
        pid = f"probe-{k:03d}"
        probes.append(ProbeLogEntry(pid, ip, port, sent, size, rng.randint(500, 5000)))
        fid = f"flow-planted-{k:03d}"
        flows.append(FlowSummary(fid, ip, port, sent + rng.uniform(0.05, dt * 0.8), size + rng.randint(-dbytes // 2, dbytes // 2)))
        truth[pid] = fid
    k = 0
    while k < n_background:
        ip, port = rng.choice(dests)
        start = rng.uniform(900.0, 1000.0 + 60.0 * n_probes)
        up = rng.randint(100, 1200)
        near = any(
            p.ip == ip and p.port == port and abs(start - p.sent_at) <= dt and abs(up - p.request_size) <= dbytes for p in probes
        )
        if near:
            continue
        flows.append(FlowSummary(f"flow-bg-{k:05d}", ip, port, start, up))
        k += 1
    return probes, flows, truth


# -- anomaly rule matrix ------------------------------------------------------------


def rule_matrix():
    """Ten relayed flows with hand-walked rule sets.

    Returns ``(cases, verdicts, locations)`` where each case is
    ``(name, flow, flow_class, dest, tag, expected_rules)``.
    """
    from resipkit.appid import DNS, HTTP, HTTPS, SMTP, UNKNOWN, DestinationRecord, ProtocolTag
    from resipkit.risk import LocationIndex, ThreatVerdict
    from resipkit.triage import FlowClass

    both = ("CN", "US")
    rows = [
        # name, ip, port, fqdn, protocol, malicious address, seen at, expected
        ("clean-https", "192.0.2.1", 443, "shop.example.org", HTTPS, None, both, ()),
        ("alerted-ip", "192.0.2.2", 443, "news.example.org", HTTPS, "192.0.2.2", both, ("R1",)),
        ("odd-port-http", "192.0.2.3", 8080, "api.example.org", HTTP, None, both, ("R2",)),
        ("no-fqdn-https", "192.0.2.4", 443, None, HTTPS, None, both, ("R3",)),
        ("smtp-named", "192.0.2.5", 25, "mx.example.org", SMTP, None, both, ("R4",)),
        ("cn-only", "192.0.2.6", 443, "cn.example.org", HTTPS, None, ("CN",), ("R5",)),
        ("odd-unknown", "203.0.113.7", 8443, None, UNKNOWN, None, both, ("R2", "R3", "R4")),
        ("alerted-fqdn-us-only", "192.0.2.8", 443, "bad.example.net", HTTPS, "bad.example.net", ("US",), ("R1", "R5")),
        ("everything", "192.0.2.9", 6667, None, UNKNOWN, "192.0.2.9", (), ("R1", "R2", "R3", "R4", "R5")),
        ("dns-no-name", "192.0.2.10", 53, None, DNS, None, both, ("R3", "R4")),
    ]
    verdicts = {}
    locations = LocationIndex(both)
    cases = []
    for k, (name, ip, port, fqdn, proto, bad, seen, expected) in enumerate(rows):
        key = FlowKey("10.0.0.2", 42000 + k, ip, port, TCP)
        flow = flow_from_series([(float(k), UP, 100), (k + 0.1, DOWN, 300)], key)
        dest = DestinationRecord(ip, port, fqdn, "sni" if fqdn else "none")
        for addr in (ip, fqdn):
            if addr:
                verdicts[addr] = ThreatVerdict(addr, "ip" if addr == ip else "fqdn", {"Mock": "malicious" if addr == bad else "clean"})
                for loc in seen:
                    locations.observe(addr, loc)
        cases.append((name, flow, FlowClass("relayed"), dest, ProtocolTag(proto, "payload-parse"), expected))
    return cases, verdicts, locations


__all__ = [
    "app_data",
    "message_flow",
    "oracle_features",
    "oracle_length",
    "planted_matrix",
    "planted_probe_corpus",
    "random_series",
    "retrieval_flows",
    "cause_split_flows",
    "rule_matrix",
    "script_flow",
    "smtp_lines",
    "triage_fixture",
    "tunnel_vs_relayed_flows",
]

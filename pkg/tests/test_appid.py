import io
import random
from fractions import Fraction

from hypothesis import given, strategies as st

from resipkit import tlsrec
from resipkit.appid import (
    DNS,
    DOH,
    HTTP,
    HTTPS,
    IMAP,
    PAYLOAD,
    PORT,
    POP3,
    QUIC,
    SMTP,
    UNKNOWN,
    ProtocolTag,
    extract_destination,
    identify_protocol,
    mix_counts,
    mix_rows,
    protocol_mix_report,
    write_mix_csv,
)
from resipkit.capture import TCP, UDP, UP, DnsMap, FlowKey
from resipkit.suffix import apex_domain
from resipkit.synth import client_hello, dialogue, dns_query, http_request, http_response, https_exchange

from helpers import message_flow


def tcp(msgs, port, ip="198.51.100.1"):
    return message_flow(msgs, FlowKey("10.0.0.2", 40000, ip, port, TCP))


def test_http_by_payload():
    f = tcp(dialogue([("up", http_request("GET", "/", "x")), ("down", http_response(10))], 1.0), 8080)
    assert identify_protocol(f) == ProtocolTag(HTTP, PAYLOAD)


def test_client_hello_on_443_is_https():
    assert identify_protocol(tcp(https_exchange("www.example.com", 1.0), 443)).protocol == HTTPS


def test_client_hello_to_doh_endpoint():
    assert identify_protocol(tcp(https_exchange("cloudflare-dns.com", 1.0), 443)).protocol == DOH


def test_smtp_banner_then_ehlo():
    f = tcp(dialogue([("down", "220 mx ESMTP\r\n"), ("up", "EHLO a\r\n"), ("down", "250 ok\r\n")], 1.0), 25)
    assert identify_protocol(f) == ProtocolTag(SMTP, PAYLOAD)


def test_imap_and_pop3_greetings():
    imap = tcp(dialogue([("down", "* OK ready\r\n"), ("up", "a1 LOGIN u p\r\n")], 1.0), 143)
    pop = tcp(dialogue([("down", "+OK ready\r\n"), ("up", "USER u\r\n")], 1.0), 110)
    assert identify_protocol(imap).protocol == IMAP
    assert identify_protocol(pop).protocol == POP3


def test_udp_dns_and_quic():
    dns = message_flow([(1.0, "up", dns_query("a.example"))], FlowKey("10.0.0.2", 5000, "10.0.0.1", 53, UDP))
    assert identify_protocol(dns).protocol == DNS
    quic = bytes([0xC3, 0, 0, 0, 1]) + b"\x08" + b"\x00" * 50
    q = message_flow([(1.0, "up", quic)], FlowKey("10.0.0.2", 5001, "198.51.100.1", 443, UDP))
    assert identify_protocol(q).protocol == QUIC


def test_port_fallback_and_unknown():
    junk = tcp([(1.0, "up", bytes(range(200)))], 443)
    assert identify_protocol(junk) == ProtocolTag(HTTPS, PORT)
    odd = tcp([(1.0, "up", bytes(range(200)))], 8443)
    assert identify_protocol(odd) == ProtocolTag(UNKNOWN, PORT)


def test_sni_destination_with_apex():
    f = tcp(https_exchange("www.amazon.com", 1.0), 443)
    d = extract_destination(f, identify_protocol(f))
    assert (d.fqdn, d.fqdn_source, d.apex_domain, d.url) == ("www.amazon.com", "sni", "amazon.com", None)


def test_http_url_from_host_header():
    f = tcp(dialogue([("up", http_request("GET", "/a?b=1", "shop.example"))], 1.0), 80)
    d = extract_destination(f, identify_protocol(f))
    assert d.url == "http://shop.example/a?b=1"
    assert d.fqdn_source == "host-header"


def test_sni_less_https_uses_unique_dns_mapping():
    f = tcp(https_exchange(None, 1.0), 443, ip="192.0.2.44")
    m = DnsMap()
    m.add_address("192.0.2.44", "cdn.example.net", 0.5)
    d = extract_destination(f, identify_protocol(f), m)
    assert (d.fqdn, d.fqdn_source) == ("cdn.example.net", "dns-map")
    m.add_address("192.0.2.44", "other.example.net", 0.6)
    assert extract_destination(f, identify_protocol(f), m).fqdn is None


def test_malformed_host_falls_through_to_sni():
    msgs = [(1.0, "up", http_request("GET", "/", "bad host!")), (1.1, "up", client_hello("good.example.com"))]
    d = extract_destination(tcp(msgs, 443), ProtocolTag(HTTPS, PAYLOAD))
    assert d.fqdn != "bad host!"


def test_apex_uses_public_suffix_rules():
    assert apex_domain("a.b.example.co.uk") == "example.co.uk"
    assert apex_domain("www.example.com") == "example.com"


def test_sni_parser_rejects_garbage():
    assert tlsrec.client_hello_sni(b"") is None
    assert tlsrec.client_hello_sni(b"\x16\x03\x01\x00\x05hello") is None
    assert tlsrec.client_hello_sni(client_hello("x.example.org")) == "x.example.org"


@given(st.binary(max_size=300))
def test_sni_parser_total(data):
    tlsrec.client_hello_sni(data)  # never raises


# -- protocol mix --------------------------------------------------------------


def _flows_of(proto_sizes):
    out = []
    for k, (proto, size) in enumerate(proto_sizes):
        f = message_flow([(float(k), UP, b"q" * size)], FlowKey("10.0.0.2", 1024 + k % 60000, "198.51.100.1", 9, TCP))
        out.append((f, ProtocolTag(proto, PAYLOAD)))
    return out


def test_empty_mix_is_empty():
    assert protocol_mix_report([]) == []


def test_symmetric_mix_is_half_half():
    rows = {r.service: r for r in protocol_mix_report(_flows_of([(HTTPS, 100)] * 50 + [(SMTP, 100)] * 50))}
    assert rows["HTTPS"].pct_flows == rows["SMTP"].pct_flows == 50.0
    assert rows["HTTPS"].pct_volume == 50.0


def test_engineered_https_share():
    # 9217 of 10000 flows HTTPS
    rows = {r.service: r for r in protocol_mix_report(_flows_of([(HTTPS, 10)] * 9217 + [(HTTP, 10)] * 783))}
    assert rows["HTTPS"].pct_flows == 92.17
    assert rows["HTTP"].pct_flows == 7.83


def test_doh_counts_as_https_and_partials_merge():
    a = mix_counts(_flows_of([(DOH, 5), (QUIC, 5)]))
    b = mix_counts(_flows_of([(HTTPS, 5), (UNKNOWN, 5)]))
    rows = {r.service: r.flows for r in mix_rows(a + b)}
    assert rows == {"HTTP": 0, "HTTPS": 2, "SMTP": 0, "IMAP": 0, "POP3": 0, "Others": 1, "Unknown": 1}
    buf = io.StringIO()
    write_mix_csv(mix_rows(a + b), buf)
    assert buf.getvalue().splitlines()[0] == "Service,Typical Port,%Flows,%Volume"


def test_columns_sum_to_hundred():
    rng = random.Random(2)
    protos = [HTTP, HTTPS, SMTP, IMAP, POP3, QUIC, UNKNOWN]
    items = [(rng.choice(protos), rng.randint(1, 3000)) for _ in range(3000)]
    rows = protocol_mix_report(_flows_of(items))
    assert abs(sum(r.pct_flows for r in rows) - 100) <= 0.05
    assert abs(sum(r.pct_volume for r in rows) - 100) <= 0.05
    n_http = sum(p == HTTP for p, _ in items)
    assert next(r for r in rows if r.service == "HTTP").pct_flows == round(float(Fraction(100 * n_http, 3000)), 2)

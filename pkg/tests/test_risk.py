import io
import json

import httpx
import pytest
from hypothesis import given, strategies as st

from resipkit.appid import HTTPS, UNKNOWN, DestinationRecord, ProtocolTag
from resipkit.capture import TCP, UP, FlowKey
from resipkit.risk import (
    AnomalyConfig,
    LocationIndex,
    MockProvider,
    ThreatVerdict,
    VerdictCache,
    classify_sensitive,
    evaluate_anomaly_rules,
    query_threat_providers,
    threat_table,
)
from resipkit.risk.threatintel import (
    CLEAN,
    MALICIOUS,
    NA,
    UNKNOWN as UNKNOWN_OUTCOME,
    AuthError,
    ProviderError,
    RateLimiter,
    URLhaus,
    VirusTotal,
    XForce,
    address_type,
    build_providers,
    format_pct,
    write_threat_csv,
)
from resipkit.synth import flow_from_series
from resipkit.triage import FlowClass

from helpers import rule_matrix

# -- anomaly rules --------------------------------------------------------------------


def test_rule_matrix_matches_hand_walk():
    cases, verdicts, locations = rule_matrix()
    for name, flow, cls, dest, tag, expected in cases:
        rep = evaluate_anomaly_rules(flow, cls, dest, tag, verdicts, locations)
        assert rep.rules == expected, name
        assert rep.flagged == bool(expected)
        assert set(rep.evidence) == set(expected)


def test_rules_only_for_relayed():
    cases, verdicts, locations = rule_matrix()
    _, flow, _, dest, tag, _ = cases[0]
    with pytest.raises(ValueError, match="relayed"):
        evaluate_anomaly_rules(flow, FlowClass("tunnel", "X"), dest, tag, verdicts, locations)


def test_missing_indexes_are_not_evaluated():
    cases, _, _ = rule_matrix()
    _, flow, cls, dest, tag, _ = cases[-1]
    rep = evaluate_anomaly_rules(flow, cls, dest, tag)
    assert rep.not_evaluated == ("R1", "R5")
    assert rep.rules == ("R3", "R4")


def _case(alert: bool, odd_port: bool, no_fqdn: bool, non_web: bool, one_sided: bool):
    ip = "192.0.2.50"
    fqdn = None if no_fqdn else "site.example.org"
    dest = DestinationRecord(ip, 8443 if odd_port else 443, fqdn, "none" if no_fqdn else "sni")
    tag = ProtocolTag(UNKNOWN if non_web else HTTPS, "payload-parse")
    verdicts = {ip: ThreatVerdict(ip, "ip", {"Mock": MALICIOUS if alert else CLEAN})}
    locs = LocationIndex(("CN", "US"))
    for addr in (ip, fqdn):
        if addr:
            locs.observe(addr, "CN")
            if not one_sided:
                locs.observe(addr, "US")
    flow = flow_from_series([(0.0, UP, 10)], FlowKey("10.0.0.2", 40000, ip, dest.port, TCP))
    return evaluate_anomaly_rules(flow, FlowClass("relayed"), dest, tag, verdicts, locs)


@given(st.lists(st.booleans(), min_size=5, max_size=5), st.integers(0, 4))
def test_rule_independence(bits, flip):
    rules = ("R1", "R2", "R3", "R4", "R5")
    base = set(_case(*bits).rules)
    assert base == {r for r, b in zip(rules, bits) if b}
    toggled = list(bits)
    toggled[flip] = not toggled[flip]
    assert set(_case(*toggled).rules) ^ base == {rules[flip]}


def test_custom_port_set():
    cases, verdicts, locations = rule_matrix()
    _, flow, cls, dest, tag, _ = cases[2]  # port 8080
    rep = evaluate_anomaly_rules(flow, cls, dest, tag, verdicts, locations, AnomalyConfig(common_ports=frozenset({8080})))
    assert rep.rules == ()


def test_report_dict_names_rules():
    cases, verdicts, locations = rule_matrix()
    _, flow, cls, dest, tag, _ = cases[6]
    d = evaluate_anomaly_rules(flow, cls, dest, tag, verdicts, locations).as_dict()
    assert d["rule_names"] == ["uncommon-port", "no-fqdn", "non-web-protocol"]


# -- sensitive destinations -----------------------------------------------------------


@pytest.mark.parametrize(
    "fqdn,kind",
    [
        ("reemployct.dol.ct.gov", "government"),
        ("www.example.com", "none"),
        ("cs.university.edu.cn", "education"),
        ("mfa.gov.hu", "government"),
        ("www.mod.gov.uk", "government"),
        ("army.mil", "military"),
        ("www.mit.edu", "education"),
        ("gov.example.com", "none"),
        ("edu-portal.example.com", "none"),
    ],
)
def test_sensitive_classes(fqdn, kind):
    assert classify_sensitive(fqdn).kind == kind


@given(st.from_regex(r"[a-z]{1,8}(\.[a-z]{1,8}){0,3}\.(com|gov|edu|mil|cn|uk|hu|org)", fullmatch=True))
def test_sensitive_total_and_deterministic(fqdn):
    a, b = classify_sensitive(fqdn), classify_sensitive(fqdn)
    assert a == b
    assert a.kind in ("government", "military", "education", "none")


# -- threat intelligence ----------------------------------------------------------------


def test_address_types():
    assert address_type("192.0.2.1") == "ip"
    assert address_type("2001:db8::1") == "ip"
    assert address_type("a.example") == "fqdn"
    assert address_type("http://a.example/x") == "url"


def test_overall_malicious_if_any_provider_says_so():
    providers = [MockProvider("A"), MockProvider("B", malicious={"x.example"}), MockProvider("C")]
    v = query_threat_providers(["x.example", "y.example"], providers)
    assert [x.malicious for x in v] == [True, False]
    assert v[0].outcomes == {"A": CLEAN, "B": MALICIOUS, "C": CLEAN}


def test_failures_become_unknown_and_auth_disables(caplog):
    bad = MockProvider("Bad", reject_credentials=True)
    flaky = MockProvider("Flaky", failing={"a.example"})
    v = query_threat_providers(["a.example", "b.example"], [bad, flaky])
    assert v[0].outcomes == {"Bad": UNKNOWN_OUTCOME, "Flaky": UNKNOWN_OUTCOME}
    assert v[1].outcomes["Flaky"] == CLEAN
    assert bad.calls == 1  # disabled after the first rejection
    assert "disabling provider Bad" in caplog.text


def test_warm_cache_makes_no_calls(tmp_path):
    addrs = [f"198.51.100.{k}" for k in range(20)] + ["evil.example", "http://evil.example/x"]
    path = tmp_path / "cache.jsonl"
    clock = lambda: 1000.0
    p1 = MockProvider("P", malicious={"evil.example", "198.51.100.3"})
    first = query_threat_providers(addrs, [p1], VerdictCache(path), clock)
    assert p1.calls == len(addrs)
    p2 = MockProvider("P", malicious={"evil.example", "198.51.100.3"})
    second = query_threat_providers(addrs, [p2], VerdictCache(path), clock)
    assert p2.calls == 0
    assert [v.as_dict() for v in first] == [v.as_dict() for v in second]


def test_cache_ttl_and_unknowns_not_stored(tmp_path):
    path = tmp_path / "c.jsonl"
    query_threat_providers(["a.example", "b.example"], [MockProvider("P", unknown={"b.example"})], VerdictCache(path), lambda: 0.0)
    assert len(path.read_text().splitlines()) == 1
    cache = VerdictCache(path, ttl=10)
    assert cache.get("P", "a.example", 5.0) is not None
    assert cache.get("P", "a.example", 11.0) is None


def test_cache_latest_record_wins_and_skips_corrupt_lines(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(
        json.dumps({"provider": "P", "address": "a", "outcome": "clean", "queried_at": 1}) + "\n"
        + "{not json\n"
        + json.dumps({"provider": "P", "address": "a", "outcome": "malicious", "queried_at": 2}) + "\n"
    )
    assert VerdictCache(path).get("P", "a", 3)["outcome"] == "malicious"


def test_parallel_providers_match_serial():
    addrs = [f"198.51.100.{k}" for k in range(30)]
    mk = lambda: [MockProvider("A", malicious=addrs[:5]), MockProvider("B", malicious=addrs[3:9])]
    a = query_threat_providers(addrs, mk(), clock=lambda: 0.0, jobs=1)
    b = query_threat_providers(addrs, mk(), clock=lambda: 0.0, jobs=4)
    assert [v.as_dict() for v in a] == [v.as_dict() for v in b]


def test_table_reads_15_27_percent():
    # 68 and 1488 flagged IPs, 29 shared: 1527 of 10000 flagged overall
    ips = [f"10.{k // 65536}.{k // 256 % 256}.{k % 256}" for k in range(10000)]
    vt = set(ips[:68])
    xf = set(ips[39:39 + 1488])
    assert len(vt & xf) == 29
    providers = [MockProvider("VirusTotal", malicious=vt), MockProvider("IBM X-Force", malicious=xf), MockProvider("URLhaus", address_types=("fqdn", "url"))]
    verdicts = query_threat_providers(ips, providers, clock=lambda: 0.0)
    rows = dict(threat_table(verdicts, [p.name for p in providers]))
    assert format_pct(rows["All"]["ip"]) == "15.27%"
    assert format_pct(rows["VirusTotal"]["ip"]) == "0.68%"
    assert format_pct(rows["IBM X-Force"]["ip"]) == "14.88%"
    assert rows["URLhaus"]["ip"] is None
    buf = io.StringIO()
    write_threat_csv(list(rows.items()), buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "OTX Platform,IPs,Domains,URLs"
    assert lines[3] == "URLhaus,NA,0.00%,0.00%"


@pytest.mark.parametrize("v,s", [(15.27, "15.27%"), (0.0034, "0.0034%"), (0.0, "0.00%"), (None, "NA"), (100.0, "100.00%")])
def test_format_pct(v, s):
    assert format_pct(v) == s


def test_rate_limiter_waits_with_fake_clock():
    now = [0.0]
    slept = []

    def sleep(dt):
        slept.append(dt)
        now[0] += dt

    rl = RateLimiter(rate=2.0, clock=lambda: now[0], sleep=sleep)
    for _ in range(5):
        rl.acquire()
    assert now[0] == pytest.approx(2.0)
    assert all(s == pytest.approx(0.5) for s in slept)


# -- HTTP adapters against a mock transport --------------------------------------------


def _provider(cls, handler, **kw):
    return cls(cls.__name__, "secret", transport=httpx.MockTransport(handler), sleep=lambda s: None, rate_per_minute=6000, **kw)


def test_virustotal_adapter():
    seen = []

    def handler(req):
        seen.append(req)
        if req.url.path.endswith("/198.51.100.1"):
            return httpx.Response(200, json={"data": {"attributes": {"last_analysis_stats": {"malicious": 3}, "categories": {"x": "botnet"}}}})
        if req.url.path.endswith("/clean.example"):
            return httpx.Response(200, json={"data": {"attributes": {"last_analysis_stats": {"malicious": 0}}}})
        return httpx.Response(404)

    vt = _provider(VirusTotal, handler)
    assert vt.lookup("198.51.100.1", "ip").outcome == MALICIOUS
    assert vt.lookup("198.51.100.1", "ip").categories == ("botnet",)
    assert vt.lookup("clean.example", "fqdn").outcome == CLEAN
    assert vt.lookup("http://x.example/", "url").outcome == UNKNOWN_OUTCOME
    assert seen[0].headers["x-apikey"] == "secret"
    assert "/ip_addresses/" in seen[0].url.path


def test_xforce_threshold():
    scores = {"/api/ipr/192.0.2.1": 7, "/api/ipr/192.0.2.2": 6.9}

    def handler(req):
        return httpx.Response(200, json={"score": scores[req.url.path]})

    xf = _provider(XForce, handler)
    assert xf.lookup("192.0.2.1", "ip").outcome == MALICIOUS
    assert xf.lookup("192.0.2.2", "ip").outcome == CLEAN


def test_urlhaus_adapter_and_coverage():
    def handler(req):
        body = req.content.decode()
        if "bad" in body:
            return httpx.Response(200, json={"query_status": "ok", "threat": "malware_download"})
        return httpx.Response(200, json={"query_status": "no_results"})

    uh = _provider(URLhaus, handler)
    assert uh.lookup("bad.example", "fqdn") .outcome == MALICIOUS
    assert uh.lookup("http://fine.example/", "url").outcome == CLEAN
    assert not uh.supports("ip")
    v = query_threat_providers(["192.0.2.1"], [uh])
    assert v[0].outcomes["URLhaus"] == NA


def test_retry_on_server_errors_then_success():
    calls = []

    def handler(req):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(503 if len(calls) == 1 else 429)
        return httpx.Response(200, json={"score": 1})

    assert _provider(XForce, handler, retries=3).lookup("192.0.2.1", "ip").outcome == CLEAN
    assert len(calls) == 3


def test_retries_exhausted_and_transport_errors():
    def boom(req):
        raise httpx.ConnectError("down")

    with pytest.raises(ProviderError, match="giving up after 3 attempts"):
        _provider(XForce, boom, retries=2).lookup("192.0.2.1", "ip")


def test_auth_error():
    with pytest.raises(AuthError):
        _provider(VirusTotal, lambda req: httpx.Response(401)).lookup("192.0.2.1", "ip")


def test_build_providers_skips_missing_credentials(caplog):
    cfg = {"providers": [
        {"name": "VT", "kind": "virustotal", "credential_env": "VT_KEY"},
        {"name": "Mock", "kind": "mock", "malicious": ["a.example"]},
    ]}
    ps = build_providers(cfg, env={})
    assert [p.name for p in ps] == ["Mock"]
    assert "VT_KEY" in caplog.text
    ps = build_providers(cfg, env={"VT_KEY": "k"})
    assert [p.name for p in ps] == ["VT", "Mock"]
    with pytest.raises(ValueError, match="unknown provider kind"):
        build_providers({"providers": [{"name": "Z", "kind": "zzz"}]}, env={})

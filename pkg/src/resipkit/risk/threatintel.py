"""Threat-intelligence lookups: pluggable providers, rate limiting, verdict cache.

Real adapters speak the public REST APIs of VirusTotal (v3), IBM X-Force
Exchange and URLhaus. Credentials come from environment variables named in
the provider config; nothing secret is stored in config files or the cache.
"""

from __future__ import annotations

import base64
import csv
import ipaddress
import json
import logging
import os
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Callable, Iterable, Mapping

import httpx

log = logging.getLogger(__name__)

MALICIOUS = "malicious"
CLEAN = "clean"
UNKNOWN = "unknown"
NA = "na"  # provider does not cover this address type

IP = "ip"
FQDN = "fqdn"
URL = "url"
ADDRESS_TYPES = (IP, FQDN, URL)

DEFAULT_TTL = 30 * 24 * 3600.0


def address_type(address: str) -> str:
    if "://" in address:
        return URL
    try:
        ipaddress.ip_address(address)
        return IP
    except ValueError:
        return FQDN


class ProviderError(Exception):
    """Lookup failed; the outcome for this address is unknown."""


class AuthError(ProviderError):
    """Credential rejected; the provider should be disabled."""


@dataclass(frozen=True)
class ProviderResult:
    outcome: str
    categories: tuple[str, ...] = ()


@dataclass
class ThreatVerdict:
    address: str
    address_type: str
    outcomes: dict[str, str] = field(default_factory=dict)
    categories: list[str] = field(default_factory=list)
    queried_at: float = 0.0

    @property
    def malicious(self) -> bool:
        return any(o == MALICIOUS for o in self.outcomes.values())

    def as_dict(self, with_time: bool = True) -> dict:
        d = {
            "address": self.address,
            "address_type": self.address_type,
            "outcomes": dict(sorted(self.outcomes.items())),
            "categories": sorted(set(self.categories)),
            "malicious": self.malicious,
        }
        if with_time:
            d["queried_at"] = self.queried_at
        return d


class ThreatProvider(ABC):
    name: str
    address_types: frozenset[str] = frozenset(ADDRESS_TYPES)

    def supports(self, kind: str) -> bool:
        return kind in self.address_types

    @abstractmethod
    def lookup(self, address: str, kind: str) -> ProviderResult:
        ...


class MockProvider(ThreatProvider):
    """Offline provider answering from fixed sets; counts every lookup."""

    def __init__(
        self,
        name: str,
        malicious: Iterable[str] = (),
        unknown: Iterable[str] = (),
        failing: Iterable[str] = (),
        categories: Mapping[str, Iterable[str]] | None = None,
        address_types: Iterable[str] = ADDRESS_TYPES,
        reject_credentials: bool = False,
    ):
        self.name = name
        self.malicious = set(malicious)
        self.unknown = set(unknown)
        self.failing = set(failing)
        self.categories = {k: tuple(v) for k, v in (categories or {}).items()}
        self.address_types = frozenset(address_types)
        self.reject_credentials = reject_credentials
        self.calls = 0
        self._lock = threading.Lock()

    def lookup(self, address: str, kind: str) -> ProviderResult:
        with self._lock:
            self.calls += 1
        if self.reject_credentials:
            raise AuthError(f"{self.name}: credential rejected")
        if address in self.failing:
            raise ProviderError(f"{self.name}: simulated failure for {address}")
        if address in self.unknown:
            return ProviderResult(UNKNOWN)
        if address in self.malicious:
            return ProviderResult(MALICIOUS, self.categories.get(address, ()))
        return ProviderResult(CLEAN)


class RateLimiter:
    """Token bucket; ``rate`` tokens per second, up to ``burst`` banked."""

    def __init__(self, rate: float, burst: int = 1, clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate, self.burst = rate, burst
        self._clock, self._sleep = clock, sleep
        self._tokens = float(burst)
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            while True:
                now = self._clock()
                self._tokens = min(self.burst, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                self._sleep((1 - self._tokens) / self.rate)


class HttpProvider(ThreatProvider):
    default_endpoint = ""

    def __init__(
        self,
        name: str,
        credential: str,
        endpoint: str | None = None,
        rate_per_minute: float = 4.0,
        retries: int = 3,
        backoff: float = 1.0,
        timeout: float = 15.0,
        transport: httpx.BaseTransport | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.name = name
        self.credential = credential
        self.retries = retries
        self.backoff = backoff
        self._sleep = sleep
        self.limiter = RateLimiter(rate_per_minute / 60.0, clock=clock, sleep=sleep)
        self.client = httpx.Client(base_url=endpoint or self.default_endpoint, timeout=timeout, transport=transport, headers=self._headers())

    def _headers(self) -> dict[str, str]:
        return {}

    def _request(self, method: str, path: str, **kw) -> httpx.Response:
        last = "no attempt made"
        for attempt in range(self.retries + 1):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            self.limiter.acquire()
            try:
                resp = self.client.request(method, path, **kw)
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"{self.name}: HTTP {resp.status_code}")
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            return resp
        raise ProviderError(f"{self.name}: giving up after {self.retries + 1} attempts ({last})")

    def close(self) -> None:
        self.client.close()


class VirusTotal(HttpProvider):
    default_endpoint = "https://www.virustotal.com/api/v3"

    def _headers(self):
        return {"x-apikey": self.credential}

    def lookup(self, address: str, kind: str) -> ProviderResult:
        if kind == URL:
            ident = base64.urlsafe_b64encode(address.encode()).decode().rstrip("=")
            path = f"/urls/{ident}"
        else:
            path = f"/{'ip_addresses' if kind == IP else 'domains'}/{address}"
        resp = self._request("GET", path)
        if resp.status_code == 404:
            return ProviderResult(UNKNOWN)
        if resp.status_code != 200:
            raise ProviderError(f"{self.name}: HTTP {resp.status_code}")
        attrs = resp.json().get("data", {}).get("attributes", {})
        stats = attrs.get("last_analysis_stats", {})
        cats = tuple(sorted(set(attrs.get("categories", {}).values())))
        return ProviderResult(MALICIOUS if stats.get("malicious", 0) > 0 else CLEAN, cats)


class XForce(HttpProvider):
    """Risk score 1-10; scores at or above ``threshold`` count as malicious."""

    default_endpoint = "https://api.xforce.ibmcloud.com"
    threshold = 7.0

    def _headers(self):
        token = base64.b64encode(self.credential.encode()).decode()
        return {"Authorization": f"Basic {token}", "Accept": "application/json"}

    def lookup(self, address: str, kind: str) -> ProviderResult:
        path = f"/api/ipr/{address}" if kind == IP else f"/api/url/{httpx.URL(address).host if kind == URL else address}"
        resp = self._request("GET", path)
        if resp.status_code == 404:
            return ProviderResult(UNKNOWN)
        if resp.status_code != 200:
            raise ProviderError(f"{self.name}: HTTP {resp.status_code}")
        doc = resp.json()
        body = doc.get("result", doc)
        score = body.get("score")
        if score is None:
            return ProviderResult(UNKNOWN)
        cats = tuple(sorted(body.get("cats", {})))
        return ProviderResult(MALICIOUS if float(score) >= self.threshold else CLEAN, cats)


class URLhaus(HttpProvider):
    default_endpoint = "https://urlhaus-api.abuse.ch/v1"
    address_types = frozenset({FQDN, URL})

    def _headers(self):
        return {"Auth-Key": self.credential}

    def lookup(self, address: str, kind: str) -> ProviderResult:
        if kind == URL:
            resp = self._request("POST", "/url/", data={"url": address})
        else:
            resp = self._request("POST", "/host/", data={"host": address})
        if resp.status_code != 200:
            raise ProviderError(f"{self.name}: HTTP {resp.status_code}")
        doc = resp.json()
        status = doc.get("query_status")
        if status == "no_results":
            return ProviderResult(CLEAN)
        if status != "ok":
            return ProviderResult(UNKNOWN)
        threats = {doc.get("threat")} | {u.get("threat") for u in doc.get("urls", [])}
        return ProviderResult(MALICIOUS, tuple(sorted(t for t in threats if t)))


ADAPTERS = {"virustotal": VirusTotal, "xforce": XForce, "urlhaus": URLhaus}


def build_providers(config: dict, env: Mapping[str, str] | None = None, transport: httpx.BaseTransport | None = None) -> list[ThreatProvider]:
    """Providers from a config document; entries lacking credentials are skipped."""
    env = os.environ if env is None else env
    out: list[ThreatProvider] = []
    for entry in config.get("providers", []):
        kind = entry.get("kind", "").lower()
        name = entry.get("name", kind)
        if kind == "mock":
            out.append(
                MockProvider(
                    name,
                    malicious=entry.get("malicious", ()),
                    unknown=entry.get("unknown", ()),
                    categories=entry.get("categories"),
                    address_types=entry.get("address_types", ADDRESS_TYPES),
                )
            )
            continue
        if kind not in ADAPTERS:
            raise ValueError(f"unknown provider kind {kind!r} for {name}")
        var = entry.get("credential_env")
        credential = env.get(var) if var else None
        if not credential:
            log.warning("provider %s disabled: environment variable %s is not set", name, var)
            continue
        out.append(
            ADAPTERS[kind](
                name,
                credential,
                endpoint=entry.get("endpoint"),
                rate_per_minute=float(entry.get("rate_per_minute", 4)),
                transport=transport,
            )
        )
    return out


def load_provider_config(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


class VerdictCache:
    """Append-only JSONL store keyed by (provider, address).

    The newest record for a key wins on load. Unknown outcomes are never
    stored, so transient failures are retried on the next run.
    """

    def __init__(self, path: str | Path | None = None, ttl: float = DEFAULT_TTL):
        self.path = Path(path) if path else None
        self.ttl = ttl
        self._entries: dict[tuple[str, str], dict] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                        self._entries[(rec["provider"], rec["address"])] = rec
                    except (json.JSONDecodeError, KeyError):
                        log.warning("%s:%d: skipping corrupt cache line", self.path, lineno)

    def get(self, provider: str, address: str, now: float) -> dict | None:
        rec = self._entries.get((provider, address))
        if rec is None or now - rec["queried_at"] > self.ttl:
            return None
        return rec

    def put(self, provider: str, address: str, result: ProviderResult, now: float) -> None:
        if result.outcome not in (MALICIOUS, CLEAN):
            return
        rec = {"provider": provider, "address": address, "outcome": result.outcome, "categories": list(result.categories), "queried_at": now}
        with self._lock:
            self._entries[(provider, address)] = rec
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _query_one_provider(provider: ThreatProvider, addresses: list[tuple[str, str]], cache: VerdictCache, clock) -> dict[str, tuple[ProviderResult, float]]:
    out = {}
    disabled = False
    for addr, kind in addresses:
        now = clock()
        if not provider.supports(kind):
            out[addr] = (ProviderResult(NA), now)
            continue
        hit = cache.get(provider.name, addr, now)
        if hit is not None:
            out[addr] = (ProviderResult(hit["outcome"], tuple(hit.get("categories", ()))), hit["queried_at"])
            continue
        if disabled:
            out[addr] = (ProviderResult(UNKNOWN), now)
            continue
        try:
            result = provider.lookup(addr, kind)
        except AuthError as exc:
            log.warning("disabling provider %s: %s", provider.name, exc)
            disabled = True
            result = ProviderResult(UNKNOWN)
        except ProviderError as exc:
            log.info("lookup of %s failed: %s", addr, exc)
            result = ProviderResult(UNKNOWN)
        cache.put(provider.name, addr, result, now)
        out[addr] = (result, now)
    return out


def query_threat_providers(
    addresses: Iterable[str],
    providers: list[ThreatProvider],
    cache: VerdictCache | None = None,
    clock: Callable[[], float] = time.time,
    jobs: int = 1,
) -> list[ThreatVerdict]:
    """One verdict per distinct address, in first-seen order.

    Providers run concurrently when ``jobs > 1``; each provider walks its
    addresses serially behind its own rate limiter.
    """
    cache = cache or VerdictCache()
    unique = list(dict.fromkeys(a for a in addresses if a))
    typed = [(a, address_type(a)) for a in unique]
    if jobs > 1 and len(providers) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_provider = list(pool.map(lambda p: _query_one_provider(p, typed, cache, clock), providers))
    else:
        per_provider = [_query_one_provider(p, typed, cache, clock) for p in providers]
    verdicts = []
    for addr, kind in typed:
        v = ThreatVerdict(addr, kind)
        for p, results in zip(providers, per_provider):
            result, ts = results[addr]
            v.outcomes[p.name] = result.outcome
            v.categories.extend(result.categories)
            v.queried_at = max(v.queried_at, ts)
        verdicts.append(v)
    return verdicts


# -- aggregate table -------------------------------------------------------------

_COLUMNS = ((IP, "IPs"), (FQDN, "Domains"), (URL, "URLs"))


def threat_table(verdicts: list[ThreatVerdict], provider_names: list[str]) -> list[tuple[str, dict[str, float | None]]]:
    """Share of addresses flagged per provider and address type, plus an All row.

    A provider cell is None when the provider covers none of that type.
    """
    by_type = {k: [v for v in verdicts if v.address_type == k] for k, _ in _COLUMNS}
    rows = []
    for name in provider_names:
        cells: dict[str, float | None] = {}
        for kind, _ in _COLUMNS:
            group = by_type[kind]
            outcomes = [v.outcomes.get(name, UNKNOWN) for v in group]
            if outcomes and all(o == NA for o in outcomes):
                cells[kind] = None
            else:
                flagged = sum(o == MALICIOUS for o in outcomes)
                cells[kind] = 100.0 * flagged / len(group) if group else 0.0
        rows.append((name, cells))
    all_cells = {}
    for kind, _ in _COLUMNS:
        group = by_type[kind]
        all_cells[kind] = 100.0 * sum(v.malicious for v in group) / len(group) if group else 0.0
    rows.append(("All", all_cells))
    return rows


def format_pct(value: float | None) -> str:
    if value is None:
        return "NA"
    text = f"{value:.4f}".rstrip("0")
    whole, _, frac = text.partition(".")
    return f"{whole}.{frac.ljust(2, '0')}%"


def write_threat_csv(rows, fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["OTX Platform", *(label for _, label in _COLUMNS)])
    for name, cells in rows:
        w.writerow([name, *(format_pct(cells[k]) for k, _ in _COLUMNS)])

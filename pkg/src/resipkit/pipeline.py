"""End-to-end analysis run over one or more captures.

Stages run in the order ingest, destinations, triage, then risk, mail and
features (which are independent and may run concurrently), then report.
Every stage fetches its inputs through :class:`RunContext`, which records the
dependency, and registers every file it writes. ``manifest.json`` lists each
artifact with its SHA-256 digest and each stage with the artifacts it read
and produced. It holds no timestamps or absolute paths, so identical inputs
and seed give an identical manifest.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from . import appid, capture, features, triage
from .mail import report as mail_report
from .mail import retrieval, smtp, templates
from .risk import anomaly, sensitive, threatintel

log = logging.getLogger(__name__)

CAPTURE_SUFFIXES = (".pcap", ".pcapng", ".cap")
MANIFEST_VERSION = 1


class ConfigError(Exception):
    """Invalid or missing configuration; maps to exit status 2."""


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage} failed: {message}")
        self.stage = stage


@dataclass(frozen=True)
class CaptureInput:
    path: Path
    location: str | None = None

    @classmethod
    def parse(cls, text: str) -> "CaptureInput":
        """``path`` or ``LOCATION=path`` (e.g. ``CN=captures/cn``)."""
        loc, sep, rest = text.partition("=")
        if sep and loc and loc.isalnum() and len(loc) <= 8:
            return cls(Path(rest), loc.upper())
        return cls(Path(text))


@dataclass
class PipelineConfig:
    inputs: list[CaptureInput]
    output_dir: Path
    signatures: Path | None = None
    feature_config: features.FeatureConfig = field(default_factory=features.FeatureConfig)
    common_ports: frozenset[int] = anomaly.DEFAULT_COMMON_PORTS
    providers: Path | None = None
    verdict_cache: Path | None = None
    templates: Path | None = None
    failure_rules: Path | None = None
    seed: int = 0
    jobs: int = 1
    idle_timeout: float = 300.0
    feature_target: str = triage.RELAYED
    locations: tuple[str, ...] = anomaly.DEFAULT_LOCATIONS

    def validate(self) -> None:
        for inp in self.inputs:
            if not inp.path.exists():
                raise ConfigError(f"input not found: {inp.path}")
        for name in ("signatures", "providers", "templates", "failure_rules"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{name} file not found: {p}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.feature_target not in (triage.RELAYED, triage.TUNNEL):
            raise ConfigError(f"feature target must be relayed or tunnel, got {self.feature_target}")
        if self.idle_timeout <= 0:
            raise ConfigError("idle timeout must be positive")

    def fingerprint(self) -> dict:
        """Settings that shape outputs, without machine-specific paths."""
        return {
            "feature_config": self.feature_config.as_dict(),
            "common_ports": sorted(self.common_ports),
            "seed": self.seed,
            "idle_timeout": self.idle_timeout,
            "feature_target": self.feature_target,
            "locations": list(self.locations),
        }


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class RunContext:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = cfg.output_dir
        self._values: dict[str, Any] = {}
        self._producer: dict[str, str] = {}
        self.stages: dict[str, dict[str, list[str]]] = {}
        self.artifacts: dict[str, str] = {}
        self.inputs: dict[str, str] = {}
        self.counters: Counter = Counter()
        self._lock = threading.Lock()

    def _stage(self, stage: str) -> dict[str, list[str]]:
        return self.stages.setdefault(stage, {"inputs": [], "outputs": []})

    def declare_input(self, stage: str, name: str, path: Path) -> None:
        with self._lock:
            self.inputs[name] = _sha256(path)
            self._stage(stage)["inputs"].append(f"input:{name}")

    def put(self, stage: str, name: str, value: Any) -> None:
        with self._lock:
            self._values[name] = value
            self._producer[name] = stage

    def get(self, stage: str, name: str) -> Any:
        with self._lock:
            if name not in self._values:
                raise StageError(stage, f"{name} has not been produced by an earlier stage")
            ref = f"{self._producer[name]}:{name}"
            if ref not in self._stage(stage)["inputs"]:
                self._stage(stage)["inputs"].append(ref)
            return self._values[name]

    def path(self, name: str) -> Path:
        return self.out / name

    def wrote(self, stage: str, name: str) -> None:
        with self._lock:
            self.artifacts[name] = _sha256(self.path(name))
            self._stage(stage)["outputs"].append(name)

    def count(self, key: str, n: int = 1) -> None:
        with self._lock:
            self.counters[key] += n

    def write_json(self, stage: str, name: str, doc: Any) -> None:
        self.path(name).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        self.wrote(stage, name)

    def write_jsonl(self, stage: str, name: str, rows) -> None:
        with open(self.path(name), "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        self.wrote(stage, name)

    def map(self, fn: Callable, items: list) -> list:
        if self.cfg.jobs > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.jobs) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]


@dataclass
class FlowRecord:
    flow: capture.Flow
    location: str | None
    tag: appid.ProtocolTag | None = None
    dest: appid.DestinationRecord | None = None
    verdict: triage.FlowClass | None = None


def expand_inputs(inputs: list[CaptureInput]) -> list[CaptureInput]:
    out = []
    for inp in inputs:
        if inp.path.is_dir():
            files = sorted(p for p in inp.path.iterdir() if p.suffix.lower() in CAPTURE_SUFFIXES)
            out += [CaptureInput(p, inp.location) for p in files]
        else:
            out.append(inp)
    return out


# -- stages ----------------------------------------------------------------------


def stage_ingest(ctx: RunContext) -> None:
    S = "ingest"
    cfg = capture.AssemblyConfig(idle_timeout=ctx.cfg.idle_timeout)
    records: list[FlowRecord] = []
    dns = capture.DnsMap()
    stats = capture.IngestStats()
    files = expand_inputs(ctx.cfg.inputs)
    names = Counter(f.path.name for f in files)
    for inp in files:
        label = inp.path.name if names[inp.path.name] == 1 else str(inp.path)
        ctx.declare_input(S, f"{inp.location + '/' if inp.location else ''}{label}", inp.path)
        try:
            result = capture.read_capture(inp.path, cfg)
        except (ValueError, OSError) as exc:
            raise StageError(S, f"{inp.path}: {exc}") from exc
        stats.merge(result.stats)
        dns.merge(result.dns)
        records += [FlowRecord(f, inp.location) for f in result.flows]
    records.sort(key=lambda r: (r.flow.first_ts, str(r.flow.key), r.location or ""))
    ctx.put(S, "flows", records)
    ctx.put(S, "dns", dns)
    ctx.write_jsonl(S, "flows.jsonl", ({**r.flow.summary(), "location": r.location} for r in records))
    ctx.write_json(S, "dns.json", dns.as_dict())
    ctx.write_json(S, "ingest_stats.json", {**stats.as_dict(), "captures": len(files), "flows": len(records)})


def stage_destinations(ctx: RunContext) -> None:
    S = "destinations"
    records: list[FlowRecord] = ctx.get(S, "flows")
    dns = ctx.get(S, "dns")

    def work(r: FlowRecord):
        tag = appid.identify_protocol(r.flow)
        return tag, appid.extract_destination(r.flow, tag, dns)

    for r, (tag, dest) in zip(records, ctx.map(work, records)):
        r.tag, r.dest = tag, dest
    ctx.put(S, "destinations", records)
    ctx.write_jsonl(S, "destinations.jsonl", (_flow_row(r) for r in records))


def _flow_row(r: FlowRecord) -> dict:
    row = {
        "flow_id": r.flow.flow_id,
        "dst_ip": r.flow.key.dst_ip,
        "dst_port": r.flow.key.dst_port,
        "transport": r.flow.key.transport,
        "first_ts": r.flow.first_ts,
        "bytes_up": r.flow.bytes_up,
        "bytes_down": r.flow.bytes_down,
        "location": r.location,
    }
    if r.tag:
        row.update(protocol=r.tag.protocol, protocol_evidence=r.tag.evidence)
    if r.dest:
        row.update(fqdn=r.dest.fqdn, fqdn_source=r.dest.fqdn_source, url=r.dest.url, apex_domain=r.dest.apex_domain)
    if r.verdict:
        row.update(r.verdict.as_dict())
    return row


def stage_triage(ctx: RunContext) -> None:
    S = "triage"
    sig_path = ctx.cfg.signatures
    if sig_path is not None:
        ctx.declare_input(S, f"signatures/{Path(sig_path).name}", Path(sig_path))
    try:
        sigs = triage.load_signatures(sig_path)
    except (ValueError, KeyError) as exc:
        raise StageError(S, f"bad signature file: {exc}") from exc
    records: list[FlowRecord] = ctx.get(S, "destinations")
    verdicts = ctx.map(lambda r: triage.classify_flow(r.flow, r.dest, sigs), records)
    summary: Counter = Counter()
    for r, v in zip(records, verdicts):
        r.verdict = v
        summary[f"{v.kind}:{v.provider or '-'}"] += 1
        if v.conflicts:
            ctx.count("triage.conflicting_signatures")
    ctx.put(S, "classified", records)
    ctx.write_jsonl(S, "triage.jsonl", (_flow_row(r) for r in records))
    ctx.write_json(S, "triage_summary.json", dict(sorted(summary.items())))


def _relayed(records: list[FlowRecord]) -> list[FlowRecord]:
    return [r for r in records if r.verdict.kind == triage.RELAYED]


def stage_risk(ctx: RunContext) -> None:
    S = "risk"
    records = _relayed(ctx.get(S, "classified"))
    addresses = []
    for r in records:
        addresses += [a for a in (r.dest.ip, r.dest.fqdn, r.dest.url) if a]

    providers: list[threatintel.ThreatProvider] = []
    if ctx.cfg.providers is not None:
        ctx.declare_input(S, f"providers/{ctx.cfg.providers.name}", ctx.cfg.providers)
        try:
            providers = threatintel.build_providers(threatintel.load_provider_config(ctx.cfg.providers))
        except (ValueError, KeyError) as exc:
            raise StageError(S, f"bad provider config: {exc}") from exc
    verdicts = None
    names = [p.name for p in providers]
    verdict_list: list[threatintel.ThreatVerdict] = []
    if providers:
        cache = threatintel.VerdictCache(ctx.cfg.verdict_cache)
        verdict_list = threatintel.query_threat_providers(addresses, providers, cache, jobs=ctx.cfg.jobs)
        verdicts = {v.address: v for v in verdict_list}
        for v in verdict_list:
            for outcome in v.outcomes.values():
                if outcome == threatintel.UNKNOWN:
                    ctx.count("risk.unknown_provider_outcomes")

    index = None
    if any(r.location for r in records):
        index = anomaly.LocationIndex(ctx.cfg.locations)
        for r in records:
            if r.location:
                index.observe_destination(r.dest, r.location)

    acfg = anomaly.AnomalyConfig(common_ports=frozenset(ctx.cfg.common_ports))
    reports = [anomaly.evaluate_anomaly_rules(r.flow, r.verdict, r.dest, r.tag, verdicts, index, acfg) for r in records]
    ctx.write_jsonl(S, "anomalies.jsonl", (rep.as_dict() for rep in reports))
    rule_counts = Counter(rule for rep in reports for rule in rep.rules)
    ctx.write_json(S, "anomaly_summary.json", {
        "relayed_flows": len(records),
        "flagged_flows": sum(rep.flagged for rep in reports),
        "rules": {rule: rule_counts.get(rule, 0) for rule in anomaly.RULES},
        "not_evaluated": sorted({rule for rep in reports for rule in rep.not_evaluated}),
    })

    sens_rows = []
    for r in records:
        if r.dest.fqdn:
            sc = sensitive.classify_sensitive(r.dest.fqdn)
            if sc.sensitive:
                sens_rows.append({"flow_id": r.flow.flow_id, "fqdn": sc.fqdn, "class": sc.kind})
    ctx.write_jsonl(S, "sensitive.jsonl", sens_rows)
    ctx.write_jsonl(S, "threat_verdicts.jsonl", (v.as_dict(with_time=False) for v in verdict_list))
    with open(ctx.path("threat_summary.csv"), "w", encoding="utf-8") as fh:
        threatintel.write_threat_csv(threatintel.threat_table(verdict_list, names), fh)
    ctx.wrote(S, "threat_summary.csv")


def stage_mail(ctx: RunContext) -> None:
    S = "mail"
    for key, p in (("templates", ctx.cfg.templates), ("failure_rules", ctx.cfg.failure_rules)):
        if p is not None:
            ctx.declare_input(S, f"{key}/{Path(p).name}", Path(p))
    try:
        tmpl = templates.load_templates(ctx.cfg.templates)
        rules = smtp.load_failure_rules(ctx.cfg.failure_rules)
    except (ValueError, KeyError) as exc:
        raise StageError(S, str(exc)) from exc
    records = _relayed(ctx.get(S, "classified"))
    sessions, retrievals, dropped = [], [], 0
    for r in records:
        proto = r.tag.protocol
        try:
            if proto == appid.SMTP and r.flow.key.transport == capture.TCP:
                s = smtp.parse_smtp_session(r.flow, rules)
                sessions.append(s)
            elif proto in (appid.IMAP, appid.POP3):
                m = retrieval.parse_mail_retrieval(r.flow, proto)
                if m is None:
                    dropped += 1
                else:
                    retrievals.append(m)
        except (ValueError, IndexError, UnicodeError) as exc:
            log.warning("mail parse failed for %s: %s", r.flow.flow_id, exc)
            ctx.count("mail.parse_errors")
    ctx.count("mail.retrieval_dropped", dropped)
    rep = mail_report.spam_report(sessions, tmpl)
    ctx.write_jsonl(S, "smtp_sessions.jsonl", (s.summary() for s in sessions))
    ctx.write_json(S, "spam_report.json", rep.as_dict())
    with open(ctx.path("spam_categories.csv"), "w", encoding="utf-8") as fh:
        mail_report.write_spam_csv(rep, fh)
    ctx.wrote(S, "spam_categories.csv")
    with open(ctx.path("spam_templates.csv"), "w", encoding="utf-8") as fh:
        mail_report.write_template_csv(rep, fh)
    ctx.wrote(S, "spam_templates.csv")
    ctx.write_jsonl(S, "retrieval_sessions.jsonl", (m.as_dict() for m in retrievals))
    ctx.write_json(S, "retrieval_report.json", retrieval.retrieval_report(retrievals, dropped))


def stage_features(ctx: RunContext) -> None:
    S = "features"
    cfg = ctx.cfg.feature_config
    records = [r for r in ctx.get(S, "classified") if r.verdict.kind in (triage.RELAYED, triage.TUNNEL)]
    usable = [r for r in records if r.flow.fp_up + r.flow.fp_down > 0]
    ctx.count("features.skipped_no_payload", len(records) - len(usable))
    vectors = ctx.map(lambda r: features.extract_features(r.flow, cfg), usable)
    rows = [(r.flow.flow_id, fv, int(r.verdict.kind == ctx.cfg.feature_target)) for r, fv in zip(usable, vectors)]
    with open(ctx.path("features.csv"), "w", encoding="utf-8") as fh:
        features.write_feature_csv(rows, fh, cfg)
    ctx.wrote(S, "features.csv")


def stage_report(ctx: RunContext) -> None:
    S = "report"
    records = ctx.get(S, "classified")
    relayed = _relayed(records)
    rows = appid.protocol_mix_report((r.flow, r.tag) for r in relayed)
    with open(ctx.path("protocol_mix.csv"), "w", encoding="utf-8") as fh:
        appid.write_mix_csv(rows, fh)
    ctx.wrote(S, "protocol_mix.csv")
    by_class = Counter(r.verdict.kind for r in records)
    apexes = sorted({r.dest.apex_domain for r in relayed if r.dest.apex_domain})
    ctx.write_json(S, "summary.json", {
        "flows": len(records),
        "classes": {k: by_class.get(k, 0) for k in triage.CLASSES},
        "relayed_destinations": {
            "ips": len({r.dest.ip for r in relayed}),
            "fqdns": len({r.dest.fqdn for r in relayed if r.dest.fqdn}),
            "apex_domains": len(apexes),
            "urls": len({r.dest.url for r in relayed if r.dest.url}),
        },
        "counters": dict(sorted(ctx.counters.items())),
    })


PARALLEL_STAGES = (("risk", stage_risk), ("mail", stage_mail), ("features", stage_features))


@dataclass
class RunResult:
    status: int
    output_dir: Path
    manifest: dict | None = None
    error: str | None = None


STAGE_DEPS = {
    "ingest": (),
    "destinations": ("ingest",),
    "triage": ("destinations",),
    "risk": ("triage",),
    "mail": ("triage",),
    "features": ("triage",),
    "report": ("triage",),
}
STAGE_FUNCS = {
    "ingest": stage_ingest,
    "destinations": stage_destinations,
    "triage": stage_triage,
    "risk": stage_risk,
    "mail": stage_mail,
    "features": stage_features,
    "report": stage_report,
}


def _closure(targets) -> set[str]:
    need, stack = set(), list(targets)
    while stack:
        st = stack.pop()
        if st not in need:
            need.add(st)
            stack += STAGE_DEPS[st]
    return need


def run_pipeline(cfg: PipelineConfig, stages: list[str] | None = None) -> RunResult:
    """Run ``stages`` (default: all) plus whatever they depend on."""
    try:
        cfg.validate()
        unknown = [s for s in stages or () if s not in STAGE_DEPS]
        if unknown:
            raise ConfigError(f"unknown stage(s): {', '.join(unknown)}")
    except ConfigError as exc:
        return RunResult(2, cfg.output_dir, error=str(exc))
    need = _closure(stages or STAGE_ORDER)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(cfg)
    try:
        for name in ("ingest", "destinations", "triage"):
            if name in need:
                _run_stage(ctx, name, STAGE_FUNCS[name])
        parallel = [n for n, _ in PARALLEL_STAGES if n in need]
        if cfg.jobs > 1 and len(parallel) > 1:
            with ThreadPoolExecutor(max_workers=len(parallel)) as pool:
                futures = [pool.submit(_run_stage, ctx, n, STAGE_FUNCS[n]) for n in parallel]
                for fut in futures:
                    fut.result()
        else:
            for n in parallel:
                _run_stage(ctx, n, STAGE_FUNCS[n])
        if "report" in need:
            _run_stage(ctx, "report", stage_report)
    except StageError as exc:
        log.error("%s", exc)
        return RunResult(1, cfg.output_dir, error=str(exc))
    manifest = build_manifest(ctx)
    (cfg.output_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return RunResult(0, cfg.output_dir, manifest)


def _run_stage(ctx: RunContext, name: str, fn: Callable[[RunContext], None]) -> None:
    log.info("stage %s", name)
    ctx._stage(name)
    try:
        fn(ctx)
    except StageError:
        raise
    except Exception as exc:  # any unexpected failure is fatal for the run
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


STAGE_ORDER = ("ingest", "destinations", "triage", "risk", "mail", "features", "report")


def build_manifest(ctx: RunContext) -> dict:
    stages = []
    for name in STAGE_ORDER:
        if name not in ctx.stages:
            continue
        entry = ctx.stages[name]
        stages.append({"name": name, "inputs": sorted(entry["inputs"]), "outputs": sorted(entry["outputs"])})
    return {
        "format": "resipkit-run",
        "version": MANIFEST_VERSION,
        "config": ctx.cfg.fingerprint(),
        "inputs": dict(sorted(ctx.inputs.items())),
        "artifacts": dict(sorted(ctx.artifacts.items())),
        "stages": stages,
    }


def check_stage_isolation(manifest: dict) -> list[str]:
    """Problems found in the manifest's dependency list; empty when clean."""
    problems = []
    earlier: set[str] = set()
    for st in manifest["stages"]:
        for ref in st["inputs"]:
            producer, _, _ = ref.partition(":")
            if producer != "input" and producer not in earlier:
                problems.append(f"{st['name']} reads {ref} before {producer} ran")
        earlier.add(st["name"])
    return problems


def default_jobs() -> int:
    return os.cpu_count() or 1

import hashlib
import json
import shutil

import pytest

from resipkit.pipeline import (
    STAGE_ORDER,
    CaptureInput,
    PipelineConfig,
    check_stage_isolation,
    run_pipeline,
)

ALL_ARTIFACTS = {
    "flows.jsonl", "dns.json", "ingest_stats.json", "destinations.jsonl", "triage.jsonl", "triage_summary.json",
    "anomalies.jsonl", "anomaly_summary.json", "sensitive.jsonl", "threat_verdicts.jsonl", "threat_summary.csv",
    "smtp_sessions.jsonl", "spam_report.json", "spam_categories.csv", "spam_templates.csv",
    "retrieval_sessions.jsonl", "retrieval_report.json", "features.csv", "protocol_mix.csv", "summary.json",
}


def run(tmp_path, inputs, name="run", **kw):
    cfg = PipelineConfig([CaptureInput.parse(str(i)) for i in inputs], tmp_path / name, **kw)
    return run_pipeline(cfg, kw.pop("stages", None) if "stages" in kw else None)


def test_demo_run_writes_every_artifact(tmp_path, demo_pcap):
    res = run(tmp_path, [demo_pcap])
    assert res.status == 0, res.error
    assert set(res.manifest["artifacts"]) == ALL_ARTIFACTS
    for name, digest in res.manifest["artifacts"].items():
        assert hashlib.sha256((res.output_dir / name).read_bytes()).hexdigest() == digest
    assert [s["name"] for s in res.manifest["stages"]] == list(STAGE_ORDER)
    assert check_stage_isolation(res.manifest) == []
    summary = json.loads((res.output_dir / "summary.json").read_text())
    assert summary["classes"] == {"control": 3, "relayed": 16, "tunnel": 2}


def test_manifest_is_portable(tmp_path, demo_pcap):
    res = run(tmp_path, [demo_pcap])
    text = (res.output_dir / "manifest.json").read_text()
    assert str(tmp_path) not in text
    assert json.loads(text) == res.manifest


def test_identical_runs_and_jobs_agree(tmp_path, demo_pcap):
    a = run(tmp_path, [demo_pcap], "a", jobs=1)
    b = run(tmp_path, [demo_pcap], "b", jobs=4)
    assert (a.output_dir / "manifest.json").read_bytes() == (b.output_dir / "manifest.json").read_bytes()


def test_empty_capture_directory(tmp_path):
    (tmp_path / "empty").mkdir()
    res = run(tmp_path, [tmp_path / "empty"])
    assert res.status == 0
    summary = json.loads((res.output_dir / "summary.json").read_text())
    assert summary["flows"] == 0
    assert (res.output_dir / "features.csv").read_text().startswith("flow_id,label,")


def test_config_errors_exit_2(tmp_path, demo_pcap):
    assert run(tmp_path, [tmp_path / "nope.pcap"]).status == 2
    assert run(tmp_path, [demo_pcap], templates=tmp_path / "missing.txt").status == 2
    assert run(tmp_path, [demo_pcap], jobs=0).status == 2
    cfg = PipelineConfig([CaptureInput(demo_pcap)], tmp_path / "x")
    assert run_pipeline(cfg, ["bogus"]).status == 2


def test_stage_failure_exits_1_naming_stage(tmp_path, demo_pcap):
    bad = tmp_path / "sigs.json"
    bad.write_text("{not json")
    res = run(tmp_path, [demo_pcap], signatures=bad)
    assert res.status == 1
    assert "triage" in res.error


def test_corrupt_capture_is_fatal_for_ingest(tmp_path):
    junk = tmp_path / "junk.pcap"
    junk.write_bytes(b"this is not a capture file at all")
    res = run(tmp_path, [junk])
    assert res.status == 1 and "ingest" in res.error


def test_stage_subset_runs_dependencies_only(tmp_path, demo_pcap):
    cfg = PipelineConfig([CaptureInput(demo_pcap)], tmp_path / "sub")
    res = run_pipeline(cfg, ["features"])
    assert res.status == 0
    assert [s["name"] for s in res.manifest["stages"]] == ["ingest", "destinations", "triage", "features"]
    assert "features.csv" in res.manifest["artifacts"] and "summary.json" not in res.manifest["artifacts"]


def test_two_locations_enable_r5(tmp_path, demo_pcap):
    us = tmp_path / "us.pcap"
    shutil.copy(demo_pcap, us)
    res = run(tmp_path, [f"CN={demo_pcap}", f"US={us}"])
    assert res.status == 0
    summary = json.loads((res.output_dir / "anomaly_summary.json").read_text())
    assert summary["not_evaluated"] == ["R1"]  # no providers configured
    assert summary["rules"]["R5"] == 0  # every destination appears in both captures


def test_no_secrets_or_bodies_in_outputs(tmp_path, demo_pcap):
    res = run(tmp_path, [demo_pcap])
    for name in res.manifest["artifacts"]:
        text = (res.output_dir / name).read_text(encoding="utf-8").lower()
        for secret in ("hunter2", "wrong pass", "password is", "i have attached"):
            assert secret not in text, (name, secret)


def test_providers_feed_threat_table(tmp_path, demo_pcap):
    from importlib import resources

    with resources.as_file(resources.files("resipkit").joinpath("data/demo_providers.json")) as prov:
        res = run(tmp_path, [demo_pcap], providers=prov, verdict_cache=tmp_path / "cache.jsonl")
    assert res.status == 0
    rows = (res.output_dir / "threat_summary.csv").read_text().splitlines()
    assert rows[0] == "OTX Platform,IPs,Domains,URLs"
    assert rows[-1].startswith("All,")
    assert (tmp_path / "cache.jsonl").exists()


def test_bundled_demo_matches_generator(bundled_demo, demo_pcap):
    assert bundled_demo.read_bytes() == demo_pcap.read_bytes()


def test_isolation_checker_flags_out_of_order_reads():
    manifest = {"stages": [{"name": "triage", "inputs": ["destinations:records"], "outputs": []}]}
    assert check_stage_isolation(manifest) == ["triage reads destinations:records before destinations ran"]


@pytest.mark.parametrize("text,loc", [("CN=a.pcap", "CN"), ("a=b.pcap", "A"), ("my dir=x.pcap", None), ("plain.pcap", None)])
def test_capture_input_parse(text, loc):
    assert CaptureInput.parse(text).location == loc

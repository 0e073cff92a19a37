"""Command-line entry point: ``resipkit <subcommand> ...``.

Exit status is 0 on success, 1 when a stage fails, 2 for configuration
errors (bad flags, missing files).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import correlate, features, forest, pipeline
from .pipeline import CaptureInput, ConfigError, PipelineConfig

log = logging.getLogger("resipkit")

EXIT_OK, EXIT_FATAL, EXIT_CONFIG = 0, 1, 2


def _ports(text: str) -> frozenset[int]:
    try:
        ports = frozenset(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad port list {text!r}") from None
    if any(not 0 <= p <= 65535 for p in ports):
        raise argparse.ArgumentTypeError("ports must be in 0-65535")
    return ports


def _cap(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not (v == 0 or (v >= 2 and v & (v - 1) == 0)):
        raise argparse.ArgumentTypeError(f"{v} is neither 0 nor a power of two >= 2")
    return v


def _capture_args(p: argparse.ArgumentParser, out_default: str = "run") -> None:
    p.add_argument("inputs", nargs="*", help="capture files or directories; prefix LOC= to tag a capture location (e.g. CN=cn.pcap)")
    p.add_argument("-o", "--out", default=out_default, help="output directory (default: %(default)s)")
    p.add_argument("--idle-timeout", type=float, default=300.0, help="seconds of silence that split a flow")
    p.add_argument("--signatures", type=Path, help="provider signature JSON (default: bundled)")
    p.add_argument("--jobs", type=int, default=pipeline.default_jobs(), help="worker threads (default: logical cores)")
    p.add_argument("--seed", type=int, default=0)


def _feature_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--nup", type=_cap, default=8)
    p.add_argument("--ndown", type=_cap, default=8)
    p.add_argument("--nall", type=_cap, default=8)
    p.add_argument("--target", choices=("relayed", "tunnel"), default="relayed", help="class labelled 1 in features.csv")


def _risk_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ports", type=_ports, help="comma-separated common ports for rule R2")
    p.add_argument("--providers", type=Path, help="threat provider config JSON")
    p.add_argument("--verdict-cache", type=Path, help="JSONL verdict cache file")
    p.add_argument("--locations", default="CN,US", help="locations a destination must be seen from (rule R5)")


def _mail_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--templates", type=Path, help="spam template file (default: bundled)")
    p.add_argument("--failure-rules", type=Path, help="delivery failure keyword rules JSON (default: bundled)")


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig(
        inputs=[CaptureInput.parse(t) for t in args.inputs],
        output_dir=Path(args.out),
        signatures=args.signatures,
        seed=args.seed,
        jobs=args.jobs,
        idle_timeout=args.idle_timeout,
    )
    if hasattr(args, "nup"):
        try:
            cfg.feature_config = features.FeatureConfig(args.nup, args.ndown, args.nall)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        cfg.feature_target = args.target
    if hasattr(args, "providers"):
        cfg.providers = args.providers
        cfg.verdict_cache = args.verdict_cache
        if args.ports is not None:
            cfg.common_ports = args.ports
        cfg.locations = tuple(loc.strip().upper() for loc in args.locations.split(",") if loc.strip())
    if hasattr(args, "templates"):
        cfg.templates = args.templates
        cfg.failure_rules = args.failure_rules
    return cfg


def _run(args, stages: list[str] | None) -> int:
    try:
        cfg = _config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    result = pipeline.run_pipeline(cfg, stages)
    if result.status != EXIT_OK:
        print(f"error: {result.error}", file=sys.stderr)
        return result.status
    outputs = sorted(result.manifest["artifacts"])
    print(f"wrote {len(outputs)} artifacts to {result.output_dir}")
    return EXIT_OK


def cmd_stage(stage: str | None):
    return lambda args: _run(args, [stage] if stage else None)


def cmd_demo(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = resources.files("resipkit").joinpath("data")
    with resources.as_file(data.joinpath("demo.pcap")) as pcap, resources.as_file(data.joinpath("demo_providers.json")) as prov:
        args.inputs = [str(pcap)]
        args.providers = prov
        return _run(args, None)


def cmd_train(args) -> int:
    try:
        with open(args.features, encoding="utf-8") as fh:
            fm = features.read_feature_csv(fh)
        hp = forest.Hyperparameters(args.trees, args.max_depth, args.max_features, args.min_leaf, args.seed)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if fm.y is None:
        print("error: training needs a label on every row", file=sys.stderr)
        return EXIT_CONFIG
    X, y = fm.X, fm.y
    eval_X = eval_y = None
    if args.holdout > 0:
        rng = np.random.default_rng(args.seed)
        idx = rng.permutation(len(y))
        k = int(round(len(y) * args.holdout))
        eval_X, eval_y = X[idx[:k]], y[idx[:k]]
        X, y = X[idx[k:]], y[idx[k:]]
    try:
        model = forest.train(forest.TrainingSet(X, y, fm.names, fm.config), hp, jobs=args.jobs)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    model.save(args.model)
    print(f"trained {hp.n_trees} trees on {len(y)} rows ({fm.config}) -> {args.model}")
    print(forest.render_importance(forest.feature_importance(model), args.top))
    if eval_X is not None and len(eval_y):
        rep = forest.evaluate(model, eval_X, eval_y)
        print(json.dumps(rep.as_dict(), sort_keys=True))
    return EXIT_OK


def cmd_predict(args) -> int:
    try:
        model = forest.TreeEnsemble.load(args.model)
        with open(args.features, encoding="utf-8") as fh:
            fm = features.read_feature_csv(fh)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if model.config is not None and fm.config != model.config:
        print(f"error: features extracted under ({fm.config}) but model expects ({model.config})", file=sys.stderr)
        return EXIT_CONFIG
    labels = model.predict_labels(fm.X) if len(fm.X) else np.zeros(0, dtype=int)
    probs = model.predict_proba(fm.X) if len(fm.X) else np.zeros(0)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["flow_id", "label", "probability"])
        for fid, lab, pr in zip(fm.ids, labels, probs):
            w.writerow([fid, int(lab), f"{pr:.4f}"])
    finally:
        if out is not sys.stdout:
            out.close()
    if fm.y is not None and len(fm.y):
        print(json.dumps(forest.evaluate(model, fm.X, fm.y).as_dict(), sort_keys=True), file=sys.stderr)
    return EXIT_OK


def cmd_correlate(args) -> int:
    try:
        with open(args.probes, encoding="utf-8") as fh:
            probes = correlate.read_probe_log(fh)
        with open(args.flows, encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    # triage.jsonl carries a class column; only relayed flows take part
    flows = [correlate.FlowSummary.from_dict(r) for r in rows if r.get("class", "relayed") == "relayed"]
    try:
        res = correlate.correlate_probes(probes, flows, args.dt, args.db)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    doc = {
        "matches": [m.as_dict() for m in res.matches],
        "unmatched_probes": res.unmatched_probes,
        "unmatched_flows": len(res.unmatched_flows),
    }
    _emit(doc, args.out)
    return EXIT_OK


def cmd_overlap(args) -> int:
    try:
        ours = correlate.read_ip_set(args.ours)
        prior = []
        for spec in args.prior:
            name, sep, path = spec.partition("=")
            if not sep:
                raise ValueError(f"--prior expects name=path, got {spec!r}")
            prior.append((name, correlate.read_ip_set(path)))
        doc = correlate.dataset_overlap(ours, prior)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _emit(doc, args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    if not (run / "manifest.json").is_file():
        print(f"error: {run} is not a run directory (no manifest.json)", file=sys.stderr)
        return EXIT_CONFIG
    for name in ("summary.json", "protocol_mix.csv", "anomaly_summary.json", "threat_summary.csv", "spam_categories.csv", "retrieval_report.json"):
        path = run / name
        if path.is_file():
            print(f"== {name}")
            print(path.read_text(encoding="utf-8").rstrip())
    return EXIT_OK


def _emit(doc, out: str | None) -> None:
    text = json.dumps(doc, sort_keys=True, indent=2)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resipkit", description="Offline analysis of residential-proxy exit-node captures.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text, extra in (
        ("ingest", "assemble flows and the passive DNS map", ()),
        ("destinations", "identify protocols and destinations", ()),
        ("triage", "split flows into control/tunnel/relayed", ()),
        ("features", "write the per-flow feature matrix", (_feature_args,)),
        ("risk", "anomaly rules, sensitive destinations, threat intel", (_risk_args,)),
        ("mail", "SMTP outcomes, spam templates, IMAP/POP3 logins", (_mail_args,)),
        ("run", "full pipeline", (_feature_args, _risk_args, _mail_args)),
    ):
        p = sub.add_parser(name, help=help_text)
        _capture_args(p)
        for add in extra:
            add(p)
        p.set_defaults(func=cmd_stage(None if name == "run" else name))

    p = sub.add_parser("demo", help="run the full pipeline on the bundled demo capture")
    _capture_args(p, out_default="demo-run")
    _feature_args(p)
    _risk_args(p)
    _mail_args(p)
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("train", help="train a forest on a features CSV")
    p.add_argument("--features", required=True)
    p.add_argument("--model", required=True, help="output model file")
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--max-features", type=int)
    p.add_argument("--min-leaf", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--holdout", type=float, default=0.0, help="fraction of rows kept back for evaluation")
    p.add_argument("--top", type=int, default=10, help="importance rows to print")
    p.add_argument("--jobs", type=int, default=pipeline.default_jobs())
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="apply a trained forest to a features CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", help="predictions CSV (default: stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("correlate", help="match probe logs to relayed flows")
    p.add_argument("--probes", required=True, help="probe log JSONL")
    p.add_argument("--flows", required=True, help="flow JSONL (triage.jsonl or destinations.jsonl)")
    p.add_argument("--dt", type=float, default=correlate.DEFAULT_DT, help="time tolerance, seconds")
    p.add_argument("--db", type=int, default=correlate.DEFAULT_DBYTES, help="size tolerance, bytes")
    p.add_argument("--out")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("overlap", help="overlap of node IPs with prior datasets")
    p.add_argument("--ours", required=True)
    p.add_argument("--prior", nargs="+", required=True, metavar="NAME=PATH")
    p.add_argument("--out")
    p.set_defaults(func=cmd_overlap)

    p = sub.add_parser("report", help="print the report tables of a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

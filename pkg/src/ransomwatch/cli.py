"""Command-line entry point: ``ransomwatch train|tune|detect|simulate|synth``.

Exit status: 0 success, 1 usage or configuration error, 2 data error.
Summaries go to stdout as ``key=value`` lines; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .capture import CaptureError, PcapReader, is_pcap, read_post_events
from .detector import ModelError, classify, load_model, save_model
from .reassembly import HttpReassembler
from .switch import Simulation, read_port_map
from .synth import SynthSpec, generate, write_dataset
from .tracker import FeatureTracker
from .traces import ManifestError, file_digest, load_manifest, read_manifest
from .trainer import train
from .tuner import DEFAULT_GRID_STEPS, parse_policy, tune, write_roc_csv

log = logging.getLogger("ransomwatch")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(out, **fields) -> None:
    print(" ".join(f"{k}={v}" for k, v in fields.items()), file=out)


def _need_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _pct(x: float) -> str:
    return f"{100 * x:.2f}%"


def _load_models(paths: Sequence[str], require_limit: bool):
    models = []
    for path in paths:
        _need_file(path, "model file")
        try:
            m = load_model(path)
            if require_limit:
                m.validate(require_limit=True)
        except ModelError as exc:
            raise UsageError(f"{path}: {exc}") from exc
        models.append(m)
    return models


def _load_manifest(path: str):
    _need_file(path, "manifest")
    try:
        entries = read_manifest(path)
        for e in entries:
            _need_file(str(e.path), "trace file")
        return load_manifest(path)
    except ManifestError as exc:
        raise UsageError(str(exc)) from exc
    except CaptureError as exc:
        raise DataError(str(exc)) from exc


# -- subcommands --------------------------------------------------------------

def cmd_train(args, out) -> int:
    traces = _load_manifest(args.manifest)
    family = args.family.lower()
    created = args.created or os.environ.get("SOURCE_DATE_EPOCH")
    try:
        result = train(traces, family, created=created)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    for msg in result.rejected:
        log.warning("rejected: %s", msg)
    save_model(result.model, args.out)
    m = result.model
    _emit(out, family=m.family, trained_on=m.trained_on, rejected=len(result.rejected))
    _emit(out, centroid=",".join(f"{c:.6g}" for c in m.centroid), d_min_sq=f"{m.d_min_sq:.6g}", d_max_sq=f"{m.d_max_sq:.6g}")
    return EXIT_OK


def cmd_tune(args, out) -> int:
    if Path(args.out).resolve() == Path(args.model).resolve():
        raise UsageError("--out must differ from --model; tuning writes a new model file")
    try:
        policy = parse_policy(args.policy)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    (model,) = _load_models([args.model], require_limit=False)
    positives = [t for t in _load_manifest(args.positives) if t.label == model.family]
    negatives = []
    for path in args.negatives:
        negatives.extend(t for t in _load_manifest(path) if t.label is None)
    provenance = {
        "datasets": {
            "positives": {Path(args.positives).name: file_digest(args.positives)},
            "negatives": {Path(p).name: file_digest(p) for p in args.negatives},
        }
    }
    try:
        result = tune(model, positives, negatives, policy, args.grid_steps, provenance)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    save_model(result.model, args.out)
    if args.roc_out:
        write_roc_csv(args.roc_out, result.curve)
    p = result.point
    _emit(out, family=model.family, policy=str(policy), grid_points=len(result.curve))
    _emit(out, threshold_sq=f"{result.threshold_sq:.6g}", tpr=_pct(p.tpr),
          fpr_triples=_pct(p.fpr_triples), fpr_domains=_pct(p.fpr_domains))
    return EXIT_OK


def _input_events(path: Path):
    try:
        if is_pcap(path):
            r = HttpReassembler()
            for pkt in PcapReader(path):
                yield from r.feed(pkt)
            report = r.flush()
            yield from report.events
            if report.abandoned:
                log.info("%d incomplete flow(s) at end of capture", len(report.abandoned))
        else:
            yield from read_post_events(path)
    except (CaptureError, OSError) as exc:
        raise DataError(str(exc)) from exc


def cmd_detect(args, out) -> int:
    models = _load_models(args.model, require_limit=True)
    src = _need_file(args.input, "input")
    tracker = FeatureTracker()
    per_key: dict[str, list] = {}
    rows = []
    for ev in _input_events(src):
        triple = tracker.observe(ev)
        if triple is None:
            continue
        v = classify(triple, models, ev.server_key, ev.t)
        stats = per_key.setdefault(ev.server_key, [0, 0, set()])
        stats[0] += 1
        if v.malicious:
            stats[1] += 1
            stats[2].add(v.family)
            tracker.flag(ev.server_key)
        rows.append([repr(ev.t), ev.server_key, *triple,
                     "" if v.distance_sq is None else repr(v.distance_sq),
                     int(v.malicious), v.family or ""])
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "server_key", "s1", "s2", "s3", "distance_sq", "malicious", "family"])
        w.writerows(rows)
    n_mal = sum(1 for r in rows if r[6])
    for key, (n, m, fams) in per_key.items():
        _emit(out, key=key, triples=n, malicious=m, family=",".join(sorted(fams)) or "-")
    _emit(out, triples=len(rows), malicious=n_mal)
    _emit(out, detections="present" if n_mal else "none")
    return EXIT_OK


def cmd_simulate(args, out) -> int:
    models = _load_models(args.model, require_limit=True)
    pcap = _need_file(args.pcap, "pcap")
    if args.ports:
        _need_file(args.ports, "port map")
        try:
            port_map, default = read_port_map(args.ports)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    else:
        port_map, default = {}, None
    sim = Simulation(models, port_map, default if default is not None else args.default_port, args.block)
    try:
        result = sim.run(PcapReader(pcap))
    except CaptureError as exc:
        raise DataError(str(exc)) from exc
    Path(args.out).write_text(result.log_csv(), encoding="utf-8")
    dump = result.switch.dump()
    if args.flows_out:
        Path(args.flows_out).write_text(dump, encoding="utf-8")
    actions = [d.action for d in result.decisions]
    _emit(out, packets=len(actions), forwarded=actions.count("forward"), flooded=actions.count("flood"),
          dropped=actions.count("drop"), inspected=result.controller.inspected)
    _emit(out, blocked=",".join(sorted(result.switch.blocked_ips())) or "-")
    if not args.flows_out:
        out.write(dump)
    return EXIT_OK


def cmd_synth(args, out) -> int:
    spec_path = _need_file(args.spec, "synth spec")
    try:
        spec = SynthSpec.load(spec_path)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{spec_path}: {exc}") from exc
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    result = generate(spec)
    files = write_dataset(result, args.out, spec, fmt=args.format)
    n_posts = sum(len(t.events) for t in result.traces)
    _emit(out, traces=len(result.traces), files=len(files), posts=n_posts, seed=spec.seed)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ransomwatch", description="Ransomware C&C detection from HTTP POST sizes.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="learning phase: fit a family centroid")
    t.add_argument("--manifest", required=True)
    t.add_argument("--family", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--created", help="timestamp recorded in the model (default: $SOURCE_DATE_EPOCH)")
    t.set_defaults(func=cmd_train)

    u = sub.add_parser("tune", help="fine-tuning phase: ROC sweep and limit selection")
    u.add_argument("--model", required=True)
    u.add_argument("--positives", required=True, help="manifest of held-out infection traces")
    u.add_argument("--negatives", required=True, action="append", help="manifest of benign traces (repeatable; pooled)")
    u.add_argument("--policy", default="youden-triples", help="youden-triples|youden-domains|manual:<t>")
    u.add_argument("--grid-steps", type=int, default=DEFAULT_GRID_STEPS)
    u.add_argument("--out", required=True)
    u.add_argument("--roc-out", help="ROC curve CSV")
    u.set_defaults(func=cmd_tune)

    d = sub.add_parser("detect", help="offline detection over a pcap or POST-event fixture")
    d.add_argument("--model", required=True, action="append")
    d.add_argument("input")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_detect)

    s = sub.add_parser("simulate", help="replay a pcap through the SDN switch simulation")
    s.add_argument("--model", action="append", default=[])
    s.add_argument("pcap")
    s.add_argument("--ports", help="'mac port' map; '*' sets the port of unknown hosts")
    s.add_argument("--default-port", default=0, type=int)
    s.add_argument("--block", action="append", default=[], metavar="IP", help="pre-blocked server IP (repeatable)")
    s.add_argument("--out", required=True, help="decision log CSV")
    s.add_argument("--flows-out", help="flow table dump (default: stdout)")
    s.set_defaults(func=cmd_simulate)

    y = sub.add_parser("synth", help="generate a labeled synthetic corpus")
    y.add_argument("--spec", required=True)
    y.add_argument("--out", required=True)
    y.add_argument("--seed", type=int)
    y.add_argument("--format", choices=("pcap", "events"), default="pcap")
    y.set_defaults(func=cmd_synth)
    return p


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = out if out is not None else sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args, out)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except DataError as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

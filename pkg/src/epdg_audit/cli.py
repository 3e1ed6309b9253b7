"""epdg-audit command line: discover, scan, analyze, audit-config, simulate, mock-fleet."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import random
import signal
import sys
import threading
from collections import Counter
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence, TextIO

from . import SCHEMA_VERSION, __version__, data_file
from . import attack_sim, config_audit, discovery, key_analysis, scanner
from .mock_epdg import FleetError, MockFleet, MockFleetSpec

log = logging.getLogger("epdg_audit")

EXIT_OK, EXIT_USAGE, EXIT_RESOLVER, EXIT_UNREACHABLE = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _groups(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = (int(x) for x in part.split("-", 1))
            out.extend(g for g in scanner.ALL_GROUPS if lo <= g <= hi)
        elif part:
            out.append(int(part))
    return out


def _open_out(args) -> TextIO:
    if args.output in (None, "-"):
        return sys.stdout
    return open(args.output, "w")


def _emit_lines(args, records) -> None:
    fh = _open_out(args)
    try:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()


def _emit_doc(args, doc) -> None:
    fh = _open_out(args)
    try:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    finally:
        if fh is not sys.stdout:
            fh.close()


def _rng(args) -> Optional[random.Random]:
    return random.Random(args.seed) if args.seed is not None else None


# -- discover ---------------------------------------------------------------


def _fixed_time(args) -> Optional[datetime]:
    if args.timestamp:
        return datetime.fromisoformat(args.timestamp.replace("Z", "+00:00"))
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    return datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else None


def cmd_discover(args) -> int:
    plmns: list[discovery.PlmnId] = []
    if args.mcc:
        mncs = args.mnc or []
        if len(mncs) not in (1, len(args.mcc)):
            raise CliError("give one --mnc range, or one per --mcc")
        pairs = zip(args.mcc, mncs * len(args.mcc) if len(mncs) == 1 else mncs)
        plmns.extend(discovery.enumerate_plmns(pairs))
    if args.plmn_file:
        plmns.extend(discovery.read_plmn_file(args.plmn_file))
    if not plmns:
        raise CliError("nothing to discover: give --mcc/--mnc or --plmn-file")
    plmns = list(dict.fromkeys(plmns))
    if args.stub:
        with open(args.stub) as fh:
            resolver = discovery.StubResolver(json.load(fh))
    elif args.nameserver:
        resolver = discovery.UpstreamResolver(args.nameserver, timeout=args.timeout_ms / 1000)
    else:
        resolver = discovery.SystemResolver()
    now = _fixed_time(args)

    def one(p):
        t = discovery.resolve(discovery.epdg_fqdn(p), resolver, p, now)
        return dataclasses.replace(t, vantage=args.vantage) if args.vantage else t

    try:
        targets = scanner.run_parallel(plmns, one, args.workers)
    except discovery.ResolverUnavailable as exc:
        print(f"resolver failure: {exc}", file=sys.stderr)
        return EXIT_RESOLVER
    _emit_lines(args, ({"schema_version": SCHEMA_VERSION, "record": "epdg_target", **t.to_dict()}
                       for t in targets))
    found = sum(1 for t in targets if t.addresses)
    print(f"queried {len(targets)} names, {found} with addresses", file=sys.stderr)
    return EXIT_OK


# -- scan -------------------------------------------------------------------


def _load_targets(path) -> list[discovery.EpdgTarget]:
    with open(path) as fh:
        return discovery.load_targets(fh)


def _check_authorized(targets, authorized: bool) -> None:
    if authorized:
        return
    for t in targets:
        for a in t.addresses[:1]:
            if not scanner.is_permitted_target(a):
                raise CliError(f"refusing to probe public address {a} ({t.plmn}) "
                               "without --i-am-authorized")


def _probe_config(args) -> scanner.ProbeConfig:
    return scanner.ProbeConfig(
        port=args.port, timeout_ms=args.timeout_ms, retries=args.retries,
        inter_probe_delay_ms=args.delay_ms, workers=args.workers,
        capture_dir=Path(args.capture_dir) if args.capture_dir else None, rng=_rng(args))


def _table(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    cells = [list(map(str, header))] + [list(map(str, r)) for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def cmd_scan(args) -> int:
    targets = _load_targets(args.targets)
    _check_authorized(targets, args.i_am_authorized)
    cfg = _probe_config(args)
    unreachable = 0
    records: list[dict] = []
    if args.mode == "survey":
        groups = _groups(args.groups)
        results = scanner.run_parallel(targets, lambda t: scanner.survey(t, groups, cfg), args.workers)
        records = [r.to_dict() for r in results]
        unreachable = sum(1 for r in results if not r.target.addresses or all(
            isinstance(o, scanner.TransportError) for o in r.per_group.values()))
        counts = scanner.survey_counts(results)
        labels = Counter(r.support_label for r in results)
        summary = _table([(f"DH{g}", n) for g, n in counts.items()], ("group", "targets")) + "\n\n" + \
            _table(sorted(labels.items(), key=lambda kv: -kv[1]), ("combination", "targets"))
    elif args.mode == "tolerance":
        def one(t):
            try:
                return scanner.weak_preference_test(t, cfg).to_dict()
            except scanner.TransportFailure as exc:
                return {"kind": "unreachable", "detail": str(exc)}
        results = scanner.run_parallel(targets, one, args.workers)
        for t, res in zip(targets, results):
            records.append({"schema_version": SCHEMA_VERSION, "record": "tolerance",
                            "target": t.to_dict(), "result": res})
        unreachable = sum(1 for r in results if r["kind"] == "unreachable")
        kinds = Counter(r["kind"] for r in results)
        total = len(results) or 1
        summary = _table([(k, n, f"{n / total:.2f}") for k, n in sorted(kinds.items())],
                         ("class", "targets", "share"))
    else:
        collections = scanner.run_parallel(
            targets, lambda t: scanner.collect_keys(t, args.group, args.count, cfg), args.workers)
        rows = []
        for t, col in zip(targets, collections):
            records.extend(o.to_dict() for o in col)
            if not col and any(isinstance(g, scanner.TransportError) for g in col.gaps):
                unreachable += 1
            rows.append((str(t.plmn), len(col), len({o.pubkey_fp for o in col}), len(col.gaps)))
        summary = _table(rows, ("target", "observations", "distinct", "gaps"))
    _emit_lines(args, records)
    print(summary, file=sys.stderr)
    if unreachable:
        print(f"{unreachable} target(s) unreachable", file=sys.stderr)
        if args.strict:
            return EXIT_UNREACHABLE
    return EXIT_OK


# -- analyze ----------------------------------------------------------------


def cmd_analyze(args) -> int:
    with open(args.observations) as fh:
        observations = key_analysis.load_observations(fh)
    aliases = {}
    if args.targets:
        aliases = discovery.aliases_from_shared_addresses(_load_targets(args.targets))
    report = key_analysis.census(observations, aliases)
    blacklist = key_analysis.load_blacklist(args.blacklist)
    report.blacklist_matches = key_analysis.match_blacklist(observations, blacklist)
    known = None
    if args.known_exponents:
        with open(args.known_exponents) as fh:
            known = {op: [int(a, 0) if isinstance(a, str) else int(a) for a in v]
                     for op, v in json.load(fh).items()}
    doc = report.to_dict()
    doc["coverage_confidence"] = {
        op: {str(g): key_analysis.coverage_confidence(s["distinct_keys"], s["observations"])
             for g, s in gs.items()}
        for op, gs in report.per_operator.items()
    }
    doc["cross_group_exposure"] = [e.to_dict() for e in key_analysis.cross_group_exposure(observations, known)]
    _emit_doc(args, doc)
    print(f"{report.total_obs} observations, {report.distinct_keys} distinct keys, "
          f"{len(report.sharing_matrix)} shared across operators, "
          f"{len(report.blacklist_matches)} blacklist match(es)", file=sys.stderr)
    return EXIT_OK


# -- audit-config -----------------------------------------------------------


def cmd_audit_config(args) -> int:
    with open(args.records) as fh:
        records = config_audit.load_records(fh.read())
    rules = config_audit.load_rules(args.rules)
    defaults = config_audit.load_defaults(args.defaults)
    reports = [config_audit.audit(r, rules, defaults) for r in records]
    _emit_doc(args, {"schema_version": SCHEMA_VERSION, "record": "config_audit",
                     "reports": [r.to_dict() for r in reports],
                     "summary": config_audit.aggregate(reports)})
    flagged = sum(1 for r in reports if r.flags)
    print(f"{len(reports)} records, {flagged} with deprecated parameters", file=sys.stderr)
    return EXIT_OK


# -- simulate ---------------------------------------------------------------


def _scenario_path(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    shipped = data_file(f"scenarios/{p.stem}.json")
    if shipped.exists():
        return shipped
    raise CliError(f"no scenario {name!r}")


def cmd_simulate(args) -> int:
    scenario = attack_sim.Scenario.load(_scenario_path(args.scenario))
    if args.seed is not None:
        scenario.seed = args.seed
    try:
        transcript = scenario.run()
    except attack_sim.PreconditionError as exc:
        raise CliError(f"scenario precondition failed: {exc}") from exc
    _emit_doc(args, transcript.to_dict())
    print(transcript.render(), file=sys.stderr)
    return EXIT_OK


# -- mock-fleet -------------------------------------------------------------


def cmd_mock_fleet(args, ready: Optional[threading.Event] = None,
                   stop: Optional[threading.Event] = None) -> int:
    spec = MockFleetSpec.load(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    stop = stop or threading.Event()
    fleet = MockFleet(spec)
    try:
        fleet.start()
    except FleetError as exc:
        raise CliError(str(exc)) from exc
    try:
        lines = discovery.dump_targets(fleet.targets())
        if args.targets_out:
            Path(args.targets_out).write_text(lines)
        else:
            sys.stdout.write(lines)
            sys.stdout.flush()
        print(f"{len(fleet.servers)} mock ePDG listener(s) up", file=sys.stderr)
        if threading.current_thread() is threading.main_thread():
            for sig in (signal.SIGINT, signal.SIGTERM):
                signal.signal(sig, lambda *_: stop.set())
        if ready is not None:
            ready.set()
        stop.wait(args.duration)
    finally:
        fleet.stop()
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def _global_options(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(None), help="seed for all randomness")
    p.add_argument("--timeout-ms", type=int, default=d(5000), help="probe/resolver timeout")
    p.add_argument("--delay-ms", type=int, default=d(500), help="minimum gap between probes per target")
    p.add_argument("--i-am-authorized", action="store_true", default=d(False),
                   help="allow probing public addresses")
    p.add_argument("--output", "-o", default=d(None), help="output file (default stdout)")
    p.add_argument("--verbose", "-v", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epdg-audit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_options(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("discover", parents=[common], help="build and resolve ePDG names")
    p.add_argument("--mcc", action="append", help="MCC or range, e.g. 232 or 200-799")
    p.add_argument("--mnc", action="append", help="MNC or range, e.g. 00-10")
    p.add_argument("--plmn-file", help="CSV of mcc,mnc rows")
    p.add_argument("--nameserver", action="append", help="query this server (needs dnspython)")
    p.add_argument("--stub", help="JSON file of fixed DNS answers")
    p.add_argument("--timestamp", help="pin resolved_at (ISO 8601)")
    p.add_argument("--vantage", help="label for the network location queries are made from")
    p.add_argument("--workers", type=int, default=32)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("scan", parents=[common], help="probe targets")
    p.add_argument("targets", help="JSONL targets file")
    p.add_argument("--mode", choices=("survey", "tolerance", "collect-keys"), default="survey")
    p.add_argument("--groups", default=",".join(map(str, scanner.ALL_GROUPS)),
                   help="groups to survey, e.g. 1,2,14-18")
    p.add_argument("--group", type=int, default=2, help="group for collect-keys")
    p.add_argument("-n", "--count", type=int, default=500, help="handshakes for collect-keys")
    p.add_argument("--port", type=int, default=500)
    p.add_argument("--retries", type=int, default=1)
    p.add_argument("--workers", type=int, default=8)
    p.add_argument("--capture-dir")
    p.add_argument("--strict", action="store_true", help="exit 3 if any target is unreachable")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("analyze", parents=[common], help="key reuse census")
    p.add_argument("observations", help="JSONL key observations")
    p.add_argument("--blacklist", help="key-hash blacklist (default: shipped list)")
    p.add_argument("--targets", help="targets JSONL; shared addresses merge operators")
    p.add_argument("--known-exponents", help="JSON {operator: [exponent, ...]} for exposure checks")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("audit-config", parents=[common], help="flag deprecated IKEv2 parameters")
    p.add_argument("records", help="JSON array or JSONL of config records")
    p.add_argument("--rules", help="deprecation rule set (default: shipped)")
    p.add_argument("--defaults", help="vendor defaults (default: shipped)")
    p.set_defaults(func=cmd_audit_config)

    p = sub.add_parser("simulate", parents=[common], help="run an attack scenario")
    p.add_argument("scenario", help="scenario JSON path or shipped name (fig7, fig8, full_attack)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("mock-fleet", parents=[common], help="serve mock ePDGs on loopback/private space")
    p.add_argument("spec", help="fleet spec JSON")
    p.add_argument("--targets-out", help="write targets JSONL here (default stdout)")
    p.add_argument("--duration", type=float, default=None, help="stop after this many seconds")
    p.set_defaults(func=cmd_mock_fleet)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"epdg-audit: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, ValueError) as exc:
        print(f"epdg-audit: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

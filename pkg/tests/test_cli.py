import json
import subprocess
import sys
import threading
from contextlib import contextmanager

import pytest

from epdg_audit import cli, data_file
from epdg_audit import dh_engine as dh
from epdg_audit.discovery import EpdgTarget, PlmnId, dump_targets, epdg_fqdn, load_targets
from epdg_audit.mock_epdg import make_exponent_pool
from epdg_audit.policy import strongest

FAST = ["--timeout-ms", "300", "--delay-ms", "0", "--seed", "1"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_jsonl(path):
    return [json.loads(x) for x in path.read_text().splitlines() if x.strip()]


@contextmanager
def fleet(tmp_path, operators, **extra):
    spec = tmp_path / "fleet.json"
    spec.write_text(json.dumps({"operators": operators, **extra}))
    out = tmp_path / "targets.jsonl"
    args = cli.build_parser().parse_args(["mock-fleet", str(spec), "--targets-out", str(out)])
    ready, stop = threading.Event(), threading.Event()
    errors = []

    def serve():
        try:
            cli.cmd_mock_fleet(args, ready, stop)
        except Exception as exc:  # surfaced below
            errors.append(exc)
            ready.set()

    th = threading.Thread(target=serve, daemon=True)
    th.start()
    assert ready.wait(10)
    if errors:
        raise errors[0]
    try:
        yield out
    finally:
        stop.set()
        th.join(5)


def op(plmn, **policy):
    return {"plmn": plmn, "policy": policy}


# -- discover ---------------------------------------------------------------


def test_discover_mnc_range_counts(tmp_path):
    stub = tmp_path / "stub.json"
    stub.write_text("{}")
    out = tmp_path / "t.jsonl"
    assert run("discover", "--mcc", "232", "--mnc", "00-10", "--stub", stub, "-o", out) == 0
    rows = read_jsonl(out)
    assert len(rows) == 11 and all(r["record"] == "epdg_target" for r in rows)
    assert rows[0]["fqdn"] == "epdg.epc.mnc000.mcc232.pub.3gppnetwork.org"


def test_discover_plmn_file(tmp_path):
    csv = tmp_path / "plmns.csv"
    csv.write_text("mcc,mnc\n262,01\n262,02\n310,410\n")
    stub = tmp_path / "stub.json"
    stub.write_text(json.dumps({epdg_fqdn(PlmnId("262", "01")): {"A": ["10.0.0.1"]}}))
    out = tmp_path / "t.jsonl"
    assert run("discover", "--plmn-file", csv, "--stub", stub, "-o", out) == 0
    rows = read_jsonl(out)
    assert len(rows) == 3 and [r["addresses"] for r in rows].count(["10.0.0.1"]) == 1


def test_discover_is_byte_identical(tmp_path):
    stub = tmp_path / "stub.json"
    stub.write_text(json.dumps({epdg_fqdn(PlmnId("232", "01")): {"A": ["10.1.1.1"], "AAAA": ["fd00::1"]}}))
    outs = []
    for i in range(2):
        out = tmp_path / f"run{i}.jsonl"
        assert run("discover", "--mcc", "232", "--mnc", "00-05", "--stub", stub,
                   "--timestamp", "2024-05-01T00:00:00Z", "--vantage", "lab", "-o", out) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert b'"vantage": "lab"' in outs[0]


def test_discover_resolver_failure_exit_2(tmp_path):
    stub = tmp_path / "stub.json"
    stub.write_text(json.dumps({epdg_fqdn(PlmnId("232", "03")): None}))
    assert run("discover", "--mcc", "232", "--mnc", "00-05", "--stub", stub, "-o", tmp_path / "x") == 2


def test_discover_needs_input(capsys):
    assert run("discover") == 1
    assert "nothing to discover" in capsys.readouterr().err


# -- scan -------------------------------------------------------------------


def test_scan_refuses_public_targets(tmp_path, capsys):
    path = tmp_path / "t.jsonl"
    path.write_text(dump_targets([EpdgTarget(PlmnId("232", "01"), "x", ("8.8.8.8",))]))
    assert run("scan", path, *FAST) == 1
    assert "--i-am-authorized" in capsys.readouterr().err


def test_scan_strict_unreachable(tmp_path, capsys):
    path = tmp_path / "t.jsonl"
    path.write_text(dump_targets([EpdgTarget(PlmnId("232", "01"), "x", ())]))
    assert run("scan", path, "--groups", "2", *FAST) == 0
    assert run("scan", path, "--groups", "2", "--strict", *FAST, "-o", tmp_path / "o") == 3
    assert "unreachable" in capsys.readouterr().err


def test_scan_survey_counts_match_fleet(tmp_path, capsys):
    supported = [[2], [2, 14], [1, 2, 5, 14], [14, 19]]
    ops = [op(f"001-{i:02d}", supported_groups=g, mismatch_action="drop") for i, g in enumerate(supported)]
    with fleet(tmp_path, ops) as targets:
        out = tmp_path / "survey.jsonl"
        assert run("scan", targets, "--groups", "1,2,5,14,19", *FAST, "--timeout-ms", "400", "-o", out) == 0
    rows = read_jsonl(out)
    got = [sorted(int(g) for g, o in r["per_group"].items() if o["kind"] == "accepted") for r in rows]
    assert got == [sorted(g) for g in supported]
    err = capsys.readouterr().err
    assert "DH2" in err and "combination" in err


def test_scan_capture_dir(tmp_path):
    with fleet(tmp_path, [op("001-01", supported_groups=[2])]) as targets:
        cap = tmp_path / "cap"
        assert run("scan", targets, "--groups", "2", "--capture-dir", cap, *FAST, "-o", tmp_path / "o") == 0
    assert len(list(cap.iterdir())) == 2


# -- end-to-end loop closure ------------------------------------------------

VARIANTS = [
    ({"supported_groups": [1, 2, 5, 14]}, {"kind": "tolerated", "group": 2}),
    ({"supported_groups": [2, 14, 18], "preference": "demand-strongest"}, {"kind": "upgrade-requested", "group": 18}),
    ({"supported_groups": [1, 2, 14], "preference": "demand-specific", "demand_group": 1},
     {"kind": "downgrade-indicated", "group": 1}),
    ({"supported_groups": [14], "mismatch_action": "error"}, {"kind": "error"}),
    ({"supported_groups": [14], "mismatch_action": "drop"}, {"kind": "error"}),
    ({"supported_groups": [14, 15]}, {"kind": "upgrade-requested", "group": 15}),
]


def test_policy_in_equals_classification_out(tmp_path):
    ops = [op(f"001-{i:02d}", **pol) for i, (pol, _) in enumerate(VARIANTS)]
    groups = [1, 2, 5, 14, 15, 18]
    with fleet(tmp_path, ops) as targets:
        tol, sur = tmp_path / "tol.jsonl", tmp_path / "sur.jsonl"
        assert run("scan", targets, "--mode", "tolerance", *FAST, "-o", tol) == 0
        assert run("scan", targets, "--groups", "1,2,5,14,15,18", *FAST, "--timeout-ms", "400", "-o", sur) == 0
    results = [{k: v for k, v in r["result"].items() if k != "detail"} for r in read_jsonl(tol)]
    assert results == [want for _, want in VARIANTS]
    for (pol, _), row in zip(VARIANTS, read_jsonl(sur)):
        accepted = {int(g) for g, o in row["per_group"].items() if o["kind"] == "accepted"}
        if pol.get("preference") == "demand-strongest":
            assert accepted == {strongest(pol["supported_groups"])}
        elif pol.get("preference") == "demand-specific":
            # a single-group offer never contains the demanded group except when probing it
            assert accepted == set(pol["supported_groups"])
        else:
            assert accepted == set(pol["supported_groups"]) & set(groups)


@pytest.mark.parametrize("key_mode,count,distinct", [
    ({"mode": "fresh"}, 20, 20),
    ({"mode": "static-pool", "exponents": [3, 5, 7]}, 60, 3),
    ({"mode": "reuse-window", "seconds": 600}, 10, 1),
])
def test_key_mode_loop_closure(tmp_path, key_mode, count, distinct):
    with fleet(tmp_path, [op("001-01", supported_groups=[2], key_mode=key_mode)]) as targets:
        obs = tmp_path / "obs.jsonl"
        assert run("scan", targets, "--mode", "collect-keys", "-n", count, *FAST, "-o", obs) == 0
    rows = read_jsonl(obs)
    assert len(rows) == count and len({r["pubkey_fp"] for r in rows}) == distinct
    if key_mode["mode"] == "static-pool":
        grp = dh.group_params(2)
        assert {r["pubkey_fp"] for r in rows} == {dh.pubkey_fingerprint(pow(2, a, grp.p), grp) for a in (3, 5, 7)}


def test_static_fleet_census_through_cli(tmp_path):
    ops = [op(f"001-{i:02d}", supported_groups=[2]) for i in range(4)]
    with fleet(tmp_path, ops, shared_key_pool={"size": 5, "seed": 3}) as targets:
        obs = tmp_path / "obs.jsonl"
        assert run("scan", targets, "--mode", "collect-keys", "-n", 60, *FAST, "-o", obs) == 0
    report = tmp_path / "r.json"
    assert run("analyze", obs, "-o", report) == 0
    doc = json.loads(report.read_text())
    assert doc["distinct_keys"] == 5 and len(doc["sharing_matrix"]) == 5
    assert all(len(v) == 4 for v in doc["sharing_matrix"].values())
    assert doc["coverage_confidence"]["001-00"]["2"] > 0.99


# -- analyze ----------------------------------------------------------------


def _obs_line(op_, fp, nonce):
    return json.dumps({"operator": op_, "endpoint": "10.0.0.1", "group": 2, "pubkey_fp": fp,
                       "nonce_fp": nonce, "observed_at": "2024-01-01T00:00:00Z"})


def test_analyze_fresh_and_blacklist(tmp_path):
    listed = dh.load_blacklist(data_file("static_key_blacklist.txt"))
    g2 = next(d for g, d in listed if g == 2)
    lines = [_obs_line("a", f"{i:064x}", f"{i + 100:064x}") for i in range(5)] + [_obs_line("a", g2, "f" * 64)]
    obs = tmp_path / "obs.jsonl"
    obs.write_text("\n".join(lines) + "\n")
    out = tmp_path / "r.json"
    assert run("analyze", obs, "-o", out) == 0
    doc = json.loads(out.read_text())
    assert doc["sharing_matrix"] == {} and len(doc["blacklist_matches"]) == 1


def test_analyze_known_exponents(tmp_path):
    a = 0x1234567
    lines = []
    for g in (1, 14):
        grp = dh.group_params(g)
        lines.append(json.dumps({"operator": "x", "endpoint": "10.0.0.1", "group": g,
                                 "pubkey_fp": dh.pubkey_fingerprint(pow(2, a, grp.p), grp),
                                 "nonce_fp": f"{g:064x}", "observed_at": "2024-01-01T00:00:00Z"}))
    obs, known, out = tmp_path / "obs.jsonl", tmp_path / "k.json", tmp_path / "r.json"
    obs.write_text("\n".join(lines))
    known.write_text(json.dumps({"x": [hex(a)]}))
    assert run("analyze", obs, "--known-exponents", known, "-o", out) == 0
    ev = json.loads(out.read_text())["cross_group_exposure"]
    assert ev == [{"operator": "x", "kind": "shared-exponent", "groups": [1, 14], "detail": {"exponent_bits": 25}}]


# -- audit-config -----------------------------------------------------------


def test_audit_config(tmp_path):
    recs = tmp_path / "r.json"
    recs.write_text(json.dumps([{"vendor": "Qualcomm", "operator": "001-01", "dh_groups": [2, 5, 14]},
                                {"vendor": "Samsung", "operator": "001-02", "dh_groups": [14]}]))
    out = tmp_path / "o.json"
    assert run("audit-config", recs, "-o", out) == 0
    doc = json.loads(out.read_text())
    ke = [[(f["category"], f["id"]) for f in r["flags"] if f["category"] == "ke"] for r in doc["reports"]]
    assert ke == [[("ke", 2), ("ke", 5)], []]
    assert doc["summary"]["vendors"]["Qualcomm"]["deprecated_share"]["ke"] == 1.0


# -- simulate ---------------------------------------------------------------


@pytest.mark.parametrize("name,label,layers", [
    ("fig7", "Success", []), ("fig8", "Downgraded(1)", []), ("full_attack", "Success", ["L1", "L2", "L3"])])
def test_simulate_shipped(tmp_path, capsys, name, label, layers):
    out = tmp_path / "t.json"
    assert run("simulate", name, "-o", out) == 0
    doc = json.loads(out.read_text())
    assert doc["outcome"]["label"] == label and doc["layers_compromised"] == layers
    rendered = capsys.readouterr().err
    if name == "fig7":
        msgs = [e for e in doc["events"] if e["kind"] == "message"]
        assert len(msgs) == 3
        assert "UE -> ePDG  SA_INIT([DH2, DH14], KE_DH14)" in rendered
        assert "INVALID_KE(USE DH2)" in rendered


def test_simulate_is_idempotent(tmp_path):
    outs = []
    for i in range(2):
        out = tmp_path / f"{i}.json"
        assert run("simulate", "full_attack", "--seed", "5", "-o", out) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_simulate_unknown_scenario(capsys):
    assert run("simulate", "nope") == 1


# -- mock-fleet -------------------------------------------------------------


def test_shipped_static_fleet_listeners(tmp_path):
    spec = data_file("fleet_static_pool.json")
    out = tmp_path / "targets.jsonl"
    args = cli.build_parser().parse_args(["mock-fleet", str(spec), "--targets-out", str(out)])
    ready, stop = threading.Event(), threading.Event()
    th = threading.Thread(target=cli.cmd_mock_fleet, args=(args, ready, stop), daemon=True)
    th.start()
    assert ready.wait(10)
    try:
        with open(out) as fh:
            targets = load_targets(fh)
        assert len(targets) == 13 and len({t.port for t in targets}) == 13
        obs = tmp_path / "obs.jsonl"
        assert run("scan", out, "--mode", "collect-keys", "-n", 40, *FAST, "-o", obs) == 0
    finally:
        stop.set()
        th.join(5)
    pool = make_exponent_pool(10, 2024)
    grp = dh.group_params(2)
    allowed = {dh.pubkey_fingerprint(pow(2, a, grp.p), grp) for a in pool}
    assert {r["pubkey_fp"] for r in read_jsonl(obs)} <= allowed


def test_mock_fleet_refuses_public_bind(tmp_path, capsys):
    spec = tmp_path / "f.json"
    spec.write_text(json.dumps({"operators": [op("001-01", supported_groups=[2]) | {"listen": "8.8.8.8:500"}]}))
    assert run("mock-fleet", spec, "--duration", "0") == 1
    assert "refusing" in capsys.readouterr().err


def test_mock_fleet_duration_and_module_entry(tmp_path):
    spec = tmp_path / "f.json"
    spec.write_text(json.dumps({"operators": [op("001-01", supported_groups=[2])]}))
    proc = subprocess.run([sys.executable, "-m", "epdg_audit", "mock-fleet", str(spec), "--duration", "0.2"],
                          capture_output=True, text=True, timeout=30)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["plmn"] == "001-01"

import json
from datetime import datetime, timezone

import pytest
from hypothesis import given, strategies as st

from epdg_audit import discovery as d

T0 = datetime(2024, 3, 1, tzinfo=timezone.utc)


def test_fqdn_pads_two_digit_mnc():
    assert d.epdg_fqdn(d.PlmnId("232", "05")) == "epdg.epc.mnc005.mcc232.pub.3gppnetwork.org"


def test_fqdn_three_digit_mnc():
    assert d.epdg_fqdn(d.PlmnId("502", "153")) == "epdg.epc.mnc153.mcc502.pub.3gppnetwork.org"


@pytest.mark.parametrize("mcc,mnc", [("23", "05"), ("2320", "05"), ("232", "5"), ("232", "1234"),
                                     ("23a", "05"), ("232", "0x"), ("２３２", "05")])
def test_invalid_plmn(mcc, mnc):
    with pytest.raises(d.InvalidPlmn):
        d.PlmnId(mcc, mnc)


def test_parse_and_str():
    assert d.PlmnId.parse("232-05") == d.PlmnId("232", "05")
    assert d.PlmnId.parse("502/153") == d.PlmnId("502", "153")
    assert str(d.PlmnId("232", "05")) == "232-05"
    with pytest.raises(d.InvalidPlmn):
        d.PlmnId.parse("23205")


def test_enumerate_small_range():
    got = d.enumerate_plmns([("232", "00-10")])
    assert len(got) == 11
    assert got[0] == d.PlmnId("232", "00") and got[-1] == d.PlmnId("232", "10")


def test_enumerate_empty():
    assert d.enumerate_plmns([]) == []


def test_enumerate_full_space():
    # 600 country codes x 1000 three-digit network codes
    got = d.enumerate_plmns([("200-799", "000-999")])
    assert len(got) == 600 * 1000
    assert len({d.epdg_fqdn(p) for p in got}) == len(got)


def test_enumerate_dedups_and_sorts():
    got = d.enumerate_plmns([("232", "05"), ("231", "03"), ("232", "05")])
    assert got == [d.PlmnId("231", "03"), d.PlmnId("232", "05")]


def test_enumerate_rejects_reversed_range():
    with pytest.raises(d.InvalidPlmn):
        d.enumerate_plmns([("232", "10-00")])


@given(st.integers(100, 999), st.integers(0, 999), st.integers(100, 999), st.integers(0, 999))
def test_fqdn_injective_for_fixed_mnc_width(mcc1, mnc1, mcc2, mnc2):
    a = d.PlmnId(str(mcc1), f"{mnc1:03d}")
    b = d.PlmnId(str(mcc2), f"{mnc2:03d}")
    assert (d.epdg_fqdn(a) == d.epdg_fqdn(b)) == (a == b)


def test_fqdn_round_trip():
    p = d.PlmnId("502", "153")
    assert d.plmn_from_fqdn(d.epdg_fqdn(p)) == p


def test_resolve_nxdomain_is_empty_target():
    t = d.resolve("epdg.epc.mnc001.mcc001.pub.3gppnetwork.org", d.StubResolver({}), now=T0)
    assert t.addresses == () and t.plmn == d.PlmnId("001", "001")


def test_resolve_orders_v4_before_v6():
    name = d.epdg_fqdn(d.PlmnId("232", "05"))
    stub = d.StubResolver({name: {"A": ["10.0.0.9", "10.0.0.10"], "AAAA": ["2001:db8::1"]}})
    t = d.resolve(name, stub, now=T0)
    assert t.addresses == ("10.0.0.9", "10.0.0.10", "2001:db8::1")


def test_resolve_timeout():
    name = d.epdg_fqdn(d.PlmnId("232", "05"))
    with pytest.raises(d.ResolverUnavailable):
        d.resolve(name, d.StubResolver({name: None}))


def test_targets_jsonl_round_trip():
    t = d.EpdgTarget(d.PlmnId("232", "05"), d.epdg_fqdn(d.PlmnId("232", "05")), ("10.0.0.1",), T0,
                     vantage="lab")
    text = d.dump_targets([t])
    assert json.loads(text)["resolved_at"] == "2024-03-01T00:00:00Z"
    assert d.load_targets(text.splitlines()) == [t]


def test_read_plmn_file(tmp_path):
    f = tmp_path / "list.csv"
    f.write_text("mcc,mnc\n232,05\n502,153\n216,01\n232,05\n")
    assert d.read_plmn_file(f) == [d.PlmnId("232", "05"), d.PlmnId("502", "153"), d.PlmnId("216", "01")]


def test_aliases_from_shared_addresses():
    mk = lambda plmn, addrs: d.EpdgTarget(d.PlmnId.parse(plmn), "x", tuple(addrs))
    aliases = d.aliases_from_shared_addresses(
        [mk("232-10", ["10.0.0.1"]), mk("232-05", ["10.0.0.1"]), mk("231-03", ["10.0.0.2"]), mk("231-04", [])])
    assert aliases == {"232-10": "232-05"}


def test_system_resolver_localhost():
    assert "127.0.0.1" in d.SystemResolver().lookup("localhost", "A")


def test_upstream_resolver_requires_servers():
    pytest.importorskip("dns.resolver")
    r = d.UpstreamResolver(["127.0.0.1"], timeout=0.2)
    with pytest.raises(d.ResolverUnavailable):
        r.lookup("epdg.epc.mnc005.mcc232.pub.3gppnetwork.org", "A")

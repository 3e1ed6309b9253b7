import json

import pytest
from hypothesis import given, settings, strategies as st

from epdg_audit import config_audit as ca

RULES = ca.load_rules()
DEFAULTS = ca.load_defaults()

# deprecated entries written out independently of the shipped JSON
EXPECTED_RULES = {
    "ke": {1, 2, 5, 22},
    "encryption": {"DES_IV64", "DES", "RC5", "IDEA", "CAST", "BLOWFISH", "3IDEA", "DES_IV32"},
    "prf": {"HMAC_MD5", "HMAC_TIGER"},
    "integrity": {"HMAC_MD5_96", "DES_MAC", "KPDK_MD5", "HMAC_MD5_128", "HMAC_SHA1_160"},
}


def rec(**kw):
    kw.setdefault("vendor", "Test")
    return ca.ConfigRecord.from_dict(kw)


def flags(record):
    return [(f.category, f.id) for f in ca.audit(record, RULES, DEFAULTS).flags]


def test_rule_set_matches_reference():
    assert set(RULES["ke"]) == EXPECTED_RULES["ke"]
    for cat in ("encryption", "prf", "integrity"):
        assert {ca.transform_name(cat, i) for i in RULES[cat]} == EXPECTED_RULES[cat]


def test_qualcomm_style_groups():
    assert [f for f in flags(rec(dh_groups=[2, 5, 14])) if f[0] == "ke"] == [("ke", 2), ("ke", 5)]


def test_clean_record():
    assert flags(rec(dh_groups=[14], encryption=["AES_CBC-128"])) == []


def test_des_and_md5_prf():
    assert sorted(flags(rec(encryption=["DES", "AES_CBC-256"], prf=["HMAC_MD5", "HMAC_SHA2_256"]))) == [
        ("encryption", 2), ("prf", 1)]


@pytest.mark.parametrize("cat,tid", [(c, i) for c in ca.CATEGORIES for i in sorted(RULES[c])])
def test_every_rule_is_matchable(cat, tid):
    key = {"ke": "dh_groups", "encryption": "encryption", "integrity": "integrity", "prf": "prf"}[cat]
    value = tid if cat == "ke" else ca.transform_name(cat, tid)
    report = ca.audit(rec(**{key: [value]}), RULES, {})
    assert [(f.category, f.id) for f in report.flags] == [(cat, tid)]
    assert report.flags[0].name == RULES[cat][tid]


def test_shipped_vendor_defaults():
    assert sorted(flags(DEFAULTS["Qualcomm"])) == [("integrity", 1), ("ke", 2), ("ke", 5)]
    assert flags(DEFAULTS["Samsung"]) == [("ke", 2)]
    assert flags(DEFAULTS["Pixel"]) == [("ke", 2), ("ke", 5)]


def test_derived_prf_is_noted_not_flagged():
    report = ca.audit(DEFAULTS["Samsung"], RULES, DEFAULTS)
    assert "prf" not in report.categories_flagged()
    assert any("derived" in n for n in report.notes)


def test_inheritance_from_vendor_default():
    report = ca.audit(rec(vendor="Qualcomm", operator="001-01", dh_groups=[14]), RULES, DEFAULTS)
    assert set(report.inherited) == {"encryption", "integrity", "prf"}
    assert report.categories_flagged() == {"integrity"}
    assert report.effective.rekey_hard_s == 64900


def test_unknown_vendor_inherits_nothing():
    report = ca.audit(rec(vendor="Nobody", dh_groups=[1]), RULES, DEFAULTS)
    assert report.inherited == () and flags(report.record) == [("ke", 1)]


def test_record_validation():
    with pytest.raises(ca.ConfigError):
        ca.ConfigRecord("X")
    with pytest.raises(ca.ConfigError):
        rec(integrity=["NO_SUCH_MAC"])
    r = rec(dh_groups=[2, 2, 14], integrity=["HMAC_SHA1_96", "SHA1_96", 2])
    assert r.dh_groups == (2, 14) and r.integrity == (2,)


def test_record_dict_roundtrip_and_spellings():
    r = rec(encryption=["AES_CBC-128", ["AES_CBC", 256], "3DES"], prf=["PRF_HMAC_SHA1"], integrity=["AUTH_HMAC_SHA1_96"],
            rekey_hard_s=86400)
    assert r.encryption == ((12, 128), (12, 256), (3, None))
    assert ca.ConfigRecord.from_dict(r.to_dict()) == r


def test_load_records_formats():
    items = [{"vendor": "A", "dh_groups": [2]}, {"vendor": "B", "dh_groups": [14]}]
    assert ca.load_records(json.dumps(items)) == ca.load_records("\n".join(map(json.dumps, items)))
    assert len(ca.load_records(items)) == 2


_ids = {c: sorted(t) for c, t in (("encryption", ca.ENCR_NAMES), ("integrity", ca.INTEG_NAMES),
                                  ("prf", ca.PRF_NAMES))}
_records = st.builds(
    lambda g, e, i, p: ca.ConfigRecord("T", dh_groups=tuple(g), encryption=tuple((x, None) for x in e),
                                       integrity=tuple(i), prf=tuple(p)),
    st.lists(st.sampled_from([1, 2, 5, 14, 15, 19, 22]), min_size=1, unique=True),
    st.lists(st.sampled_from(_ids["encryption"]), unique=True),
    st.lists(st.sampled_from(_ids["integrity"]), unique=True),
    st.lists(st.sampled_from(_ids["prf"]), unique=True))


@settings(max_examples=200, deadline=None)
@given(_records, st.randoms())
def test_audit_order_independent(r, rnd):
    def shuffled(t):
        t = list(t)
        rnd.shuffle(t)
        return tuple(t)

    other = ca.ConfigRecord("T", dh_groups=shuffled(r.dh_groups), encryption=shuffled(r.encryption),
                            integrity=shuffled(r.integrity), prf=shuffled(r.prf))
    a, b = ca.audit(r, RULES, {}), ca.audit(other, RULES, {})
    assert a.flags == b.flags and a.deprecated_share_by_category == b.deprecated_share_by_category
    for f in a.flags:
        assert RULES[f.category][f.id] == f.name


@settings(max_examples=200, deadline=None)
@given(_records)
def test_single_record_shares_are_binary(r):
    summary = ca.aggregate([ca.audit(r, RULES, {})])
    shares = summary["vendors"]["T"]["deprecated_share"]
    assert shares and all(v in (0.0, 1.0) for v in shares.values())


# -- aggregate --------------------------------------------------------------


def test_aggregate_share_of_83_percent():
    records = [rec(vendor="Oppo", operator=f"op{i}", dh_groups=[2, 14] if i < 83 else [14, 19])
               for i in range(100)]
    summary = ca.aggregate([ca.audit(r, RULES, DEFAULTS) for r in records])
    assert summary["vendors"]["Oppo"]["deprecated_share"] == {"ke": 0.83}
    assert summary["vendors"]["Oppo"]["counts"]["ke"] == {"deprecated": 83, "records": 100}


def test_aggregate_empty():
    assert ca.aggregate([]) == {}


def test_year_long_lifetime_is_outlier():
    records = [rec(operator="a", rekey_hard_s=31_536_000), rec(operator="b", rekey_hard_s=86_400)]
    v = ca.aggregate([ca.audit(r, RULES, {}) for r in records])["vendors"]["Test"]
    assert v["rekey_outliers"] == [{"operator": "a", "rekey_s": 31_536_000}]
    assert v["rekey_cdf_hours"]["24"] == 0.5 and v["rekey_cdf_hours"]["168"] == 0.5


def test_aggregate_defaults_only_when_requested():
    report = ca.audit(rec(vendor="Qualcomm", operator="x", rekey_hard_s=3600), RULES, DEFAULTS)
    assert ca.aggregate([report])["vendors"]["Qualcomm"]["deprecated_share"] == {}
    assert ca.aggregate([report], explicit_only=False)["vendors"]["Qualcomm"]["deprecated_share"]["ke"] == 1.0

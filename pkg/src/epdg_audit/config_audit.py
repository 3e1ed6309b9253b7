"""Audit normalized IKEv2 client configuration records for deprecated parameters."""

from __future__ import annotations

import json
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence, Union

from . import SCHEMA_VERSION, data_file

CATEGORIES = ("ke", "encryption", "integrity", "prf")

# IANA IKEv2 transform registries (subset relevant to client configs)
ENCR_NAMES = {
    1: "DES_IV64", 2: "DES", 3: "3DES", 4: "RC5", 5: "IDEA", 6: "CAST", 7: "BLOWFISH",
    8: "3IDEA", 9: "DES_IV32", 11: "NULL", 12: "AES_CBC", 13: "AES_CTR", 14: "AES_CCM_8",
    15: "AES_CCM_12", 16: "AES_CCM_16", 18: "AES_GCM_8", 19: "AES_GCM_12", 20: "AES_GCM_16",
    23: "CAMELLIA_CBC", 28: "CHACHA20_POLY1305",
}
PRF_NAMES = {
    1: "HMAC_MD5", 2: "HMAC_SHA1", 3: "HMAC_TIGER", 4: "AES128_XCBC", 5: "HMAC_SHA2_256",
    6: "HMAC_SHA2_384", 7: "HMAC_SHA2_512", 8: "AES128_CMAC",
}
INTEG_NAMES = {
    0: "NONE", 1: "HMAC_MD5_96", 2: "HMAC_SHA1_96", 3: "DES_MAC", 4: "KPDK_MD5", 5: "AES_XCBC_96",
    6: "HMAC_MD5_128", 7: "HMAC_SHA1_160", 8: "AES_CMAC_96", 9: "AES_128_GMAC",
    10: "AES_192_GMAC", 11: "AES_256_GMAC", 12: "HMAC_SHA2_256_128", 13: "HMAC_SHA2_384_192",
    14: "HMAC_SHA2_512_256",
}

# vendor spellings seen in config files
_ALIASES = {
    "encryption": {"DESIV64": 1, "DESIV32": 9, "TRIPLEDES": 3, "DES3": 3, "AES": 12, "AESCBC": 12,
                   "AESGCM": 20, "AESGCM16": 20},
    "integrity": {"MD596": 1, "SHA196": 2, "XCBC96": 5, "AESXCBC96": 5, "AESXCBC": 5, "MD5128": 6,
                  "SHA1160": 7, "SHA2256": 12, "SHA2384": 13, "SHA2512": 14, "HMACSHA2256": 12,
                  "HMACSHA2384": 13, "HMACSHA2512": 14},
    "prf": {"MD5": 1, "SHA1": 2, "TIGER": 3, "AES128": 4, "AESXCBC": 4, "AESXCBC128": 4,
            "SHA2256": 5, "SHA2384": 6, "SHA2512": 7, "AESCMAC": 8},
}
_TABLES = {"encryption": ENCR_NAMES, "integrity": INTEG_NAMES, "prf": PRF_NAMES}

DERIVED = "*"  # PRF not set: derived from the integrity algorithm
OUTLIER_S = 7 * 86_400
CDF_POINTS_H = (1, 6, 10, 12, 18, 22, 24, 48, 168)


class ConfigError(ValueError):
    pass


def _key(name: str) -> str:
    return re.sub(r"[^A-Z0-9]", "", name.upper())


def transform_id(category: str, value: Union[int, str]) -> int:
    """Resolve a transform given by IANA id or (loosely spelled) name."""
    if isinstance(value, int) or (isinstance(value, str) and value.isdigit()):
        return int(value)
    table = _TABLES[category]
    wanted = _key(value)
    for tid, name in table.items():
        if _key(name) == wanted:
            return tid
    if wanted in _ALIASES[category]:
        return _ALIASES[category][wanted]
    # IANA registry names carry a PRF_/ENCR_/AUTH_ prefix
    bare = re.sub(r"^(PRF|ENCR|AUTH|INTEG)[_ -]", "", value.strip().upper())
    if bare != value.strip().upper():
        return transform_id(category, bare)
    raise ConfigError(f"unknown {category} algorithm {value!r}")


def transform_name(category: str, tid: int) -> str:
    if category == "ke":
        return f"DH{tid}"
    return _TABLES[category].get(tid, str(tid))


def _dedup(items):
    return None if items is None else tuple(dict.fromkeys(items))


@dataclass(frozen=True)
class ConfigRecord:
    """One vendor/operator IKEv2 configuration; ``None`` fields inherit the vendor default."""

    vendor: str
    operator: str = "default"
    dh_groups: Optional[tuple[int, ...]] = None
    encryption: Optional[tuple[tuple[int, Optional[int]], ...]] = None
    integrity: Optional[tuple[int, ...]] = None
    prf: Union[tuple[int, ...], str, None] = None
    rekey_soft_s: Optional[float] = None
    rekey_hard_s: Optional[float] = None

    def __post_init__(self):
        fields_ = (self.dh_groups, self.encryption, self.integrity, self.prf,
                   self.rekey_soft_s, self.rekey_hard_s)
        if all(f is None for f in fields_):
            raise ConfigError("record sets no configuration field")
        object.__setattr__(self, "dh_groups", _dedup(self.dh_groups))
        object.__setattr__(self, "encryption", _dedup(
            None if self.encryption is None else [(int(a), None if b is None else int(b))
                                                  for a, b in self.encryption]))
        object.__setattr__(self, "integrity", _dedup(self.integrity))
        if self.prf != DERIVED:
            object.__setattr__(self, "prf", _dedup(self.prf))

    def explicit(self, category: str) -> bool:
        return self._raw(category) is not None

    def _raw(self, category: str):
        return {"ke": self.dh_groups, "encryption": self.encryption,
                "integrity": self.integrity, "prf": self.prf}[category]

    def ids(self, category: str) -> tuple[int, ...]:
        raw = self._raw(category)
        if raw is None or raw == DERIVED:
            return ()
        if category == "encryption":
            return tuple(dict.fromkeys(a for a, _ in raw))
        return raw

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConfigRecord":
        def conv(cat, key):
            v = d.get(key)
            if v is None or v == DERIVED:
                return v
            return [transform_id(cat, x) for x in v]

        enc = d.get("encryption")
        if enc is not None:
            enc = [_parse_encr(e) for e in enc]
        return cls(
            vendor=str(d["vendor"]),
            operator=str(d.get("operator", "default")),
            dh_groups=None if d.get("dh_groups") is None else [int(g) for g in d["dh_groups"]],
            encryption=enc,
            integrity=conv("integrity", "integrity"),
            prf=conv("prf", "prf"),
            rekey_soft_s=d.get("rekey_soft_s"),
            rekey_hard_s=d.get("rekey_hard_s"),
        )

    def to_dict(self) -> dict:
        d: dict = {"vendor": self.vendor, "operator": self.operator}
        if self.dh_groups is not None:
            d["dh_groups"] = list(self.dh_groups)
        if self.encryption is not None:
            d["encryption"] = [[transform_name("encryption", a), b] for a, b in self.encryption]
        if self.integrity is not None:
            d["integrity"] = [transform_name("integrity", i) for i in self.integrity]
        if self.prf is not None:
            d["prf"] = self.prf if self.prf == DERIVED else [transform_name("prf", i) for i in self.prf]
        for k in ("rekey_soft_s", "rekey_hard_s"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        return d


def _parse_encr(e) -> tuple[int, Optional[int]]:
    if isinstance(e, (list, tuple)):
        return transform_id("encryption", e[0]), (None if len(e) < 2 or e[1] is None else int(e[1]))
    if isinstance(e, str):
        m = re.fullmatch(r"(.+?)[-_ ]?(\d{3})", e)
        if m and m.group(2) in ("128", "192", "256"):
            return transform_id("encryption", m.group(1)), int(m.group(2))
    return transform_id("encryption", e), None


def load_records(source: Union[str, Iterable[Mapping]]) -> list[ConfigRecord]:
    """Accept a JSON array, JSONL text or an iterable of dicts."""
    if isinstance(source, str):
        text = source.strip()
        items = json.loads(text) if text.startswith("[") else [json.loads(x) for x in text.splitlines() if x.strip()]
    else:
        items = list(source)
    return [ConfigRecord.from_dict(x) for x in items]


def load_rules(path=None) -> dict[str, dict[int, str]]:
    with open(path or data_file("deprecated_table6.json")) as fh:
        raw = json.load(fh)
    return {cat: {int(k): v for k, v in raw[cat].items()} for cat in CATEGORIES}


def load_defaults(path=None) -> dict[str, ConfigRecord]:
    with open(path or data_file("defaults_table2.json")) as fh:
        return {r.vendor: r for r in load_records(json.load(fh))}


@dataclass(frozen=True)
class Flag:
    category: str
    id: int
    name: str

    def to_dict(self) -> dict:
        return {"category": self.category, "id": self.id, "name": self.name}


@dataclass
class DeprecationReport:
    record: ConfigRecord
    flags: list[Flag]
    deprecated_share_by_category: dict[str, float]
    inherited: tuple[str, ...] = ()
    notes: list[str] = field(default_factory=list)
    effective: Optional[ConfigRecord] = None

    def categories_flagged(self) -> set[str]:
        return {f.category for f in self.flags}

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "record": self.record.to_dict(),
            "flags": [f.to_dict() for f in self.flags],
            "deprecated_share_by_category": self.deprecated_share_by_category,
            "inherited": list(self.inherited),
            "notes": self.notes,
        }


def _inherit(record: ConfigRecord, defaults: Mapping[str, ConfigRecord]) -> tuple[ConfigRecord, tuple[str, ...]]:
    base = defaults.get(record.vendor)
    if base is None or base is record:
        return record, ()
    names = {"ke": "dh_groups", "encryption": "encryption", "integrity": "integrity", "prf": "prf"}
    changes, inherited = {}, []
    for cat, attr in names.items():
        if getattr(record, attr) is None and getattr(base, attr) is not None:
            changes[attr] = getattr(base, attr)
            inherited.append(cat)
    for attr in ("rekey_soft_s", "rekey_hard_s"):
        if getattr(record, attr) is None:
            changes[attr] = getattr(base, attr)
    if not changes:
        return record, ()
    return replace(record, **changes), tuple(inherited)


def audit(record: ConfigRecord, rules: Optional[Mapping[str, Mapping[int, str]]] = None,
          defaults: Optional[Mapping[str, ConfigRecord]] = None) -> DeprecationReport:
    """Flag every deprecated entry of *record*, after filling gaps from vendor defaults."""
    rules = rules if rules is not None else load_rules()
    defaults = defaults if defaults is not None else load_defaults()
    effective, inherited = _inherit(record, defaults)
    flags, share, notes = [], {}, []
    for cat in CATEGORIES:
        ids = sorted(effective.ids(cat))
        bad = [i for i in ids if i in rules[cat]]
        flags.extend(Flag(cat, i, rules[cat][i]) for i in bad)
        if ids:
            share[cat] = len(bad) / len(ids)
    if effective.prf == DERIVED:
        notes.append("prf derived from integrity algorithm; not flagged")
    return DeprecationReport(record, flags, share, inherited, notes, effective)


def _rekey_value(r: ConfigRecord) -> Optional[float]:
    return r.rekey_hard_s if r.rekey_hard_s is not None else r.rekey_soft_s


def aggregate(reports: Sequence[DeprecationReport], explicit_only: bool = True) -> dict:
    """Per-vendor share of records with at least one deprecated entry per category.

    With *explicit_only* a category only counts for records that configure it
    themselves, so vendor fallbacks do not inflate operator statistics.
    Rekey timers are summarized as CDF points over hours plus an outlier list.
    """
    if not reports:
        return {}
    by_vendor: dict[str, list[DeprecationReport]] = defaultdict(list)
    for r in reports:
        by_vendor[r.record.vendor].append(r)
    out: dict = {"schema_version": SCHEMA_VERSION, "vendors": {}}
    for vendor, reps in sorted(by_vendor.items()):
        shares, counts = {}, {}
        for cat in CATEGORIES:
            pool = [r for r in reps if (r.record.explicit(cat) if explicit_only else r.effective.ids(cat))]
            if not pool:
                continue
            hit = sum(1 for r in pool if cat in r.categories_flagged())
            shares[cat] = hit / len(pool)
            counts[cat] = {"deprecated": hit, "records": len(pool)}
        timers = sorted(v for r in reps if (v := _rekey_value(r.record if explicit_only else r.effective)) is not None)
        cdf = {str(h): (sum(1 for v in timers if v <= h * 3600) / len(timers)) for h in CDF_POINTS_H} if timers else {}
        outliers = [{"operator": r.record.operator, "rekey_s": _rekey_value(r.record)} for r in reps
                    if (_rekey_value(r.record) or 0) > OUTLIER_S]
        out["vendors"][vendor] = {
            "records": len(reps),
            "deprecated_share": shares,
            "counts": counts,
            "rekey_cdf_hours": cdf,
            "rekey_outliers": outliers,
        }
    return out

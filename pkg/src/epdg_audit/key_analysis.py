"""Reuse analytics over collected server key observations."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

from . import SCHEMA_VERSION
from . import dh_engine as dh
from .dh_engine import MalformedBlacklist, load_blacklist, parse_blacklist  # noqa: F401

_HEX = set("0123456789abcdef")


class DomainError(ValueError):
    pass


def _check_fp(fp: str) -> str:
    if len(fp) != 64 or not set(fp) <= _HEX:
        raise ValueError(f"fingerprint must be 64 lowercase hex chars: {fp!r}")
    return fp


@dataclass(frozen=True)
class KeyObservation:
    operator: str
    endpoint: str
    group: int
    pubkey_fp: str
    nonce_fp: str
    observed_at: datetime
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        _check_fp(self.pubkey_fp)
        _check_fp(self.nonce_fp)

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "record": "key_observation",
            "operator": self.operator,
            "endpoint": self.endpoint,
            "group": self.group,
            "pubkey_fp": self.pubkey_fp,
            "nonce_fp": self.nonce_fp,
            "observed_at": self.observed_at.astimezone(timezone.utc).isoformat().replace("+00:00", "Z"),
        }
        if self.flags:
            d["flags"] = list(self.flags)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "KeyObservation":
        ts = datetime.fromisoformat(str(d["observed_at"]).replace("Z", "+00:00"))
        return cls(str(d["operator"]), str(d["endpoint"]), int(d["group"]), d["pubkey_fp"],
                   d["nonce_fp"], ts, tuple(d.get("flags", ())))


def load_observations(lines: Iterable[str]) -> list[KeyObservation]:
    return [KeyObservation.from_dict(json.loads(x)) for x in lines if x.strip()]


@dataclass
class ReuseReport:
    scope: str
    groups: list[int]
    distinct_keys: int
    total_obs: int
    sharing_matrix: dict[str, list[str]]
    singleton_keys: dict[str, str]
    nonce_reuse_events: int
    per_operator: dict[str, dict[int, dict[str, int]]] = field(default_factory=dict)
    blacklist_matches: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "record": "reuse_report",
            "scope": self.scope,
            "groups": self.groups,
            "distinct_keys": self.distinct_keys,
            "total_obs": self.total_obs,
            "sharing_matrix": self.sharing_matrix,
            "singleton_keys": self.singleton_keys,
            "nonce_reuse_events": self.nonce_reuse_events,
            "per_operator": {op: {str(g): v for g, v in gs.items()}
                             for op, gs in self.per_operator.items()},
            "blacklist_matches": self.blacklist_matches,
        }


def census(observations: Iterable[KeyObservation],
           aliases: Optional[Mapping[str, str]] = None) -> ReuseReport:
    """Count distinct keys per operator/group and find keys shared across operators.

    *aliases* maps an operator id onto the canonical id it should be merged
    into. A repeated nonce fingerprint within one operator counts as one
    reuse event per repetition.
    """
    aliases = aliases or {}
    owners: dict[str, set[str]] = defaultdict(set)
    per_op: dict[str, dict[int, dict[str, set | int]]] = defaultdict(dict)
    nonces: dict[str, set[str]] = defaultdict(set)
    groups: set[int] = set()
    reuse = total = 0
    for obs in observations:
        op = aliases.get(obs.operator, obs.operator)
        total += 1
        groups.add(obs.group)
        owners[obs.pubkey_fp].add(op)
        slot = per_op[op].setdefault(obs.group, {"keys": set(), "obs": 0})
        slot["keys"].add(obs.pubkey_fp)
        slot["obs"] += 1
        if obs.nonce_fp in nonces[op]:
            reuse += 1
        nonces[op].add(obs.nonce_fp)
    shared = {fp: sorted(ops) for fp, ops in sorted(owners.items()) if len(ops) >= 2}
    single = {fp: next(iter(ops)) for fp, ops in sorted(owners.items()) if len(ops) == 1}
    return ReuseReport(
        scope="inter" if len(per_op) > 1 else "intra",
        groups=sorted(groups),
        distinct_keys=len(owners),
        total_obs=total,
        sharing_matrix=shared,
        singleton_keys=single,
        nonce_reuse_events=reuse,
        per_operator={op: {g: {"distinct_keys": len(s["keys"]), "observations": s["obs"]}
                           for g, s in sorted(gs.items())}
                      for op, gs in sorted(per_op.items())},
    )


def coverage_confidence(distinct_seen: int, draws: int) -> float:
    """Probability that *draws* uniform draws from a pool of exactly
    *distinct_seen* keys hit every key at least once.

    Exact inclusion-exclusion in rational arithmetic::

        P = sum_j (-1)^j C(k, j) ((k - j) / k)^n
    """
    k, n = distinct_seen, draws
    if k < 1:
        raise DomainError("distinct_seen must be >= 1")
    if n < k:
        raise DomainError(f"draws ({n}) < distinct_seen ({k})")
    total = sum((-1) ** j * math.comb(k, j) * (k - j) ** n for j in range(k + 1))
    return float(Fraction(total, k ** n))


def match_blacklist(observations: Iterable[KeyObservation],
                    blacklist: Iterable[tuple[int, str]]) -> list[dict]:
    listed = {(int(g), d.lower()) for g, d in blacklist}
    return [
        {"operator": o.operator, "endpoint": o.endpoint, "group": o.group,
         "pubkey_fp": o.pubkey_fp, "observed_at": o.to_dict()["observed_at"]}
        for o in observations if (o.group, o.pubkey_fp) in listed
    ]


@dataclass
class ExposureEvidence:
    operator: str
    kind: str  # "shared-exponent" | "fingerprint-cardinality"
    groups: list[int]
    detail: dict

    def to_dict(self) -> dict:
        return {"operator": self.operator, "kind": self.kind, "groups": self.groups,
                "detail": self.detail}


def cross_group_exposure(observations: Iterable[KeyObservation],
                         known_exponents: Optional[Mapping[str, Sequence[int]]] = None
                         ) -> list[ExposureEvidence]:
    """Look for one private exponent behind public values in several groups.

    With *known_exponents* (simulation, where each mock's exponents are
    known) every candidate exponent is replayed in each observed group and
    reported when it reproduces observed keys in two or more groups. Without
    it only the distinct-fingerprint count per group is reported, which is
    circumstantial: a public value does not reveal its exponent.
    """
    by_op: dict[str, dict[int, set[str]]] = defaultdict(lambda: defaultdict(set))
    for o in observations:
        by_op[o.operator][o.group].add(o.pubkey_fp)
    evidence = []
    for op, groups in sorted(by_op.items()):
        if len(groups) < 2:
            continue
        if known_exponents is None:
            evidence.append(ExposureEvidence(
                op, "fingerprint-cardinality", sorted(groups),
                {"distinct_keys_per_group": {str(g): len(fps) for g, fps in sorted(groups.items())}}))
            continue
        for a in known_exponents.get(op, ()):
            hit = []
            for gid, fps in sorted(groups.items()):
                try:
                    grp = dh.group_params(gid)
                except dh.UnknownGroup:
                    continue
                if 1 < a < grp.p - 1 and dh.pubkey_fingerprint(dh.gpow(grp, a), grp) in fps:
                    hit.append(gid)
            if len(hit) >= 2:
                evidence.append(ExposureEvidence(
                    op, "shared-exponent", hit, {"exponent_bits": a.bit_length()}))
    return evidence

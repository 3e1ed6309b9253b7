"""ePDG negotiation policies and the responder that enacts them.

The same :class:`EpdgResponder` answers datagrams in the UDP mock fleet and
messages on the simulator's virtual bus, so both exercise identical
group-selection logic.
"""

from __future__ import annotations

import random
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union

from . import dh_engine as dh
from . import ike_codec as ike

#: Weakest to strongest, ranking ECP groups by their symmetric-equivalent strength.
STRENGTH_ORDER = (1, 2, 5, 25, 14, 26, 15, 19, 31, 16, 17, 20, 18, 21)
_RANK = {g: i for i, g in enumerate(STRENGTH_ORDER)}

ACCEPT_CLIENT_CHOICE = "accept-client-choice"
DEMAND_STRONGEST = "demand-strongest"
DEMAND_SPECIFIC = "demand-specific"
PREFERENCES = (ACCEPT_CLIENT_CHOICE, DEMAND_STRONGEST, DEMAND_SPECIFIC)
MISMATCH_ACTIONS = ("invalid-ke", "error", "drop")


def strength(group: int) -> int:
    return _RANK.get(group, -1)


def strongest(groups: Iterable[int]) -> Optional[int]:
    groups = [g for g in groups if g in _RANK]
    return max(groups, key=strength) if groups else None


def weakest(groups: Iterable[int]) -> Optional[int]:
    groups = [g for g in groups if g in _RANK]
    return min(groups, key=strength) if groups else None


@dataclass(frozen=True)
class FreshPerHandshake:
    name = "fresh"


@dataclass(frozen=True)
class StaticPool:
    exponents: tuple[int, ...]
    name = "static-pool"

    def __post_init__(self):
        if not self.exponents:
            raise ValueError("StaticPool needs at least one exponent")


@dataclass(frozen=True)
class ReuseWindow:
    seconds: float
    name = "reuse-window"


KeyMode = Union[FreshPerHandshake, StaticPool, ReuseWindow]


@dataclass(frozen=True)
class EpdgPolicy:
    supported_groups: frozenset[int]
    preference: str = ACCEPT_CLIENT_CHOICE
    demand_group: Optional[int] = None
    key_mode: KeyMode = FreshPerHandshake()
    # what to send when the client's KE group is not the one wanted
    mismatch_action: str = "invalid-ke"
    reauth_on_rekey: bool = False
    enforce_sip_encryption: bool = False

    def __post_init__(self):
        object.__setattr__(self, "supported_groups", frozenset(self.supported_groups))
        if self.preference not in PREFERENCES:
            raise ValueError(f"unknown preference {self.preference!r}")
        if self.preference == DEMAND_SPECIFIC and self.demand_group is None:
            raise ValueError("demand-specific needs demand_group")
        if self.mismatch_action not in MISMATCH_ACTIONS:
            raise ValueError(f"unknown mismatch action {self.mismatch_action!r}")

    def to_dict(self) -> dict:
        d = {
            "supported_groups": sorted(self.supported_groups, key=strength),
            "preference": self.preference,
            "mismatch_action": self.mismatch_action,
            "reauth_on_rekey": self.reauth_on_rekey,
            "enforce_sip_encryption": self.enforce_sip_encryption,
            "key_mode": {"mode": self.key_mode.name},
        }
        if self.demand_group is not None:
            d["demand_group"] = self.demand_group
        if isinstance(self.key_mode, StaticPool):
            d["key_mode"]["exponents"] = [hex(a) for a in self.key_mode.exponents]
        elif isinstance(self.key_mode, ReuseWindow):
            d["key_mode"]["seconds"] = self.key_mode.seconds
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpdgPolicy":
        km = d.get("key_mode") or {"mode": "fresh"}
        mode = km.get("mode", "fresh")
        if mode == "fresh":
            key_mode: KeyMode = FreshPerHandshake()
        elif mode == "static-pool":
            key_mode = StaticPool(tuple(_as_int(a) for a in km["exponents"]))
        elif mode == "reuse-window":
            key_mode = ReuseWindow(float(km["seconds"]))
        else:
            raise ValueError(f"unknown key mode {mode!r}")
        return cls(
            supported_groups=frozenset(int(g) for g in d["supported_groups"]),
            preference=d.get("preference", ACCEPT_CLIENT_CHOICE),
            demand_group=d.get("demand_group"),
            key_mode=key_mode,
            mismatch_action=d.get("mismatch_action", "invalid-ke"),
            reauth_on_rekey=bool(d.get("reauth_on_rekey", False)),
            enforce_sip_encryption=bool(d.get("enforce_sip_encryption", False)),
        )


def _as_int(v) -> int:
    return int(v, 0) if isinstance(v, str) else int(v)


@dataclass(frozen=True)
class Decision:
    action: str  # "accept" | "invalid-ke" | "error" | "drop"
    group: Optional[int] = None


def decide(policy: EpdgPolicy, offered: Sequence[int], ke_group: int) -> Decision:
    """Pick the responder's reaction to an SA_INIT offering *offered* with KE *ke_group*."""
    supported = policy.supported_groups
    fallback = ke_group if ke_group in supported else strongest(supported & set(offered))
    if policy.preference == DEMAND_STRONGEST:
        want = strongest(supported)
    elif policy.preference == DEMAND_SPECIFIC and policy.demand_group in offered \
            and policy.demand_group in supported:
        want = policy.demand_group
    else:
        want = fallback
    if want == ke_group:
        return Decision("accept", ke_group)
    action = policy.mismatch_action
    if want is None and action == "invalid-ke":
        action = "error"
    return Decision(action, want if action == "invalid-ke" else None)


@dataclass
class ServedKey:
    group: int
    private: Optional[int]
    public: bytes


class EpdgResponder:
    """Stateful responder: applies the policy and serves keys per its key mode."""

    def __init__(self, policy: EpdgPolicy, rng: Optional[random.Random] = None,
                 clock: Callable[[], float] = time.monotonic):
        self.policy = policy
        self.rng = rng or random.Random()
        self.clock = clock
        self._window: dict[int, tuple[float, ServedKey]] = {}
        self._static_cache: dict[tuple[int, int], bytes] = {}
        self.served: deque[ServedKey] = deque(maxlen=10_000)

    def _random_bytes(self, n: int) -> bytes:
        return self.rng.getrandbits(8 * n).to_bytes(n, "big")

    def _fresh_key(self, group: int) -> ServedKey:
        if group in ike.ECP_KE_LENGTH:
            return ServedKey(group, None, self._random_bytes(ike.ECP_KE_LENGTH[group]))
        pair = dh.gen_keypair(dh.group_params(group), self.rng)
        return ServedKey(group, pair.private, pair.public_bytes())

    def key_for(self, group: int) -> ServedKey:
        mode = self.policy.key_mode
        if isinstance(mode, StaticPool) and group in ike.MODP_KE_LENGTH:
            a = self.rng.choice(mode.exponents)
            pub = self._static_cache.get((group, a))
            if pub is None:
                grp = dh.group_params(group)
                pub = self._static_cache[(group, a)] = dh.gpow(grp, a).to_bytes(grp.size, "big")
            key = ServedKey(group, a, pub)
        elif isinstance(mode, ReuseWindow):
            now = self.clock()
            cached = self._window.get(group)
            if cached is None or now - cached[0] >= mode.seconds:
                cached = self._window[group] = (now, self._fresh_key(group))
            key = cached[1]
        else:
            key = self._fresh_key(group)
        self.served.append(key)
        return key

    def respond(self, request: ike.IkeMessage) -> Optional[ike.IkeMessage]:
        """Answer an initiator IKE_SA_INIT, or return None to stay silent."""
        sa = request.first(ike.SaPayload)
        ke = request.first(ike.KePayload)
        if sa is None or ke is None or not sa.proposals:
            return ike.build_response(request, [ike.NotifyPayload(ike.NotifyType.INVALID_SYNTAX)])
        offered = [g for p in sa.proposals for g in p.ke_groups]
        decision = decide(self.policy, offered, ke.group)
        if decision.action == "drop":
            return None
        if decision.action == "error":
            return ike.build_response(request, [ike.NotifyPayload(ike.NotifyType.NO_PROPOSAL_CHOSEN)])
        if decision.action == "invalid-ke":
            return ike.build_response(request, [ike.invalid_ke_notify(decision.group)])
        chosen = _choose_transforms(sa.proposals[0], ke.group)
        if len(chosen.transforms) < 4:
            return ike.build_response(request, [ike.NotifyPayload(ike.NotifyType.NO_PROPOSAL_CHOSEN)])
        served = self.key_for(ke.group)
        payloads = [ike.SaPayload((chosen,)), ike.KePayload(ke.group, served.public),
                    ike.NoncePayload(self._random_bytes(32))]
        return ike.build_response(request, payloads, responder_spi=self._random_bytes(8))


def _choose_transforms(proposal: ike.Proposal, group: int) -> ike.Proposal:
    picked = []
    for ttype in (ike.TransformType.ENCR, ike.TransformType.PRF, ike.TransformType.INTEG):
        first = next((t for t in proposal.transforms if t.transform_type == ttype), None)
        if first is not None:
            picked.append(first)
    picked.append(ike.Transform(ike.TransformType.KE, group))
    return ike.Proposal(proposal.number, tuple(picked), proposal.protocol, proposal.spi)

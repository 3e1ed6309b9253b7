"""In-process UE / on-path attacker / ePDG simulation on a virtual clock.

Handshake messages on the bus are real IKEv2 encodings: each one is encoded,
decoded again and recorded with its octets. The EAP-AKA authentication and
SIP layers are modeled as timeline events only.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

from . import SCHEMA_VERSION
from . import dh_engine as dh
from . import ike_codec as ike
from .policy import EpdgPolicy, EpdgResponder, strength, weakest
from .scanner import ToleranceResult

UE, EPDG, MITM = "UE", "ePDG", "MitM"
LAYERS = ("L1", "L2", "L3")


class SimulationError(Exception):
    pass


class PreconditionError(SimulationError):
    pass


class InvalidKeRule(str, Enum):
    OFFERED_ONLY = "offered-only"
    ANY_GROUP = "any-group"
    REJECT_ALL = "reject-all"


@dataclass(frozen=True)
class UePolicy:
    offered_groups: tuple[int, ...]
    preferred_group: int
    invalid_ke_rule: InvalidKeRule = InvalidKeRule.OFFERED_ONLY
    rekey_soft_s: float = 64_800
    rekey_hard_s: float = 64_900
    sip_encryption_required: bool = False

    def __post_init__(self):
        object.__setattr__(self, "offered_groups", tuple(self.offered_groups))
        object.__setattr__(self, "invalid_ke_rule", InvalidKeRule(self.invalid_ke_rule))
        if not self.offered_groups:
            raise ValueError("UE must offer at least one group")
        if self.preferred_group not in self.offered_groups:
            raise ValueError("preferred_group must be offered")
        if self.rekey_soft_s > self.rekey_hard_s:
            raise ValueError("rekey_soft_s must not exceed rekey_hard_s")

    @classmethod
    def from_dict(cls, d: dict) -> "UePolicy":
        return cls(tuple(d["offered_groups"]), d["preferred_group"],
                   InvalidKeRule(d.get("invalid_ke_rule", "offered-only")),
                   float(d.get("rekey_soft_s", d.get("rekey_hard_s", 64_800))),
                   float(d.get("rekey_hard_s", 64_900)),
                   bool(d.get("sip_encryption_required", False)))


@dataclass(frozen=True)
class AttackerModel:
    crack_capability: int = 0
    crack_latency_s: float = 0.0
    position: str = "on-path"
    can_drop: bool = True
    can_inject: bool = True
    can_rewrite_plaintext: bool = True

    def __post_init__(self):
        if self.crack_capability not in (0, 1, 2):
            raise ValueError("crack_capability must be 0, 1 or 2")
        if self.position != "on-path":
            raise ValueError("only on-path attackers are modeled")

    def can_break(self, group: Optional[int]) -> bool:
        return group is not None and group <= self.crack_capability

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> Optional["AttackerModel"]:
        if d is None:
            return None
        return cls(int(d.get("crack_capability", 0)), float(d.get("crack_latency_s", 0)))


@dataclass(frozen=True)
class Schedule:
    pivot_group: Optional[int] = None
    l2_rekey_period_s: Optional[float] = None  # None: CHILD_SA rekeys with the IKE SA
    premature_rekey: bool = False

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "Schedule":
        d = d or {}
        return cls(d.get("pivot_group"), d.get("l2_rekey_period_s"), bool(d.get("premature_rekey", False)))


@dataclass(frozen=True)
class Outcome:
    kind: str  # "success" | "downgraded" | "attack-failed" | "handshake-failed"
    group: Optional[int] = None
    reason: Optional[str] = None

    def __str__(self) -> str:
        if self.kind == "downgraded":
            return f"Downgraded({self.group})"
        if self.kind == "success":
            return "Success"
        name = "AttackFailed" if self.kind == "attack-failed" else "HandshakeFailed"
        return f"{name}({self.reason})"


@dataclass
class Event:
    t: float
    actor: str
    kind: str  # "message" | "action" | "auth"
    summary: str
    dst: Optional[str] = None
    data: Optional[bytes] = None

    def to_dict(self) -> dict:
        d = {"t": self.t, "actor": self.actor, "kind": self.kind, "summary": self.summary}
        if self.dst:
            d["dst"] = self.dst
        if self.data is not None:
            d["data"] = self.data.hex()
        return d


@dataclass
class Transcript:
    events: list[Event] = field(default_factory=list)
    negotiated_group: Optional[int] = None
    layers_compromised: frozenset[str] = frozenset()
    outcome: Outcome = Outcome("handshake-failed", reason="not run")
    notes: list[str] = field(default_factory=list)

    @property
    def messages(self) -> list[Event]:
        return [e for e in self.events if e.kind == "message"]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "record": "transcript",
            "events": [e.to_dict() for e in self.events],
            "negotiated_group": self.negotiated_group,
            "layers_compromised": [x for x in LAYERS if x in self.layers_compromised],
            "outcome": {"kind": self.outcome.kind, "group": self.outcome.group,
                        "reason": self.outcome.reason, "label": str(self.outcome)},
            "notes": self.notes,
        }

    def render(self) -> str:
        """Message sequence in the style of a ladder diagram."""
        width = max([len(e.summary) for e in self.events] + [20])
        lines = []
        for e in self.events:
            if e.kind == "message":
                lines.append(f"{e.t:>9.0f}s  {e.actor:>4} -> {e.dst:<4}  {e.summary}")
            else:
                lines.append(f"{e.t:>9.0f}s  {e.actor:>4}  {'*':<6}  {e.summary}")
        lines.append("-" * min(width + 24, 100))
        lines.append(f"outcome: {self.outcome}; negotiated: "
                     f"{'DH%d' % self.negotiated_group if self.negotiated_group else 'none'}; "
                     f"layers: {{{', '.join(x for x in LAYERS if x in self.layers_compromised)}}}")
        return "\n".join(lines)


class _Bus:
    def __init__(self, transcript: Transcript):
        self.transcript = transcript
        self.now = 0.0

    def send(self, src: str, dst: str, msg: ike.IkeMessage) -> ike.IkeMessage:
        raw = ike.encode(msg)
        delivered = ike.decode(raw)
        self.transcript.events.append(Event(self.now, src, "message", ike.describe(delivered), dst, raw))
        return delivered

    def action(self, actor: str, summary: str, kind: str = "action") -> None:
        self.transcript.events.append(Event(self.now, actor, kind, summary))


class _Ue:
    def __init__(self, policy: UePolicy, rng: random.Random):
        self.policy = policy
        self.rng = rng
        self.offered = list(policy.offered_groups)
        self.ke_group = policy.preferred_group
        self.spi = rng.getrandbits(64).to_bytes(8, "big")

    def sa_init(self) -> ike.IkeMessage:
        if self.ke_group in ike.MODP_KE_LENGTH:
            public: object = dh.gen_keypair(dh.group_params(self.ke_group), self.rng).public
        else:
            n = ike.ECP_KE_LENGTH[self.ke_group]
            public = self.rng.getrandbits(8 * n).to_bytes(n, "big")
        spec = ike.ClientProposalSpec(self.offered, self.ke_group, public,
                                      allow_unoffered_ke=True, initiator_spi=self.spi, rng=self.rng)
        return ike.build_sa_init(spec)

    def on_invalid_ke(self, group: int) -> Optional[str]:
        """Apply the INVALID_KE rule; returns a refusal reason or None to retry."""
        rule = self.policy.invalid_ke_rule
        if rule is InvalidKeRule.REJECT_ALL:
            return "client ignores INVALID_KE"
        if group == self.ke_group:
            return "INVALID_KE names the group already in use"
        if rule is InvalidKeRule.ANY_GROUP:
            # a fixated client re-offers only the forced group
            if group not in ike.KE_LENGTH:
                return f"client cannot build a key share for group {group}"
            self.offered = [group]
        elif group not in self.offered:
            return "rejected unoffered group"
        self.ke_group = group
        return None


def _invalid_ke_group(msg: ike.IkeMessage) -> Optional[int]:
    for n in msg.find(ike.NotifyPayload):
        if n.notify_type == ike.NotifyType.INVALID_KE_PAYLOAD and len(n.data) == 2:
            return int.from_bytes(n.data, "big")
    return None


_MAX_ROUNDS = 4


def _negotiate(bus: _Bus, ue: _Ue, responder: EpdgResponder, src: str = UE) -> tuple[Optional[int], Optional[str]]:
    """Drive SA_INIT rounds between *ue* and the ePDG; returns (group, failure)."""
    for _ in range(_MAX_ROUNDS):
        request = bus.send(src, EPDG, ue.sa_init())
        reply = responder.respond(request)
        if reply is None:
            bus.action(EPDG, "no response")
            return None, "no response from ePDG"
        ke = reply.first(ike.KePayload)
        if ke is not None:
            bus.action(EPDG, f"accepts KE_DH{ke.group} (IKE_SA_INIT response)")
            return ke.group, None
        wanted = _invalid_ke_group(reply)
        if wanted is None:
            reply = bus.send(EPDG, UE, reply)
            return None, f"ePDG rejected proposal ({ike.describe(reply)})"
        bus.send(EPDG, UE, reply)
        refusal = ue.on_invalid_ke(wanted)
        if refusal:
            bus.action(UE, f"refuses INVALID_KE: {refusal}")
            return None, refusal
    return None, "negotiation did not converge"


def run_handshake(ue: UePolicy, epdg: EpdgPolicy, attacker: Optional[AttackerModel] = None,
                  seed: int = 0) -> Transcript:
    """Plain IKE_SA_INIT negotiation; a present attacker stays passive."""
    rng = random.Random(seed)
    t = Transcript()
    bus = _Bus(t)
    group, failure = _negotiate(bus, _Ue(ue, rng), EpdgResponder(epdg, rng))
    if failure:
        reason = "no common group" if not (set(ue.offered_groups) & epdg.supported_groups) else failure
        t.outcome = Outcome("handshake-failed", reason=reason)
        return t
    t.negotiated_group = group
    t.outcome = Outcome("success", group)
    return t


def attack_invalid_ke_pivot(ue: UePolicy, epdg: EpdgPolicy, attacker: Optional[AttackerModel],
                            target_group: int, seed: int = 0) -> Transcript:
    """Drop the first SA_INIT and answer it with a forged INVALID_KE(target_group)."""
    rng = random.Random(seed)
    t = Transcript()
    if attacker is None or not (attacker.can_drop and attacker.can_inject):
        t.outcome = Outcome("attack-failed", reason="no on-path attacker")
        return t
    bus = _Bus(t)
    client = _Ue(ue, rng)
    first = bus.send(UE, MITM, client.sa_init())
    bus.action(MITM, "drops SA_INIT")
    forged = ike.build_response(first, [ike.invalid_ke_notify(target_group)])
    bus.send(MITM, UE, forged)
    refusal = client.on_invalid_ke(target_group)
    if refusal:
        bus.action(UE, f"refuses INVALID_KE: {refusal}")
        t.outcome = Outcome("attack-failed", reason=refusal)
        return t
    group, failure = _negotiate(bus, client, EpdgResponder(epdg, rng))
    # a server steering even lower than the forged group still completes the downgrade
    if failure or strength(group) > strength(target_group):
        t.negotiated_group = group
        t.outcome = Outcome("attack-failed", reason=failure or f"ePDG settled on DH{group}")
        return t
    t.negotiated_group = group
    t.outcome = Outcome("downgraded", group)
    return t


def rekey_takeover(ue: UePolicy, epdg: EpdgPolicy, attacker: AttackerModel,
                   schedule: Schedule = Schedule(), seed: int = 0) -> Transcript:
    """Crack the IKE SA, then hijack the next IKE and CHILD_SA rekeys.

    Rekeying is modeled as a fresh unauthenticated DH exchange per side; the
    IKE SA is rekeyed when its hard lifetime ends, unless
    ``schedule.premature_rekey`` lets the attacker trigger it right after
    recovering the key.
    """
    if schedule.pivot_group is not None:
        t = attack_invalid_ke_pivot(ue, epdg, attacker, schedule.pivot_group, seed)
        if t.outcome.kind != "downgraded":
            return t
    else:
        t = run_handshake(ue, epdg, attacker, seed)
        if t.outcome.kind != "success":
            return t
    group = t.negotiated_group
    if not attacker.can_break(group):
        raise PreconditionError(
            f"attacker breaks up to DH{attacker.crack_capability}, negotiated DH{group}")
    t.notes.append("rekeying modeled as fresh unauthenticated DH exchanges (CREATE_CHILD_SA "
                   "contents shown in clear)")
    rng = random.Random(seed + 1)
    bus = _Bus(t)
    bus.action(UE, "EAP-AKA authentication completes (IKE_AUTH)", kind="auth")
    bus.action(UE, "CHILD_SA (L2) keyed from the IKE SA")
    lifetime = ue.rekey_hard_s
    crack_at = attacker.crack_latency_s
    if crack_at >= lifetime:
        bus.now = lifetime
        bus.action(UE, f"IKE SA rekeyed at end of lifetime; DH{group} key still uncracked")
        t.outcome = Outcome("attack-failed", group, "key rotated first")
        return t
    bus.now = crack_at
    bus.action(MITM, f"recovers DH{group} session key of the IKE SA")
    layers = {"L1"}
    if schedule.premature_rekey:
        t.notes.append("speculative: attacker-triggered premature rekey was not tested in practice")
        rekey_at = crack_at
    else:
        rekey_at = lifetime
    bus.now = rekey_at
    _split_rekey(bus, rng, group, "IKE SA (L1)")
    if epdg.reauth_on_rekey:
        bus.action(EPDG, "re-authenticates peer on rekey", kind="auth")
        t.layers_compromised = frozenset(layers)
        t.outcome = Outcome("attack-failed", group, "re-authentication on rekey")
        return t
    period = schedule.l2_rekey_period_s or lifetime
    l2_at = max(rekey_at, period * -(-rekey_at // period))
    bus.now = l2_at
    _split_rekey(bus, rng, group, "CHILD_SA (L2)")
    auths = [e for e in t.events if e.kind == "auth" and crack_at < e.t <= l2_at]
    if not auths:
        layers.add("L2")
    if ue.sip_encryption_required or epdg.enforce_sip_encryption:
        bus.action(UE, "SIP (L3) protected: encryption enforced")
    else:
        bus.action(MITM, "SIP (L3) runs unencrypted inside the hijacked tunnel")
        layers.add("L3")
    t.layers_compromised = frozenset(layers)
    t.outcome = Outcome("success", group)
    return t


def _split_rekey(bus: _Bus, rng: random.Random, group: int, what: str) -> None:
    bus.action(MITM, f"{what} rekey: separate DH exchanges with UE and ePDG")
    grp_ok = group in ike.MODP_KE_LENGTH
    for peer in (UE, EPDG):
        public = dh.gen_keypair(dh.group_params(group), rng).public if grp_ok else bytes(
            ike.ECP_KE_LENGTH.get(group, 32))
        spi = rng.getrandbits(64).to_bytes(8, "big")
        msg = ike.IkeMessage.create(
            ike.IkeHeader(spi, exchange_type=ike.ExchangeType.CREATE_CHILD_SA, message_id=2),
            (ike.SaPayload((ike.ike_proposal([group]),)),
             ike.KePayload(group, ike.ke_bytes(group, public)),
             ike.NoncePayload(rng.getrandbits(256).to_bytes(32, "big"))))
        bus.send(MITM, peer, msg)


@dataclass(frozen=True)
class Feasibility:
    feasible: bool
    reason: str

    def __bool__(self) -> bool:
        return self.feasible


def downgrade_feasibility(ue: UePolicy, tolerance: ToleranceResult) -> Feasibility:
    """Decide whether an INVALID_KE pivot can work against this UE/server pair."""
    if ue.invalid_ke_rule is InvalidKeRule.REJECT_ALL:
        return Feasibility(False, "client does not act on INVALID_KE")
    any_group = ue.invalid_ke_rule is InvalidKeRule.ANY_GROUP
    if len(ue.offered_groups) < 2 and not any_group:
        return Feasibility(False, "client announces a single DH group")
    reachable = weakest(ue.offered_groups) if not any_group else 1
    if tolerance.kind == ToleranceResult.TOLERATED:
        return Feasibility(True, f"server tolerates weak client preference; pivot to DH{reachable}")
    if tolerance.kind == ToleranceResult.DOWNGRADE and tolerance.group is not None:
        if any_group or tolerance.group in ue.offered_groups:
            return Feasibility(True, f"server itself steers to DH{tolerance.group}")
        return Feasibility(False, f"server steers to DH{tolerance.group}, which the client never offers")
    if tolerance.kind == ToleranceResult.UPGRADE:
        return Feasibility(False, f"server requests an upgrade to DH{tolerance.group}")
    return Feasibility(False, "server answers weak preferences with an error")


# -- scenario files ---------------------------------------------------------


@dataclass
class Scenario:
    name: str
    operation: str  # "handshake" | "pivot" | "rekey_takeover"
    ue: UePolicy
    epdg: EpdgPolicy
    attacker: Optional[AttackerModel] = None
    target_group: Optional[int] = None
    schedule: Schedule = Schedule()
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(d.get("name", "scenario"), d["operation"], UePolicy.from_dict(d["ue"]),
                   EpdgPolicy.from_dict(d["epdg"]), AttackerModel.from_dict(d.get("attacker")),
                   d.get("target_group"), Schedule.from_dict(d.get("schedule")), int(d.get("seed", 0)))

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def run(self) -> Transcript:
        if self.operation == "handshake":
            return run_handshake(self.ue, self.epdg, self.attacker, self.seed)
        if self.operation == "pivot":
            if self.target_group is None:
                raise ValueError("pivot scenario needs target_group")
            return attack_invalid_ke_pivot(self.ue, self.epdg, self.attacker, self.target_group, self.seed)
        if self.operation == "rekey_takeover":
            if self.attacker is None:
                raise ValueError("rekey_takeover scenario needs an attacker")
            return rekey_takeover(self.ue, self.epdg, self.attacker, self.schedule, self.seed)
        raise ValueError(f"unknown operation {self.operation!r}")


def with_changes(scenario: Scenario, **changes) -> Scenario:
    """Copy of *scenario* with fields of its ue/epdg/attacker replaced.

    Keys are ``ue__field``, ``epdg__field`` or ``attacker__field``.
    """
    parts = {"ue": scenario.ue, "epdg": scenario.epdg, "attacker": scenario.attacker}
    for key, value in changes.items():
        owner, _, name = key.partition("__")
        parts[owner] = replace(parts[owner], **{name: value})
    return replace(scenario, **parts)

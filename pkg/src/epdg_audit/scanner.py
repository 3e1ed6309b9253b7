"""Active ePDG probing: capability survey, weak-preference test, key collection.

Every probe sends a single IKE_SA_INIT and classifies the first parseable
answer. Probes to one target are strictly sequential and paced by
``ProbeConfig.inter_probe_delay_ms``; parallelism only ever spans targets.
"""

from __future__ import annotations

import ipaddress
import logging
import random
import secrets
import socket
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, TypeVar, Union

from . import SCHEMA_VERSION
from . import dh_engine as dh
from . import ike_codec as ike
from .discovery import EpdgTarget
from .key_analysis import KeyObservation
from .policy import strength

log = logging.getLogger(__name__)

ALL_MODP = ike.MODP_GROUPS
ALL_GROUPS = ike.MODP_GROUPS + ike.ECP_GROUPS
_RFC1918 = tuple(ipaddress.ip_network(n) for n in ("10.0.0.0/8", "172.16.0.0/12", "192.168.0.0/16"))


class ScannerError(Exception):
    pass


class TransportFailure(ScannerError):
    pass


def is_permitted_target(address: str) -> bool:
    """Loopback and RFC 1918 space may be probed without explicit authorization."""
    ip = ipaddress.ip_address(address)
    return ip.is_loopback or (ip.version == 4 and any(ip in net for net in _RFC1918))


@dataclass
class ProbeConfig:
    port: int = 500
    non_esp_marker: Optional[bool] = None  # None: use the marker on port 4500
    timeout_ms: int = 5000
    retries: int = 1
    inter_probe_delay_ms: int = 500
    capture_dir: Optional[Path] = None
    workers: int = 8
    rng: Optional[random.Random] = field(default=None, repr=False)

    def marker_for(self, port: int) -> bool:
        return port == 4500 if self.non_esp_marker is None else self.non_esp_marker


# -- outcomes ---------------------------------------------------------------


@dataclass(frozen=True)
class Accepted:
    group: int
    server_pubkey: bytes
    server_nonce: bytes
    flags: tuple[str, ...] = ()
    kind = "accepted"


@dataclass(frozen=True)
class SwitchProposed:
    from_group: int
    to_group: int
    kind = "switch-proposed"

    def __post_init__(self):
        if self.from_group == self.to_group:
            raise ValueError("a switch must name a different group")


@dataclass(frozen=True)
class ErrorNotify:
    notify_type: int
    kind = "error-notify"


@dataclass(frozen=True)
class Ignored:
    timeout_ms: int
    kind = "ignored"


@dataclass(frozen=True)
class TransportError:
    detail: str
    kind = "transport-error"


ProbeOutcome = Union[Accepted, SwitchProposed, ErrorNotify, Ignored, TransportError]


def outcome_to_dict(o: ProbeOutcome) -> dict:
    d: dict = {"kind": o.kind}
    if isinstance(o, Accepted):
        d.update(group=o.group, server_pubkey=o.server_pubkey.hex(),
                 server_nonce=o.server_nonce.hex())
        if o.flags:
            d["flags"] = list(o.flags)
    elif isinstance(o, SwitchProposed):
        d.update({"from": o.from_group, "to": o.to_group})
    elif isinstance(o, ErrorNotify):
        d["notify_type"] = o.notify_type
    elif isinstance(o, Ignored):
        d["timeout_ms"] = o.timeout_ms
    else:
        d["detail"] = o.detail
    return d


def _accept_flags(requested: int, ke: ike.KePayload) -> tuple[str, ...]:
    flags = []
    if ke.group != requested:
        flags.append("group-mismatch")
    if ke.group in ike.ECP_KE_LENGTH:
        flags.append("unverified-keyshare")
    elif ke.group in ike.MODP_KE_LENGTH:
        grp = dh.group_params(ke.group)
        if len(ke.data) != grp.size:
            flags.append("ke-length-mismatch")
        value = int.from_bytes(ke.data, "big")
        if dh.is_degenerate(grp, value):
            flags.append("peer-value-p-minus-1")
        elif not 1 < value < grp.p:
            flags.append("invalid-peer-value")
    return tuple(flags)


def classify_response(raw: bytes, request: ike.IkeMessage,
                      non_esp_marker: bool = False) -> ProbeOutcome:
    """Map any received octets to exactly one outcome.

    Undecodable or unrelated datagrams become :class:`TransportError`; the
    probe loop keeps waiting past those.
    """
    try:
        msg = ike.decode(raw, non_esp_marker)
    except ike.CodecError as exc:
        return TransportError(f"malformed response: {exc}")
    if msg.header.initiator_spi != request.header.initiator_spi:
        return TransportError("unrelated response: initiator SPI mismatch")
    if not msg.header.is_response:
        return TransportError("unrelated datagram: response flag not set")
    sent = request.first(ike.KePayload)
    requested = sent.group if sent is not None else 0
    notifies = msg.find(ike.NotifyPayload)
    for n in notifies:
        if n.notify_type == ike.NotifyType.INVALID_KE_PAYLOAD:
            if len(n.data) == 2:
                proposed = int.from_bytes(n.data, "big")
                if proposed != requested:
                    return SwitchProposed(requested, proposed)
            return ErrorNotify(n.notify_type)
    errors = [n for n in notifies if n.is_error]
    if errors:
        return ErrorNotify(errors[0].notify_type)
    ke = msg.first(ike.KePayload)
    if ke is not None:
        nonce = msg.first(ike.NoncePayload)
        return Accepted(ke.group, ke.data, nonce.data if nonce else b"",
                        _accept_flags(requested, ke))
    if notifies:
        return ErrorNotify(notifies[0].notify_type)
    return TransportError("response carries neither KE nor notify")


# -- transport --------------------------------------------------------------


class TargetSession:
    """One UDP association to a target, pacing consecutive sends."""

    def __init__(self, target: EpdgTarget, cfg: ProbeConfig,
                 sleep: Callable[[float], None] = time.sleep):
        self.target = target
        self.cfg = cfg
        self.port = target.port or cfg.port
        self.marker = cfg.marker_for(self.port)
        self._sleep = sleep
        self._last_send: Optional[float] = None
        self._sock: Optional[socket.socket] = None
        self.address = target.addresses[0] if target.addresses else None

    def _socket(self) -> socket.socket:
        if self._sock is None:
            if self.address is None:
                raise OSError("target has no addresses")
            family = socket.AF_INET6 if ":" in self.address else socket.AF_INET
            sock = socket.socket(family, socket.SOCK_DGRAM)
            sock.connect((self.address, self.port))
            self._sock = sock
        return self._sock

    def pace(self) -> None:
        if self._last_send is not None:
            wait = self._last_send + self.cfg.inter_probe_delay_ms / 1000 - time.monotonic()
            if wait > 0:
                self._sleep(wait)

    def send(self, data: bytes) -> None:
        self.pace()
        self._socket().send(data)
        self._last_send = time.monotonic()

    def receive(self, deadline: float) -> Optional[bytes]:
        sock = self._socket()
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return None
        sock.settimeout(remaining)
        try:
            return sock.recv(65535)
        except socket.timeout:
            return None

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _capture(cfg: ProbeConfig, target: EpdgTarget, label: str, data: bytes) -> None:
    if cfg.capture_dir is None:
        return
    cfg.capture_dir.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%f")
    path = cfg.capture_dir / f"{target.plmn}_{stamp}_{label}.hex"
    path.write_text(data.hex() + "\n")


def _client_key(group: int, rng) -> tuple[Union[int, bytes], Optional[dh.DhKeyPair]]:
    if group in ike.MODP_KE_LENGTH:
        pair = dh.gen_keypair(dh.group_params(group), rng)
        return pair.public, pair
    n = ike.ECP_KE_LENGTH[group]
    data = rng.getrandbits(8 * n).to_bytes(n, "big") if rng else secrets.token_bytes(n)
    return data, None


def exchange(session: TargetSession, request: ike.IkeMessage, label: str = "") -> ProbeOutcome:
    """Send *request* (with retries) and classify the first parseable answer."""
    cfg = session.cfg
    raw = ike.encode(request, session.marker)
    malformed: Optional[TransportError] = None
    try:
        for attempt in range(1 + max(cfg.retries, 0)):
            session.send(raw)
            _capture(cfg, session.target, f"{label}req{attempt}", raw)
            deadline = time.monotonic() + cfg.timeout_ms / 1000
            while True:
                data = session.receive(deadline)
                if data is None:
                    break
                _capture(cfg, session.target, f"{label}resp{attempt}", data)
                outcome = classify_response(data, request, session.marker)
                if isinstance(outcome, TransportError):
                    malformed = outcome
                    continue
                return outcome
    except OSError as exc:
        return TransportError(f"{type(exc).__name__}: {exc}")
    return malformed or Ignored(cfg.timeout_ms)


def sa_init_request(offered: Sequence[int], ke_group: int, cfg: ProbeConfig):
    public, pair = _client_key(ke_group, cfg.rng)
    spec = ike.ClientProposalSpec(list(offered), ke_group, public, rng=cfg.rng)
    return ike.build_sa_init(spec), pair


def probe_group(target: EpdgTarget, group: int, cfg: ProbeConfig,
                session: Optional[TargetSession] = None) -> ProbeOutcome:
    """Offer exactly one group and report how the server reacts."""
    if group not in ike.KE_LENGTH:
        raise ValueError(f"cannot probe unknown group {group}")
    request, _ = sa_init_request([group], group, cfg)
    if session is not None:
        return exchange(session, request, f"dh{group}_")
    with TargetSession(target, cfg) as own:
        return exchange(own, request, f"dh{group}_")


# -- survey -----------------------------------------------------------------


def _canonical(groups: Iterable[int]) -> list[int]:
    return sorted(set(groups), key=lambda g: (g not in ALL_MODP, strength(g), g))


def support_label(per_group: dict[int, ProbeOutcome]) -> str:
    """Render the accepted groups, e.g. ``DH1+DH2`` or ``DH2–DH18``.

    Runs of three or more consecutive MODP groups collapse into a range.
    """
    accepted = _canonical(g for g, o in per_group.items() if isinstance(o, Accepted))
    if not accepted:
        return "none"
    parts: list[str] = []
    modp = [g for g in accepted if g in ALL_MODP]
    run: list[int] = []
    for g in modp:
        if run and ALL_MODP.index(g) != ALL_MODP.index(run[-1]) + 1:
            parts.append(_render_run(run))
            run = []
        run.append(g)
    if run:
        parts.append(_render_run(run))
    parts += [f"DH{g}" for g in accepted if g not in ALL_MODP]
    return "+".join(parts)


def _render_run(run: list[int]) -> str:
    if len(run) >= 3:
        return f"DH{run[0]}–DH{run[-1]}"
    return "+".join(f"DH{g}" for g in run)


def _now() -> datetime:
    return datetime.now(timezone.utc)


def _iso(ts: datetime) -> str:
    return ts.isoformat().replace("+00:00", "Z")


@dataclass
class SurveyResult:
    target: EpdgTarget
    per_group: dict[int, ProbeOutcome]
    support_label: str
    started_at: datetime
    finished_at: datetime

    @property
    def supported(self) -> list[int]:
        return _canonical(g for g, o in self.per_group.items() if isinstance(o, Accepted))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "record": "survey",
            "target": self.target.to_dict(),
            "per_group": {str(g): outcome_to_dict(o) for g, o in self.per_group.items()},
            "support_label": self.support_label,
            "started_at": _iso(self.started_at),
            "finished_at": _iso(self.finished_at),
        }


def survey(target: EpdgTarget, groups: Sequence[int], cfg: ProbeConfig) -> SurveyResult:
    if not groups:
        raise ValueError("survey needs at least one group")
    started = _now()
    per_group: dict[int, ProbeOutcome] = {}
    with TargetSession(target, cfg) as session:
        for g in groups:
            per_group[g] = probe_group(target, g, cfg, session)
    return SurveyResult(target, per_group, support_label(per_group), started, _now())


def survey_counts(results: Iterable[SurveyResult]) -> dict[int, int]:
    """Number of targets accepting each group."""
    counts: dict[int, int] = {}
    for r in results:
        for g, o in r.per_group.items():
            counts.setdefault(g, 0)
            if isinstance(o, Accepted):
                counts[g] += 1
    return counts


# -- weak-preference tolerance ---------------------------------------------


@dataclass(frozen=True)
class ToleranceResult:
    kind: str  # "tolerated" | "upgrade-requested" | "downgrade-indicated" | "error"
    group: Optional[int] = None
    detail: Optional[str] = None

    TOLERATED = "tolerated"
    UPGRADE = "upgrade-requested"
    DOWNGRADE = "downgrade-indicated"
    ERROR = "error"

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.group is not None:
            d["group"] = self.group
        if self.detail:
            d["detail"] = self.detail
        return d


WEAK_PREFERENCE_GROUP = 2


def tolerance_from_outcome(outcome: ProbeOutcome, preferred: int = WEAK_PREFERENCE_GROUP
                           ) -> ToleranceResult:
    if isinstance(outcome, TransportError):
        raise TransportFailure(outcome.detail)
    if isinstance(outcome, Accepted):
        return ToleranceResult(ToleranceResult.TOLERATED, outcome.group)
    if isinstance(outcome, SwitchProposed):
        if strength(outcome.to_group) > strength(preferred):
            return ToleranceResult(ToleranceResult.UPGRADE, outcome.to_group)
        if 0 <= strength(outcome.to_group) < strength(preferred):
            return ToleranceResult(ToleranceResult.DOWNGRADE, outcome.to_group)
        return ToleranceResult(ToleranceResult.ERROR, outcome.to_group, "switch to unranked group")
    if isinstance(outcome, ErrorNotify):
        return ToleranceResult(ToleranceResult.ERROR, detail=f"notify {outcome.notify_type}")
    return ToleranceResult(ToleranceResult.ERROR, detail=f"ignored after {outcome.timeout_ms} ms")


def weak_preference_test(target: EpdgTarget, cfg: ProbeConfig) -> ToleranceResult:
    """Offer every MODP group but send the KE for DH2.

    Raises :class:`TransportFailure` when the target cannot be reached.
    """
    request, _ = sa_init_request(ALL_MODP, WEAK_PREFERENCE_GROUP, cfg)
    with TargetSession(target, cfg) as session:
        outcome = exchange(session, request, "weakpref_")
    return tolerance_from_outcome(outcome)


# -- key collection ---------------------------------------------------------


class KeyCollection(list):
    """Observations from accepted handshakes; ``gaps`` holds the other outcomes."""

    def __init__(self, observations=(), gaps=()):
        super().__init__(observations)
        self.gaps: list[ProbeOutcome] = list(gaps)


def collect_keys(target: EpdgTarget, group: int, n: int, cfg: ProbeConfig,
                 operator: Optional[str] = None) -> KeyCollection:
    """Run *n* independent handshakes and fingerprint each served key."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if group not in ike.MODP_KE_LENGTH:
        raise ValueError("key collection needs a MODP group")
    grp = dh.group_params(group)
    operator = operator or str(target.plmn)
    out = KeyCollection()
    with TargetSession(target, cfg) as session:
        for _ in range(n):
            outcome = probe_group(target, group, cfg, session)
            if isinstance(outcome, Accepted) and outcome.group == group:
                value = int.from_bytes(outcome.server_pubkey, "big")
                fp = dh.fingerprint_bytes(value.to_bytes(max(grp.size, len(outcome.server_pubkey)), "big"))
                out.append(KeyObservation(
                    operator, session.address or "", group, fp,
                    dh.fingerprint_bytes(outcome.server_nonce), _now(), outcome.flags))
            else:
                out.gaps.append(outcome)
    return out


T = TypeVar("T")


def run_parallel(targets: Sequence[EpdgTarget], fn: Callable[[EpdgTarget], T],
                 workers: int = 8) -> list[T]:
    """Apply *fn* to each target on a bounded pool; results keep input order."""
    if workers <= 1 or len(targets) <= 1:
        return [fn(t) for t in targets]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, targets))

"""Mock ePDG servers speaking IKE_SA_INIT over real UDP sockets."""

from __future__ import annotations

import ipaddress
import json
import logging
import random
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

from . import ike_codec as ike
from .discovery import EpdgTarget, PlmnId, epdg_fqdn
from .policy import EpdgPolicy, EpdgResponder, StaticPool
from .scanner import is_permitted_target

log = logging.getLogger(__name__)


class FleetError(Exception):
    pass


class AddressInUse(FleetError):
    pass


def _split_listen(listen: str) -> tuple[str, int]:
    host, _, port = listen.rpartition(":")
    host = host.strip("[]") or "127.0.0.1"
    return host, int(port or 0)


class MockEpdg:
    """A single listener answering SA_INIT datagrams per its policy.

    Receive timestamps are kept (bounded) so tests can verify probe pacing.
    """

    def __init__(self, policy: EpdgPolicy, listen: str = "127.0.0.1:0", seed: Optional[int] = None,
                 plmn: Optional[PlmnId] = None, non_esp_marker: bool = False):
        host, port = _split_listen(listen)
        if not is_permitted_target(host):
            raise FleetError(f"refusing to bind non-loopback/non-RFC1918 address {host}")
        self.plmn = plmn
        self.policy = policy
        self.non_esp_marker = non_esp_marker
        self.responder = EpdgResponder(policy, random.Random(seed))
        self.received_at: deque[float] = deque(maxlen=100_000)
        family = socket.AF_INET6 if ":" in host else socket.AF_INET
        self._sock = socket.socket(family, socket.SOCK_DGRAM)
        try:
            self._sock.bind((host, port))
        except OSError as exc:
            self._sock.close()
            raise AddressInUse(f"{host}:{port}: {exc}") from exc
        self.host, self.port = self._sock.getsockname()[:2]
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def handle(self, data: bytes) -> Optional[bytes]:
        try:
            request = ike.decode(data, self.non_esp_marker)
        except ike.CodecError:
            return None
        if request.header.is_response or request.header.exchange_type != ike.ExchangeType.IKE_SA_INIT:
            return None
        reply = self.responder.respond(request)
        return None if reply is None else ike.encode(reply, self.non_esp_marker)

    def serve_forever(self) -> None:
        self._sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                data, peer = self._sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                break
            self.received_at.append(time.monotonic())
            reply = self.handle(data)
            if reply is not None:
                try:
                    self._sock.sendto(reply, peer)
                except OSError as exc:
                    log.debug("send to %s failed: %s", peer, exc)

    def start(self) -> "MockEpdg":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True,
                                        name=f"mock-epdg-{self.port}")
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2)
        self._sock.close()

    def target(self) -> EpdgTarget:
        plmn = self.plmn or PlmnId("001", "01")
        return EpdgTarget(plmn, epdg_fqdn(plmn), (self.host,), None, self.port, "mock")

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


@dataclass
class FleetOperator:
    plmn: PlmnId
    policy: EpdgPolicy
    listen: str = "127.0.0.1:0"


@dataclass
class MockFleetSpec:
    operators: list[FleetOperator]
    shared_key_pool: tuple[int, ...] = ()
    pool_members: Optional[list[str]] = None  # None: every operator
    seed: int = 0

    def __post_init__(self):
        fixed = [o.listen for o in self.operators if _split_listen(o.listen)[1] != 0]
        if len(fixed) != len(set(fixed)):
            raise FleetError("listen addresses must be unique")
        names = {str(o.plmn) for o in self.operators}
        if self.pool_members is not None and not set(self.pool_members) <= names:
            raise FleetError("shared_key_pool operators must be fleet members")

    def effective_policies(self) -> list[FleetOperator]:
        if not self.shared_key_pool:
            return list(self.operators)
        members = set(self.pool_members) if self.pool_members is not None else None
        out = []
        for op in self.operators:
            if members is None or str(op.plmn) in members:
                op = replace(op, policy=replace(op.policy, key_mode=StaticPool(self.shared_key_pool)))
            out.append(op)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MockFleetSpec":
        ops = [FleetOperator(PlmnId.parse(o["plmn"]), EpdgPolicy.from_dict(o["policy"]),
                             o.get("listen", "127.0.0.1:0"))
               for o in d["operators"]]
        pool = d.get("shared_key_pool") or {}
        exps: tuple[int, ...] = ()
        if "exponents" in pool:
            exps = tuple(int(x, 0) if isinstance(x, str) else int(x) for x in pool["exponents"])
        elif "size" in pool:
            exps = make_exponent_pool(int(pool["size"]), int(pool.get("seed", 0)))
        return cls(ops, exps, pool.get("operators"), int(d.get("seed", 0)))

    @classmethod
    def load(cls, path) -> "MockFleetSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def make_exponent_pool(size: int, seed: int = 0, bits: int = 760) -> tuple[int, ...]:
    """Deterministic private exponents valid in every MODP group (< 2^bits)."""
    rng = random.Random(seed)
    pool: list[int] = []
    while len(pool) < size:
        a = rng.getrandbits(bits) | (1 << (bits - 1))
        if a not in pool:
            pool.append(a)
    return tuple(pool)


class MockFleet:
    def __init__(self, spec: MockFleetSpec):
        self.spec = spec
        self.servers: list[MockEpdg] = []

    def start(self) -> "MockFleet":
        try:
            for i, op in enumerate(self.spec.effective_policies()):
                server = MockEpdg(op.policy, op.listen, seed=self.spec.seed * 100_003 + i, plmn=op.plmn)
                self.servers.append(server.start())
        except Exception:
            self.stop()
            raise
        return self

    def stop(self) -> None:
        for s in self.servers:
            s.stop()

    def targets(self) -> list[EpdgTarget]:
        return [s.target() for s in self.servers]

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def fleet_from_policies(policies: Sequence[EpdgPolicy], plmns: Optional[Iterable[PlmnId]] = None,
                        **kw) -> MockFleetSpec:
    plmns = list(plmns) if plmns is not None else [PlmnId("001", f"{i:03d}") for i in range(len(policies))]
    return MockFleetSpec([FleetOperator(p, pol) for p, pol in zip(plmns, policies)], **kw)

"""ePDG endpoint discovery: operator codes to FQDNs to addresses."""

from __future__ import annotations

import csv
import ipaddress
import json
import socket
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Mapping, Optional, Protocol, Sequence

EPDG_TEMPLATE = "epdg.epc.mnc{mnc}.mcc{mcc}.pub.3gppnetwork.org"


class DiscoveryError(Exception):
    pass


class InvalidPlmn(DiscoveryError, ValueError):
    pass


class ResolverUnavailable(DiscoveryError):
    pass


@dataclass(frozen=True, order=True)
class PlmnId:
    mcc: str
    mnc: str

    def __post_init__(self):
        if not (self.mcc.isdigit() and self.mcc.isascii() and len(self.mcc) == 3):
            raise InvalidPlmn(f"MCC must be 3 digits, got {self.mcc!r}")
        if not (self.mnc.isdigit() and self.mnc.isascii() and len(self.mnc) in (2, 3)):
            raise InvalidPlmn(f"MNC must be 2 or 3 digits, got {self.mnc!r}")

    @classmethod
    def parse(cls, text: str) -> "PlmnId":
        """Parse ``"232-05"`` (also accepts ``/``, ``,`` or whitespace)."""
        for sep in ("-", "/", ",", " "):
            if sep in text.strip():
                mcc, mnc = (x.strip() for x in text.strip().split(sep, 1))
                return cls(mcc, mnc)
        raise InvalidPlmn(f"cannot parse PLMN {text!r}")

    def __str__(self) -> str:
        return f"{self.mcc}-{self.mnc}"


def epdg_fqdn(plmn: PlmnId) -> str:
    return EPDG_TEMPLATE.format(mnc=plmn.mnc.zfill(3), mcc=plmn.mcc)


def _expand(spec: str, min_width: int) -> list[str]:
    spec = str(spec).strip()
    if "-" in spec:
        lo, hi = (x.strip() for x in spec.split("-", 1))
    else:
        lo = hi = spec
    if not (lo.isdigit() and hi.isdigit()) or int(lo) > int(hi):
        raise InvalidPlmn(f"bad code range {spec!r}")
    width = max(len(lo), min_width)
    return [str(v).zfill(width) for v in range(int(lo), int(hi) + 1)]


def enumerate_plmns(ranges: Iterable[tuple[str, str]]) -> list[PlmnId]:
    """Expand ``(mcc-spec, mnc-spec)`` pairs such as ``("232", "00-10")``.

    The zero-padding width of each MNC comes from the range's lower bound,
    so ``"00-10"`` yields two-digit codes.
    """
    seen: dict[PlmnId, None] = {}
    for mcc_spec, mnc_spec in ranges:
        for mcc in _expand(mcc_spec, 3):
            for mnc in _expand(mnc_spec, 2):
                seen.setdefault(PlmnId(mcc, mnc))
    return sorted(seen)


def read_plmn_file(path) -> list[PlmnId]:
    """Read a CSV of ``mcc,mnc`` rows (an optional header row is skipped)."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            cells = [c.strip() for c in row if c.strip()]
            if not cells or cells[0].startswith("#"):
                continue
            if len(cells) == 1:
                out.append(PlmnId.parse(cells[0]))
            elif cells[0].isdigit():
                out.append(PlmnId(cells[0], cells[1]))
    return list(dict.fromkeys(out))


class Resolver(Protocol):
    def lookup(self, name: str, family: str) -> list[str]:
        """Return addresses for *family* ``"A"``/``"AAAA"``; [] on NXDOMAIN/NODATA.

        Transport failures raise :class:`ResolverUnavailable`.
        """


class SystemResolver:
    """Resolver backed by the host's stub resolver via ``getaddrinfo``."""

    _FAMILIES = {"A": socket.AF_INET, "AAAA": socket.AF_INET6}
    _ABSENT = {getattr(socket, n) for n in ("EAI_NONAME", "EAI_NODATA", "EAI_ADDRFAMILY")
               if hasattr(socket, n)}

    def lookup(self, name: str, family: str) -> list[str]:
        try:
            infos = socket.getaddrinfo(name, None, self._FAMILIES[family], socket.SOCK_DGRAM)
        except socket.gaierror as exc:
            if exc.errno in self._ABSENT:
                return []
            raise ResolverUnavailable(f"{name}: {exc}") from exc
        return [info[4][0] for info in infos]


class UpstreamResolver:
    """Resolver that queries explicit upstream servers (needs ``dnspython``)."""

    def __init__(self, nameservers: Sequence[str], timeout: float = 5.0):
        try:
            import dns.resolver
        except ImportError as exc:
            raise DiscoveryError("upstream resolution requires the 'dns' extra (dnspython)") from exc
        self._dns = dns
        self._resolver = dns.resolver.Resolver(configure=False)
        self._resolver.nameservers = list(nameservers)
        self._resolver.lifetime = timeout

    def lookup(self, name: str, family: str) -> list[str]:
        dns = self._dns
        try:
            answer = self._resolver.resolve(name, family)
        except (dns.resolver.NXDOMAIN, dns.resolver.NoAnswer):
            return []
        except (dns.resolver.LifetimeTimeout, dns.resolver.NoNameservers) as exc:
            raise ResolverUnavailable(f"{name}: {exc}") from exc
        return [r.to_text() for r in answer]


class StubResolver:
    """Fixed answers for tests: ``{name: {"A": [...], "AAAA": [...]}}``.

    A name mapped to ``None`` simulates a resolver transport failure.
    """

    def __init__(self, records: Mapping[str, Optional[Mapping[str, Sequence[str]]]]):
        self.records = records

    def lookup(self, name: str, family: str) -> list[str]:
        if name in self.records and self.records[name] is None:
            raise ResolverUnavailable(f"{name}: timeout")
        return list((self.records.get(name) or {}).get(family, ()))


@dataclass(frozen=True)
class EpdgTarget:
    plmn: PlmnId
    fqdn: str
    addresses: tuple[str, ...] = ()
    resolved_at: Optional[datetime] = None
    port: Optional[int] = None
    vantage: Optional[str] = None

    def to_dict(self) -> dict:
        d = {
            "plmn": str(self.plmn),
            "fqdn": self.fqdn,
            "addresses": list(self.addresses),
            "resolved_at": _iso(self.resolved_at),
        }
        if self.port is not None:
            d["port"] = self.port
        if self.vantage is not None:
            d["vantage"] = self.vantage
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EpdgTarget":
        plmn = PlmnId.parse(d["plmn"])
        ts = d.get("resolved_at")
        return cls(plmn, d.get("fqdn") or epdg_fqdn(plmn), tuple(d.get("addresses", ())),
                   datetime.fromisoformat(ts.replace("Z", "+00:00")) if ts else None,
                   d.get("port"), d.get("vantage"))


def _iso(ts: Optional[datetime]) -> Optional[str]:
    if ts is None:
        return None
    return ts.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def _ordered(addresses: Iterable[str]) -> tuple[str, ...]:
    parsed = {ipaddress.ip_address(a) for a in addresses}
    v4 = sorted(a for a in parsed if a.version == 4)
    v6 = sorted(a for a in parsed if a.version == 6)
    return tuple(str(a) for a in v4 + v6)


def resolve(fqdn: str, resolver: Resolver, plmn: Optional[PlmnId] = None,
            now: Optional[datetime] = None) -> EpdgTarget:
    """Query A and AAAA for *fqdn*; an empty address list means no ePDG published."""
    if plmn is None:
        plmn = plmn_from_fqdn(fqdn)
    found = resolver.lookup(fqdn, "A") + resolver.lookup(fqdn, "AAAA")
    return EpdgTarget(plmn, fqdn, _ordered(found), now or datetime.now(timezone.utc))


def plmn_from_fqdn(fqdn: str) -> PlmnId:
    labels = fqdn.lower().split(".")
    try:
        mnc = next(x[3:] for x in labels if x.startswith("mnc"))
        mcc = next(x[3:] for x in labels if x.startswith("mcc"))
    except StopIteration:
        raise InvalidPlmn(f"no MCC/MNC labels in {fqdn!r}") from None
    return PlmnId(mcc, mnc)


def dump_targets(targets: Iterable[EpdgTarget]) -> str:
    return "".join(json.dumps(t.to_dict(), sort_keys=True) + "\n" for t in targets)


def load_targets(lines: Iterable[str]) -> list[EpdgTarget]:
    return [EpdgTarget.from_dict(json.loads(line)) for line in lines if line.strip()]


def aliases_from_shared_addresses(targets: Iterable[EpdgTarget]) -> dict[str, str]:
    """Map each PLMN to the first PLMN seen with an identical address set."""
    owner: dict[tuple[str, ...], str] = {}
    aliases = {}
    for t in sorted(targets, key=lambda t: t.plmn):
        if not t.addresses:
            continue
        key = tuple(sorted(t.addresses))
        first = owner.setdefault(key, str(t.plmn))
        if first != str(t.plmn):
            aliases[str(t.plmn)] = first
    return aliases

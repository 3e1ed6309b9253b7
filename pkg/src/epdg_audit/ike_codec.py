"""Encoder/decoder for the IKEv2 subset used by IKE_SA_INIT probing.

Only SA, KE, Nonce and Notify payloads are interpreted; every other payload
type is carried as an :class:`OpaquePayload` so that odd server responses can
still be decoded and re-encoded byte for byte.

Wire layout (RFC 7296)::

    IKE header (28 octets)
      SPIi(8) SPIr(8) next(1) version(1) exchange(1) flags(1) msgid(4) length(4)
    Generic payload header (4 octets)
      next(1) C|reserved(1) length(2)
"""

from __future__ import annotations

import dataclasses
import secrets
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence, Union

HEADER_LEN = 28
NON_ESP_MARKER = b"\x00\x00\x00\x00"
IKE_VERSION = 0x20

_HEADER = struct.Struct("!8s8sBBBBII")
_GENERIC = struct.Struct("!BBH")


class ExchangeType(IntEnum):
    IKE_SA_INIT = 34
    IKE_AUTH = 35
    CREATE_CHILD_SA = 36
    INFORMATIONAL = 37


class PayloadType(IntEnum):
    NONE = 0
    SA = 33
    KE = 34
    NONCE = 40
    NOTIFY = 41


class TransformType(IntEnum):
    ENCR = 1
    PRF = 2
    INTEG = 3
    KE = 4


class NotifyType(IntEnum):
    UNSUPPORTED_CRITICAL_PAYLOAD = 1
    INVALID_SYNTAX = 7
    NO_PROPOSAL_CHOSEN = 14
    INVALID_KE_PAYLOAD = 17
    AUTHENTICATION_FAILED = 24
    COOKIE = 16390


class Flags(IntEnum):
    INITIATOR = 0x08
    VERSION = 0x10
    RESPONSE = 0x20


PROTOCOL_IKE = 1
ATTR_KEY_LENGTH = 14

#: KE payload size in octets for MODP groups.
MODP_KE_LENGTH = {1: 96, 2: 128, 5: 192, 14: 256, 15: 384, 16: 512, 17: 768, 18: 1024}
#: Standard KE payload size in octets for the ECP groups (x || y, or u for 31).
ECP_KE_LENGTH = {19: 64, 20: 96, 21: 132, 25: 48, 26: 56, 31: 32}
KE_LENGTH = {**MODP_KE_LENGTH, **ECP_KE_LENGTH}
MODP_GROUPS = tuple(MODP_KE_LENGTH)
ECP_GROUPS = tuple(ECP_KE_LENGTH)

ENCR_AES_CBC = 12
PRF_HMAC_SHA1 = 2
PRF_HMAC_SHA2_256 = 5
INTEG_HMAC_SHA1_96 = 2
INTEG_HMAC_SHA2_256_128 = 12


class CodecError(Exception):
    pass


class InvariantViolation(CodecError):
    pass


class Truncated(CodecError):
    pass


class MalformedChain(CodecError):
    pass


class MalformedPayload(CodecError):
    pass


class EmptyProposal(CodecError):
    pass


@dataclass(frozen=True)
class IkeHeader:
    initiator_spi: bytes
    responder_spi: bytes = bytes(8)
    next_payload: int = 0
    version: int = IKE_VERSION
    exchange_type: int = ExchangeType.IKE_SA_INIT
    flags: int = Flags.INITIATOR
    message_id: int = 0
    length: int = HEADER_LEN

    @property
    def is_response(self) -> bool:
        return bool(self.flags & Flags.RESPONSE)

    @property
    def is_initiator(self) -> bool:
        return bool(self.flags & Flags.INITIATOR)


@dataclass(frozen=True)
class Transform:
    transform_type: int
    transform_id: int
    # (type, value): int values use the TV form, bytes values the TLV form
    attributes: tuple[tuple[int, Union[int, bytes]], ...] = ()


@dataclass(frozen=True)
class Proposal:
    number: int
    transforms: tuple[Transform, ...]
    protocol: int = PROTOCOL_IKE
    spi: bytes = b""

    def ids(self, transform_type: int) -> list[int]:
        return [t.transform_id for t in self.transforms if t.transform_type == transform_type]

    @property
    def ke_groups(self) -> list[int]:
        return self.ids(TransformType.KE)


@dataclass(frozen=True)
class SaPayload:
    proposals: tuple[Proposal, ...]
    critical: bool = False
    payload_type = PayloadType.SA


@dataclass(frozen=True)
class KePayload:
    group: int
    data: bytes
    critical: bool = False
    payload_type = PayloadType.KE


@dataclass(frozen=True)
class NoncePayload:
    data: bytes
    critical: bool = False
    payload_type = PayloadType.NONCE


@dataclass(frozen=True)
class NotifyPayload:
    notify_type: int
    data: bytes = b""
    protocol: int = 0
    spi: bytes = b""
    critical: bool = False
    payload_type = PayloadType.NOTIFY

    @property
    def is_error(self) -> bool:
        return self.notify_type < 16384


@dataclass(frozen=True)
class OpaquePayload:
    payload_type: int
    body: bytes
    critical: bool = False


Payload = Union[SaPayload, KePayload, NoncePayload, NotifyPayload, OpaquePayload]


@dataclass(frozen=True)
class IkeMessage:
    header: IkeHeader
    payloads: tuple[Payload, ...] = ()

    @classmethod
    def create(cls, header: IkeHeader, payloads: Sequence[Payload] = ()) -> "IkeMessage":
        """Build a message whose header chain/length fields match its payloads."""
        payloads = tuple(payloads)
        size = HEADER_LEN + sum(len(_encode_body(p)) + 4 for p in payloads)
        first = int(payloads[0].payload_type) if payloads else 0
        return cls(dataclasses.replace(header, next_payload=first, length=size), payloads)

    def find(self, kind: type) -> list:
        return [p for p in self.payloads if isinstance(p, kind)]

    def first(self, kind: type):
        found = self.find(kind)
        return found[0] if found else None


def invalid_ke_notify(group: int) -> NotifyPayload:
    return NotifyPayload(NotifyType.INVALID_KE_PAYLOAD, struct.pack("!H", group))


# -- encoding ---------------------------------------------------------------


def _encode_attribute(attr_type: int, value: Union[int, bytes]) -> bytes:
    if isinstance(value, int):
        if not 0 <= value <= 0xFFFF or not 0 <= attr_type <= 0x7FFF:
            raise InvariantViolation("TV attribute out of range")
        return struct.pack("!HH", 0x8000 | attr_type, value)
    return struct.pack("!HH", attr_type & 0x7FFF, len(value)) + value


def _encode_transform(t: Transform, last: bool) -> bytes:
    attrs = b"".join(_encode_attribute(a, v) for a, v in t.attributes)
    return struct.pack("!BBHBBH", 0 if last else 3, 0, 8 + len(attrs),
                       t.transform_type, 0, t.transform_id) + attrs


def _encode_proposal(p: Proposal, last: bool, check: bool = True) -> bytes:
    if check and p.protocol == PROTOCOL_IKE:
        present = {t.transform_type for t in p.transforms}
        missing = set(TransformType) - present
        if missing:
            raise InvariantViolation(
                f"IKE proposal {p.number} lacks transform types {sorted(int(m) for m in missing)}")
    for gid in p.ke_groups if check else ():
        if gid not in KE_LENGTH:
            raise InvariantViolation(f"unsupported KE group code {gid}")
    if check and not 1 <= p.number <= 255:
        raise InvariantViolation("proposal number must be in 1..255")
    n = len(p.transforms)
    body = p.spi + b"".join(_encode_transform(t, i == n - 1) for i, t in enumerate(p.transforms))
    return struct.pack("!BBHBBBB", 0 if last else 2, 0, 8 + len(body),
                       p.number, p.protocol, len(p.spi), n) + body


def _encode_body(p: Payload, check: bool = True) -> bytes:
    if isinstance(p, SaPayload):
        if not p.proposals:
            raise EmptyProposal("SA payload without proposals")
        n = len(p.proposals)
        return b"".join(_encode_proposal(x, i == n - 1, check) for i, x in enumerate(p.proposals))
    if isinstance(p, KePayload):
        want = MODP_KE_LENGTH.get(p.group)
        if check and want is not None and len(p.data) != want:
            raise InvariantViolation(f"KE for group {p.group} must be {want} octets, got {len(p.data)}")
        return struct.pack("!HH", p.group, 0) + p.data
    if isinstance(p, NoncePayload):
        if check and not 16 <= len(p.data) <= 256:
            raise InvariantViolation(f"nonce length {len(p.data)} outside 16..256")
        return p.data
    if isinstance(p, NotifyPayload):
        return struct.pack("!BBH", p.protocol, len(p.spi), p.notify_type) + p.spi + p.data
    if isinstance(p, OpaquePayload):
        return p.body
    raise TypeError(f"not a payload: {p!r}")


def encode(msg: IkeMessage, non_esp_marker: bool = False) -> bytes:
    """Serialize *msg*; chain and length fields are always recomputed."""
    h = msg.header
    if len(h.initiator_spi) != 8 or len(h.responder_spi) != 8:
        raise InvariantViolation("SPIs must be 8 octets")
    parts = []
    for i, p in enumerate(msg.payloads):
        nxt = int(msg.payloads[i + 1].payload_type) if i + 1 < len(msg.payloads) else 0
        body = _encode_body(p)
        if len(body) + 4 > 0xFFFF:
            raise InvariantViolation("payload too long")
        parts.append(_GENERIC.pack(nxt, 0x80 if p.critical else 0, len(body) + 4) + body)
    payload_bytes = b"".join(parts)
    first = int(msg.payloads[0].payload_type) if msg.payloads else 0
    header = _HEADER.pack(h.initiator_spi, h.responder_spi, first, h.version,
                          h.exchange_type, h.flags, h.message_id,
                          HEADER_LEN + len(payload_bytes))
    out = header + payload_bytes
    return NON_ESP_MARKER + out if non_esp_marker else out


# -- decoding ---------------------------------------------------------------


def _decode_attributes(buf: bytes) -> tuple:
    attrs = []
    off = 0
    while off < len(buf):
        if off + 4 > len(buf):
            raise MalformedPayload("truncated transform attribute")
        raw_type, val = struct.unpack_from("!HH", buf, off)
        off += 4
        if raw_type & 0x8000:
            attrs.append((raw_type & 0x7FFF, val))
        else:
            if off + val > len(buf):
                raise MalformedPayload("TLV attribute overruns transform")
            attrs.append((raw_type, bytes(buf[off:off + val])))
            off += val
    return tuple(attrs)


def _decode_proposal(buf: bytes, off: int) -> tuple[Proposal, int, int]:
    if off + 8 > len(buf):
        raise MalformedPayload("truncated proposal header")
    last, _, plen, number, proto, spi_size, ntrans = struct.unpack_from("!BBHBBBB", buf, off)
    if plen < 8 + spi_size or off + plen > len(buf):
        raise MalformedPayload("bad proposal length")
    end = off + plen
    spi = bytes(buf[off + 8:off + 8 + spi_size])
    cur = off + 8 + spi_size
    transforms = []
    more = 3 if ntrans else 0
    while cur < end:
        if more != 3:
            raise MalformedPayload("data after last transform")
        if cur + 8 > end:
            raise MalformedPayload("truncated transform")
        more, _, tlen, ttype, _, tid = struct.unpack_from("!BBHBBH", buf, cur)
        if tlen < 8 or cur + tlen > end or more not in (0, 3):
            raise MalformedPayload("bad transform length")
        transforms.append(Transform(ttype, tid, _decode_attributes(buf[cur + 8:cur + tlen])))
        cur += tlen
    if len(transforms) != ntrans or more != 0:
        raise MalformedPayload("transform count mismatch")
    return Proposal(number, tuple(transforms), proto, spi), end, last


def _decode_body(ptype: int, body: bytes, critical: bool) -> Payload:
    if ptype == PayloadType.SA:
        proposals = []
        off, last = 0, 2
        while off < len(body):
            if last != 2:
                raise MalformedPayload("data after last proposal")
            prop, off, last = _decode_proposal(body, off)
            if last not in (0, 2):
                raise MalformedPayload("bad proposal last-substructure field")
            proposals.append(prop)
        if not proposals or last != 0:
            raise MalformedPayload("empty or unterminated SA payload")
        return SaPayload(tuple(proposals), critical)
    if ptype == PayloadType.KE:
        if len(body) < 4:
            raise MalformedPayload("short KE payload")
        group = struct.unpack_from("!H", body)[0]
        return KePayload(group, bytes(body[4:]), critical)
    if ptype == PayloadType.NONCE:
        return NoncePayload(bytes(body), critical)
    if ptype == PayloadType.NOTIFY:
        if len(body) < 4:
            raise MalformedPayload("short notify payload")
        proto, spi_size, ntype = struct.unpack_from("!BBH", body)
        if 4 + spi_size > len(body):
            raise MalformedPayload("notify SPI overruns payload")
        return NotifyPayload(ntype, bytes(body[4 + spi_size:]), proto,
                             bytes(body[4:4 + spi_size]), critical)
    return OpaquePayload(ptype, bytes(body), critical)


def decode(raw: bytes, non_esp_marker: bool = False) -> IkeMessage:
    """Parse one IKEv2 datagram.

    Raises :class:`Truncated` when the buffer is shorter than the header or
    its length field, :class:`MalformedChain` when the payload chain does not
    add up, and :class:`MalformedPayload` for broken SA/KE/Notify bodies.
    A payload whose body the codec cannot reproduce octet for octet (a
    non-zero reserved field, an oversized TV attribute) is kept opaque.
    """
    raw = bytes(raw)
    if non_esp_marker:
        if raw[:4] != NON_ESP_MARKER:
            raise MalformedChain("missing non-ESP marker")
        raw = raw[4:]
    if len(raw) < HEADER_LEN:
        raise Truncated(f"{len(raw)} octets, need {HEADER_LEN}")
    ispi, rspi, nxt, version, xchg, flags, msgid, length = _HEADER.unpack_from(raw)
    if length < HEADER_LEN:
        raise MalformedChain(f"length field {length} below header size")
    if length > len(raw):
        raise Truncated(f"length field {length} exceeds {len(raw)} octets")
    payloads: list[Payload] = []
    off = HEADER_LEN
    cur = nxt
    while cur != PayloadType.NONE:
        if off + 4 > length:
            raise MalformedChain("payload header beyond message end")
        follow, cflags, plen = _GENERIC.unpack_from(raw, off)
        if plen < 4 or off + plen > length:
            raise MalformedChain(f"payload length {plen} inconsistent")
        body = raw[off + 4:off + plen]
        critical = bool(cflags & 0x80)
        p = _decode_body(cur, body, critical)
        if not isinstance(p, OpaquePayload) and _encode_body(p, check=False) != body:
            p = OpaquePayload(cur, bytes(body), critical)
        payloads.append(p)
        off += plen
        cur = follow
    if off != length:
        raise MalformedChain(f"{length - off} octets after last payload")
    header = IkeHeader(ispi, rspi, nxt, version, xchg, flags, msgid, length)
    return IkeMessage(header, tuple(payloads))


# -- message builders -------------------------------------------------------


@dataclass
class ClientProposalSpec:
    """Parameters for an initiator's first IKE_SA_INIT.

    ``public_value`` is the initiator's DH public value: an integer for MODP
    groups (left-padded to the modulus size) or raw octets for ECP groups.
    """

    offered_groups: Sequence[int]
    ke_group: int
    public_value: Union[int, bytes]
    allow_unoffered_ke: bool = False
    initiator_spi: bytes | None = None
    nonce: bytes | None = None
    nonce_length: int = 32
    encryption: Sequence[tuple[int, int | None]] = ((ENCR_AES_CBC, 128), (ENCR_AES_CBC, 256))
    prf: Sequence[int] = (PRF_HMAC_SHA2_256, PRF_HMAC_SHA1)
    integrity: Sequence[int] = (INTEG_HMAC_SHA2_256_128, INTEG_HMAC_SHA1_96)
    rng: object = field(default=None, repr=False)


def ke_bytes(group: int, value: Union[int, bytes]) -> bytes:
    if isinstance(value, (bytes, bytearray)):
        return bytes(value)
    size = KE_LENGTH.get(group)
    if size is None:
        raise InvariantViolation(f"unknown KE size for group {group}")
    return value.to_bytes(size, "big")


def _random_bytes(rng, n: int) -> bytes:
    if rng is None:
        return secrets.token_bytes(n)
    return rng.getrandbits(8 * n).to_bytes(n, "big")


def ike_proposal(groups: Sequence[int], encryption=ClientProposalSpec.encryption,
                 prf=ClientProposalSpec.prf, integrity=ClientProposalSpec.integrity,
                 number: int = 1) -> Proposal:
    transforms = []
    for alg, keylen in encryption:
        attrs = ((ATTR_KEY_LENGTH, keylen),) if keylen else ()
        transforms.append(Transform(TransformType.ENCR, alg, attrs))
    transforms += [Transform(TransformType.PRF, x) for x in prf]
    transforms += [Transform(TransformType.INTEG, x) for x in integrity]
    transforms += [Transform(TransformType.KE, g) for g in groups]
    return Proposal(number, tuple(transforms))


def build_sa_init(spec: ClientProposalSpec) -> IkeMessage:
    """Assemble an initiator IKE_SA_INIT carrying SA, KE and Nonce payloads."""
    groups = list(dict.fromkeys(spec.offered_groups))
    if not groups:
        raise EmptyProposal("no KE groups offered")
    if spec.ke_group not in groups and not spec.allow_unoffered_ke:
        raise InvariantViolation(
            f"KE group {spec.ke_group} not among offered groups {groups}")
    spi = spec.initiator_spi or _random_bytes(spec.rng, 8)
    nonce = spec.nonce or _random_bytes(spec.rng, spec.nonce_length)
    sa = SaPayload((ike_proposal(groups, spec.encryption, spec.prf, spec.integrity),))
    ke = KePayload(spec.ke_group, ke_bytes(spec.ke_group, spec.public_value))
    header = IkeHeader(initiator_spi=spi)
    return IkeMessage.create(header, (sa, ke, NoncePayload(nonce)))


def build_response(request: IkeMessage, payloads: Sequence[Payload],
                   responder_spi: bytes = bytes(8)) -> IkeMessage:
    """Responder message answering *request* (same SPIi and message id)."""
    h = request.header
    header = IkeHeader(initiator_spi=h.initiator_spi, responder_spi=responder_spi,
                       exchange_type=h.exchange_type, flags=Flags.RESPONSE,
                       message_id=h.message_id)
    return IkeMessage.create(header, payloads)


def describe(msg: IkeMessage) -> str:
    """Compact text form, e.g. ``SA_INIT([DH2, DH14], KE_DH14)``."""
    inv = [p for p in msg.find(NotifyPayload) if p.notify_type == NotifyType.INVALID_KE_PAYLOAD]
    if inv and len(inv[0].data) == 2:
        return f"INVALID_KE(USE DH{struct.unpack('!H', inv[0].data)[0]})"
    notes = msg.find(NotifyPayload)
    if notes and not msg.find(KePayload):
        try:
            name = NotifyType(notes[0].notify_type).name
        except ValueError:
            name = str(notes[0].notify_type)
        return f"NOTIFY({name})"
    sa = msg.first(SaPayload)
    ke = msg.first(KePayload)
    if sa is not None and ke is not None:
        groups = ", ".join(f"DH{g}" for g in sa.proposals[0].ke_groups)
        kind = "CREATE_CHILD_SA" if msg.header.exchange_type == ExchangeType.CREATE_CHILD_SA else "SA_INIT"
        return f"{kind}([{groups}], KE_DH{ke.group})"
    return f"IKE(exchange={msg.header.exchange_type}, payloads={len(msg.payloads)})"

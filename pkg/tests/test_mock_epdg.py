import socket

import pytest

from epdg_audit import data_file
from epdg_audit import ike_codec as ike
from epdg_audit import scanner as sc
from epdg_audit.discovery import PlmnId
from epdg_audit.mock_epdg import (AddressInUse, FleetError, FleetOperator, MockEpdg, MockFleet,
                                  MockFleetSpec, fleet_from_policies, make_exponent_pool)
from epdg_audit.policy import EpdgPolicy, FreshPerHandshake, StaticPool
from conftest import fast_cfg


@pytest.mark.parametrize("listen", ["8.8.8.8:0", "0.0.0.0:0", "[2001:db8::1]:0"])
def test_refuses_public_binds(listen):
    with pytest.raises(FleetError):
        MockEpdg(EpdgPolicy({2}), listen)


def test_address_in_use():
    with MockEpdg(EpdgPolicy({2})) as first:
        with pytest.raises(AddressInUse):
            MockEpdg(EpdgPolicy({2}), f"127.0.0.1:{first.port}")


def test_handle_ignores_garbage_and_responses():
    m = MockEpdg(EpdgPolicy({2}))
    try:
        assert m.handle(b"\x00" * 10) is None
        req = sc.sa_init_request([2], 2, fast_cfg())[0]
        resp = ike.encode(ike.build_response(req, [ike.invalid_ke_notify(14)]))
        assert m.handle(resp) is None
        assert m.handle(ike.encode(req)) is not None
    finally:
        m.stop()


def test_handle_answers_sa_init_without_ke_with_syntax_error():
    m = MockEpdg(EpdgPolicy({2}))
    try:
        req = sc.sa_init_request([2], 2, fast_cfg())[0]
        bare = ike.IkeMessage.create(req.header, [p for p in req.payloads if not isinstance(p, ike.KePayload)])
        reply = ike.decode(m.handle(ike.encode(bare)))
        assert reply.first(ike.NotifyPayload).notify_type == ike.NotifyType.INVALID_SYNTAX
    finally:
        m.stop()


def test_spec_rejects_duplicate_listen():
    ops = [FleetOperator(PlmnId("001", "01"), EpdgPolicy({2}), "127.0.0.1:40000"),
           FleetOperator(PlmnId("001", "02"), EpdgPolicy({2}), "127.0.0.1:40000")]
    with pytest.raises(FleetError):
        MockFleetSpec(ops)


def test_spec_rejects_unknown_pool_member():
    with pytest.raises(FleetError):
        fleet_from_policies([EpdgPolicy({2})], shared_key_pool=(3,), pool_members=["999-99"])


def test_pool_applies_only_to_members():
    spec = fleet_from_policies([EpdgPolicy({2}), EpdgPolicy({2})], shared_key_pool=(3, 5),
                               pool_members=["001-000"])
    modes = [op.policy.key_mode for op in spec.effective_policies()]
    assert modes == [StaticPool((3, 5)), FreshPerHandshake()]


def test_from_dict_pool_forms():
    base = {"operators": [{"plmn": "001-01", "policy": {"supported_groups": [2]}}]}
    explicit = MockFleetSpec.from_dict({**base, "shared_key_pool": {"exponents": ["0x3", 5]}})
    assert explicit.shared_key_pool == (3, 5)
    sized = MockFleetSpec.from_dict({**base, "shared_key_pool": {"size": 4, "seed": 7}})
    assert sized.shared_key_pool == make_exponent_pool(4, 7)
    assert MockFleetSpec.from_dict(base).shared_key_pool == ()


def test_make_exponent_pool():
    pool = make_exponent_pool(10, seed=3)
    assert len(set(pool)) == 10 and pool == make_exponent_pool(10, seed=3)
    assert all(a.bit_length() == 760 for a in pool)
    assert pool != make_exponent_pool(10, seed=4)


def test_shipped_fleet_shares_one_pool():
    spec = MockFleetSpec.load(data_file("fleet_static_pool.json"))
    assert len(spec.operators) == 13 and len(spec.shared_key_pool) == 10
    assert all(isinstance(o.policy.key_mode, StaticPool) for o in spec.effective_policies())


def test_fleet_serves_and_stops():
    spec = fleet_from_policies([EpdgPolicy({2}), EpdgPolicy({14})])
    with MockFleet(spec) as fleet:
        ts = fleet.targets()
        assert [str(t.plmn) for t in ts] == ["001-000", "001-001"]
        assert isinstance(sc.probe_group(ts[1], 14, fast_cfg()), sc.Accepted)
        ports = [s.port for s in fleet.servers]
    for p in ports:
        s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        s.bind(("127.0.0.1", p))
        s.close()


def test_non_esp_marker_server():
    with MockEpdg(EpdgPolicy({2}), non_esp_marker=True) as m:
        req = sc.sa_init_request([2], 2, fast_cfg())[0]
        assert m.handle(ike.encode(req)) is None
        out = m.handle(ike.encode(req, True))
        assert out[:4] == b"\x00" * 4

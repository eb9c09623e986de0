import os
import time
import uuid

import pytest
from hypothesis import given, settings, strategies as st

from qkdkem import (
    Flow, HybridCiphertext, HybridContext, HybridPublicPayload, HybridSuite, KmeConfig, PhaseTrace,
    QkdApi, QkdBinding, hybrid_decaps, hybrid_encaps, hybrid_keygen, kme_spawn, qkd_call_count,
)
from qkdkem.errors import InvalidSuite, MalformedCiphertext, MalformedPayload, UnknownKeyId

import oracles

CI, SI = Flow.CLIENT_INITIATED, Flow.SERVER_INITIATED
E14, E04 = QkdApi.ETSI014, QkdApi.ETSI004
COMBOS = [(CI, E14), (CI, E04), (SI, E14)]


def suite(flow, api, kem="mock256"):
    return HybridSuite(kem, api, flow, 0x303C)


def run_once(client, server, s, seed=None, r=None, ledger=None):
    """keygen/encaps/decaps with monotonic phase windows; returns (trace, ct, ss_server, ss_client)."""
    seed = seed if seed is not None else os.urandom(32)
    r = r if r is not None else os.urandom(32)
    cctx, sctx = HybridContext(client), HybridContext(server)
    tr = PhaseTrace()
    t0 = time.monotonic()
    payload = hybrid_keygen(s, cctx, seed)
    t1 = time.monotonic()
    ct, ss_s = hybrid_encaps(s, sctx, payload, r)
    t2 = time.monotonic()
    ss_c = hybrid_decaps(s, cctx, ct)
    t3 = time.monotonic()
    tr.windows = {"keygen": (t0, t1), "encaps": (t1, t2), "decaps": (t2, t3)}
    tr.key_id = cctx.key_id
    cctx.close()
    sctx.close()
    if ledger is not None:
        tr.ledger = ledger()
    return tr, payload, ct, ss_s, ss_c


def test_server_initiated_004_is_invalid():
    with pytest.raises(InvalidSuite):
        HybridSuite("mock256", "etsi004", "server_initiated", 0x303C)


def test_suite_layout_lengths():
    assert suite(CI, E14).payload_len == 48
    assert suite(SI, E14).payload_len == 32
    assert suite(CI, E14).ciphertext_len == 32
    assert suite(SI, E14).ciphertext_len == 48
    assert suite(CI, E04).secret_len == 64


def test_keygen_client_initiated_014(bindings, kme_pair):
    a, _ = kme_pair
    ctx = HybridContext(bindings[0])
    payload = hybrid_keygen(suite(CI, E14), ctx, bytes(32))
    assert len(payload.to_bytes()) == 48
    assert payload.pk.hex() == oracles.PK_ZERO_SEED
    assert payload.key_id == oracles.pool_id(0, 0)
    assert ctx.cached_qkd_key == oracles.pool_key(0, 0)
    assert [e.op for e in a.ledger_snapshot()] == ["GET_KEY"]


def test_keygen_client_initiated_004_caches_nothing(bindings, kme_pair):
    a, _ = kme_pair
    ctx = HybridContext(bindings[0])
    payload = hybrid_keygen(suite(CI, E04), ctx, bytes(32))
    assert payload.key_id == oracles.stream_id(0, 0)
    assert ctx.cached_qkd_key is None
    assert [(e.op, e.api) for e in a.ledger_snapshot()] == [("OPEN_CONNECT", "004")]


def test_keygen_server_initiated_makes_no_qkd_calls(bindings, kme_pair):
    a, _ = kme_pair
    payload = hybrid_keygen(suite(SI, E14), HybridContext(bindings[0]), bytes(32))
    assert len(payload.to_bytes()) == 32
    assert a.ledger_snapshot() == ()


def test_encaps_client_initiated_014_secret_layout(bindings, kme_pair):
    s = suite(CI, E14)
    cctx, sctx = HybridContext(bindings[0]), HybridContext(bindings[1])
    payload = hybrid_keygen(s, cctx, bytes(32))
    ct, ss = hybrid_encaps(s, sctx, payload.to_bytes(), bytes(32))
    assert len(ss.ss) == 64
    assert ss.ss[:32].hex() == oracles.SS_ZERO
    assert ss.ss[32:] == oracles.pool_key(0, 0) == cctx.cached_qkd_key
    assert ct.to_bytes() == bytes(32)


def test_encaps_server_initiated_appends_key_id(bindings, kme_pair):
    a, b = kme_pair
    s = suite(SI, E14)
    payload = hybrid_keygen(s, HybridContext(bindings[0]), bytes(32))
    ct, ss = hybrid_encaps(s, HybridContext(bindings[1]), payload, bytes(32))
    raw = ct.to_bytes()
    assert len(raw) == 48
    assert uuid.UUID(bytes=raw[32:]) == oracles.pool_id(0, 0)
    assert [(e.op, e.party) for e in a.ledger_snapshot()] == [("GET_KEY", b.sae_id)]


def test_encaps_truncated_payload(bindings):
    s = suite(CI, E14)
    payload = hybrid_keygen(s, HybridContext(bindings[0]), bytes(32)).to_bytes()
    with pytest.raises(MalformedPayload):
        hybrid_encaps(s, HybridContext(bindings[1]), payload[:-1], bytes(32))


@pytest.mark.parametrize("flow,api", COMBOS)
def test_full_round_secret_equal(bindings, flow, api):
    _, _, _, ss_s, ss_c = run_once(*bindings, suite(flow, api))
    assert ss_s.ss == ss_c.ss
    assert len(ss_c) == 64


def test_server_initiated_decaps_uses_get_key_with_ids(bindings, kme_pair):
    a, b = kme_pair
    run_once(*bindings, suite(SI, E14))
    assert [(e.op, e.party) for e in a.ledger_snapshot()] == [
        ("GET_KEY", b.sae_id), ("GET_KEY_WITH_IDS", a.sae_id)]


def test_server_initiated_unknown_trailing_id(bindings):
    s = suite(SI, E14)
    cctx = HybridContext(bindings[0])
    hybrid_keygen(s, cctx, bytes(32))
    with pytest.raises(UnknownKeyId):
        hybrid_decaps(s, cctx, bytes(32) + uuid.uuid4().bytes)


def test_decaps_wrong_length(bindings):
    s = suite(CI, E14)
    cctx = HybridContext(bindings[0])
    hybrid_keygen(s, cctx, bytes(32))
    with pytest.raises(MalformedCiphertext):
        hybrid_decaps(s, cctx, bytes(31))


@pytest.mark.parametrize("flow,api,expected", [
    (CI, E14, {"keygen": 1, "encaps": 1, "decaps": 0}),
    (SI, E14, {"keygen": 0, "encaps": 1, "decaps": 1}),
    (CI, E04, {"keygen": 1, "encaps": 2, "decaps": 1}),
])
def test_qkd_call_count(bindings, kme_pair, flow, api, expected):
    a, _ = kme_pair
    tr, *_ = run_once(*bindings, suite(flow, api), ledger=a.ledger_snapshot)
    assert qkd_call_count(tr) == expected
    if api is E04:
        assert [e.op for e in a.ledger_snapshot()][-2:] == ["CLOSE", "CLOSE"]


@pytest.mark.parametrize("flow,api", COMBOS)
def test_secret_equality_200_runs(flow, api):
    a, b = kme_spawn(KmeConfig(pool_size=250, seed=5))
    client, server = QkdBinding.in_process(a, b), QkdBinding.in_process(b, a)
    s = suite(flow, api)
    for _ in range(200):
        seed, r = os.urandom(32), os.urandom(32)
        tr, payload, ct, ss_s, ss_c = run_once(client, server, s, seed, r)
        assert ss_s.ss == ss_c.ss
        # PQ half recomputed by the oracle, QKD half checked against the KME's derivation
        pk, sk = oracles.mock_keypair(seed)
        assert ss_c.ss[:32] == oracles.mock_encaps(pk, r)[1]
        if api is E14:
            assert ss_c.ss[32:] == a.store.pool_key(tr.key_id)
        else:
            n = int(a.store._stream_counter) - 1
            assert tr.key_id == oracles.stream_id(5, n)
            assert ss_c.ss[32:] == oracles.stream_key(5, n, 0)


@pytest.mark.parametrize("flow,api", COMBOS)
@given(bit=st.integers(0, 255))
@settings(max_examples=25, deadline=None)
def test_ct_bit_flip_changes_only_pq_half(flow, api, bit):
    a, b = kme_spawn(KmeConfig(pool_size=4, seed=1))
    client, server = QkdBinding.in_process(a, b), QkdBinding.in_process(b, a)
    s = suite(flow, api)
    cctx, sctx = HybridContext(client), HybridContext(server)
    payload = hybrid_keygen(s, cctx, os.urandom(32))
    ct, ss_s = hybrid_encaps(s, sctx, payload, os.urandom(32))
    raw = bytearray(ct.to_bytes())
    raw[bit // 8] ^= 1 << (bit % 8)  # inside pq_ct: first 32 bytes
    ss_c = hybrid_decaps(s, cctx, bytes(raw))
    assert ss_c.pq_ss != ss_s.pq_ss
    assert ss_c.qkd_key == ss_s.qkd_key


def test_payload_round_trip_layouts():
    s = suite(CI, E14)
    kid = uuid.uuid4()
    p = HybridPublicPayload(b"\x01" * 32, kid)
    assert HybridPublicPayload.from_bytes(s, p.to_bytes()) == p
    c = HybridCiphertext(b"\x02" * 32, kid)
    assert HybridCiphertext.from_bytes(suite(SI, E14), c.to_bytes()) == c


@pytest.mark.parametrize("flow,api", COMBOS)
def test_mlkem768_hybrid_round_trip(bindings, flow, api):
    from qkdkem import available_suites

    if "mlkem768" not in available_suites():
        pytest.skip("kyber-py not installed")
    s = suite(flow, api, "mlkem768")
    _, payload, ct, ss_s, ss_c = run_once(*bindings, s)
    assert len(payload.to_bytes()) == s.payload_len
    assert len(ct.to_bytes()) == s.ciphertext_len
    assert ss_s.ss == ss_c.ss and len(ss_c) == 64

import itertools
import time
import uuid

import pytest

from qkdkem import KmeConfig, QkdRole, QosSpec, RetryPolicy, kme_spawn
from qkdkem.errors import (
    InvalidRequest, KeyPoolExhausted, PeerSessionNotReady, SessionAlreadyOpen, SessionNotOpen,
    UnknownKeyId,
)
from qkdkem.qkd_client import Etsi004Client, Etsi014Client, InProcessTransport

import oracles

INIT, RESP = QkdRole.INITIATOR, QkdRole.RESPONDER


@pytest.fixture
def c014(kme_pair):
    a, b = kme_pair
    return Etsi014Client(InProcessTransport(a)), Etsi014Client(InProcessTransport(b))


@pytest.fixture
def c004(kme_pair):
    a, b = kme_pair
    return Etsi004Client(InProcessTransport(a)), Etsi004Client(InProcessTransport(b))


# -- ETSI 014 ----------------------------------------------------------------------


def test_status_seeded(c014, kme_pair):
    alice, _ = c014
    st = alice.get_status(kme_pair[1].sae_id)
    assert st.stored_key_count == 100
    assert st.key_size == 256


def test_get_key_decrements_pool(c014, kme_pair):
    a, b = kme_pair
    alice, _ = c014
    [(kid, key)] = alice.get_key(b.sae_id, 1)
    assert (kid, key) == (oracles.pool_id(0, 0), oracles.pool_key(0, 0))
    assert alice.get_status(b.sae_id).stored_key_count == 99
    assert oracles.LedgerReplay(100).apply(a.ledger_snapshot()).counts()["fresh"] == 99


def test_get_key_zero_is_noop(c014, kme_pair):
    alice, _ = c014
    assert alice.get_key(kme_pair[1].sae_id, 0) == []
    assert alice.get_status(kme_pair[1].sae_id).stored_key_count == 100


def test_get_key_exhausted():
    a, b = kme_spawn(pool_size=1)
    c = Etsi014Client(InProcessTransport(a))
    c.get_key(b.sae_id)
    with pytest.raises(KeyPoolExhausted):
        c.get_key(b.sae_id)
    with pytest.raises(KeyPoolExhausted):
        Etsi014Client(InProcessTransport(a)).get_key(b.sae_id, 5)


def test_get_key_with_ids_identical_then_retired(c014, kme_pair):
    a, b = kme_pair
    alice, bob = c014
    [(kid, key)] = alice.get_key(b.sae_id)
    assert bob.get_key_with_ids(a.sae_id, [kid]) == [key]
    with pytest.raises(UnknownKeyId):
        bob.get_key_with_ids(a.sae_id, [kid])


def test_get_key_with_random_id(c014, kme_pair):
    _, bob = c014
    with pytest.raises(UnknownKeyId):
        bob.get_key_with_ids(kme_pair[0].sae_id, [uuid.uuid4()])


def test_pairing_over_1000_grants():
    a, b = kme_spawn(pool_size=1000, seed=11)
    alice, bob = Etsi014Client(InProcessTransport(a)), Etsi014Client(InProcessTransport(b))
    granted = []
    for _ in range(10):
        granted += alice.get_key(b.sae_id, 100)
    ids = [kid for kid, _ in granted]
    assert len(set(ids)) == 1000
    assert bob.get_key_with_ids(a.sae_id, ids) == [k for _, k in granted]
    assert a.store.counts() == {"fresh": 0, "granted": 0, "retired": 1000}


# -- ETSI 004 --------------------------------------------------------------------------


def open_pair(alice, bob, a, b):
    sid = alice.open_connect(INIT, a.sae_id, b.sae_id, QosSpec())
    assert bob.open_connect(RESP, a.sae_id, b.sae_id, QosSpec(), sid) == sid
    return sid


def test_initiator_gets_fresh_stream(c004, kme_pair):
    a, b = kme_pair
    alice, _ = c004
    s1 = alice.open_connect(INIT, a.sae_id, b.sae_id)
    s2 = alice.open_connect(INIT, a.sae_id, b.sae_id)
    assert s1 != s2 and s1.int != 0
    assert str(s1) == oracles.STREAM_ID_0


def test_responder_binds_existing(c004, kme_pair):
    a, b = kme_pair
    alice, bob = c004
    sid = open_pair(alice, bob, a, b)
    st = a.store.stream(sid)
    assert st.initiator_open and st.responder_open


def test_responder_unknown_stream(c004, kme_pair):
    _, bob = c004
    with pytest.raises(UnknownKeyId):
        bob.open_connect(RESP, "x", "y", QosSpec(), uuid.uuid4())


def test_responder_double_open(c004, kme_pair):
    a, b = kme_pair
    alice, bob = c004
    sid = open_pair(alice, bob, a, b)
    with pytest.raises(SessionAlreadyOpen):
        bob.open_connect(RESP, a.sae_id, b.sae_id, QosSpec(), sid)


def test_open_arguments_validated(c004):
    alice, _ = c004
    with pytest.raises(InvalidRequest):
        alice.open_connect(INIT, "a", "b", key_stream_id=uuid.uuid4())
    with pytest.raises(InvalidRequest):
        alice.open_connect(RESP, "a", "b")
    with pytest.raises(InvalidRequest):
        alice.open_connect(INIT, "a", "b", QosSpec(key_chunk_size=16))


def test_both_ends_same_key(c004, kme_pair):
    a, b = kme_pair
    alice, bob = c004
    sid = open_pair(alice, bob, a, b)
    ka, kb = alice.get_key(sid, 0), bob.get_key(sid, 0)
    assert ka == kb == oracles.stream_key(0, 0, 0)
    assert len(ka) == 32
    # idempotent per index
    assert alice.get_key(sid, 0) == ka
    assert alice.get_key(sid, 3) == bob.get_key(sid, 3) == oracles.stream_key(0, 0, 3)


def test_get_before_responder_open(c004, kme_pair):
    a, b = kme_pair
    alice, _ = c004
    sid = alice.open_connect(INIT, a.sae_id, b.sae_id)
    with pytest.raises(PeerSessionNotReady):
        alice.get_key(sid, 0, retry=False)


def test_retry_gives_up_at_cap(kme_pair):
    a, b = kme_pair
    alice = Etsi004Client(InProcessTransport(a), RetryPolicy(interval_s=0.01, cap_s=0.1))
    sid = alice.open_connect(INIT, a.sae_id, b.sae_id)
    t0 = time.monotonic()
    with pytest.raises(PeerSessionNotReady):
        alice.get_key(sid)
    assert 0.08 <= time.monotonic() - t0 < 0.5


def test_retry_succeeds_once_peer_opens(kme_pair):
    import threading

    a, b = kme_pair
    alice = Etsi004Client(InProcessTransport(a), RetryPolicy(interval_s=0.005, cap_s=1.0))
    bob = Etsi004Client(InProcessTransport(b))
    sid = alice.open_connect(INIT, a.sae_id, b.sae_id)
    timer = threading.Timer(0.05, bob.open_connect, (RESP, a.sae_id, b.sae_id, QosSpec(), sid))
    timer.start()
    assert alice.get_key(sid) == oracles.stream_key(0, 0, 0)
    timer.join()


def test_closed_stream(c004, kme_pair):
    a, b = kme_pair
    alice, bob = c004
    sid = open_pair(alice, bob, a, b)
    alice.get_key(sid)
    alice.close(sid)
    with pytest.raises(SessionNotOpen):
        alice.get_key(sid, role=INIT)
    with pytest.raises(SessionNotOpen):
        alice.close(sid, role=INIT)
    # the other end keeps working until it closes too
    assert bob.get_key(sid) == oracles.stream_key(0, 0, 0)
    bob.close(sid)
    assert a.store.stream(sid) is None
    with pytest.raises(SessionNotOpen):
        bob.get_key(sid, role=RESP)


def _close_order_oracle(ops):
    """Expected outcome per op after both ends are open. Written independently of the KME."""
    closed = {"i": False, "r": False}
    out = []
    for op in ops:
        who, verb = op[0], op[1:]
        if closed[who]:
            out.append("SessionNotOpen")
            continue
        if verb == "CLOSE":
            closed[who] = True
        out.append("ok")
    return out


@pytest.mark.parametrize("ops", list(itertools.permutations(["iCLOSE", "rCLOSE", "iGET", "rGET"])))
def test_open_close_orderings(ops, kme_pair):
    a, b = kme_pair
    clients = {"i": Etsi004Client(InProcessTransport(a)), "r": Etsi004Client(InProcessTransport(b))}
    roles = {"i": INIT, "r": RESP}
    sid = open_pair(clients["i"], clients["r"], a, b)
    got = []
    for op in ops:
        who, verb = op[0], op[1:]
        try:
            if verb == "CLOSE":
                clients[who].close(sid, role=roles[who])
            else:
                assert clients[who].get_key(sid, role=roles[who], retry=False) == oracles.stream_key(0, 0, 0)
            got.append("ok")
        except SessionNotOpen:
            got.append("SessionNotOpen")
    assert got == _close_order_oracle(ops)
    assert a.store.stream(sid) is None


def test_three_call_sequencing():
    """initiator OPEN -> responder OPEN -> GET is the only order where GET succeeds."""
    successes = []
    for order in itertools.permutations(["iOPEN", "rOPEN", "GET"]):
        a, b = kme_spawn(pool_size=0)
        alice, bob = Etsi004Client(InProcessTransport(a)), Etsi004Client(InProcessTransport(b))
        sid = None
        ok = True
        for op in order:
            try:
                if op == "iOPEN":
                    sid = alice.open_connect(INIT, a.sae_id, b.sae_id)
                elif op == "rOPEN":
                    bob.open_connect(RESP, a.sae_id, b.sae_id, QosSpec(), sid or uuid.uuid4())
                else:
                    alice.get_key(sid or uuid.uuid4(), role=INIT, retry=False)
            except (UnknownKeyId, SessionNotOpen, PeerSessionNotReady):
                if op == "GET":
                    ok = False
        if ok:
            successes.append(order)
    assert successes == [("iOPEN", "rOPEN", "GET")]

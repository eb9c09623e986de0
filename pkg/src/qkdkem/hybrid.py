"""Hybrid QKD-KEM: a post-quantum KEM whose shared secret is extended with a QKD key.

The shared secret is always ``pq_ss || qkd_key`` (QKD bytes last, no KDF),
and the QKD key travels by reference: a 16-byte key id appended raw to
either the public key or the ciphertext, depending on the flow.

client-initiated (ETSI 014 or 004)
    keygen   client fetches a key (014 GET_KEY) or opens a stream as
             initiator (004 OPEN_CONNECT); payload = pk || key_id
    encaps   server fetches the same key (014 GET_KEY_WITH_IDS) or joins
             the stream and reads index 0 (004 OPEN_CONNECT + GET_KEY);
             ciphertext = pq_ct
    decaps   014 uses the key cached at keygen; 004 reads index 0

server-initiated (ETSI 014 only)
    keygen   pure KEM keygen, no QKD calls; payload = pk
    encaps   server fetches a key (GET_KEY); ciphertext = pq_ct || key_id
    decaps   client fetches it by id (GET_KEY_WITH_IDS)
"""

from __future__ import annotations

import uuid
from dataclasses import dataclass, field
from enum import Enum

from . import kem
from .errors import InvalidSuite, MalformedCiphertext, MalformedPayload, UnknownKeyId
from .kem import KemKeypair, KemSuite
from .qkd_client import QkdBinding, QkdRole, QosSpec

KEY_ID_LEN = 16
PHASES = ("keygen", "encaps", "decaps")


class QkdApi(str, Enum):
    ETSI004 = "etsi004"
    ETSI014 = "etsi014"


class Flow(str, Enum):
    CLIENT_INITIATED = "client_initiated"
    SERVER_INITIATED = "server_initiated"


@dataclass(frozen=True)
class HybridSuite:
    kem: KemSuite
    api: QkdApi
    flow: Flow
    group_code: int
    qkd_key_len: int = 32

    def __post_init__(self):
        try:
            object.__setattr__(self, "api", QkdApi(self.api))
            object.__setattr__(self, "flow", Flow(self.flow))
        except ValueError as exc:
            raise InvalidSuite(str(exc)) from None
        object.__setattr__(self, "kem", kem.get_suite(self.kem))
        if self.flow is Flow.SERVER_INITIATED and self.api is not QkdApi.ETSI014:
            raise InvalidSuite("the server-initiated flow needs the stateless ETSI 014 API")
        if not 0 <= self.group_code <= 0xFFFF:
            raise InvalidSuite(f"group code {self.group_code:#x} is not 16-bit")
        if self.qkd_key_len <= 0:
            raise InvalidSuite("qkd_key_len must be positive")

    @property
    def name(self) -> str:
        return f"qkd_{self.kem.name}"

    @property
    def client_initiated(self) -> bool:
        return self.flow is Flow.CLIENT_INITIATED

    @property
    def payload_len(self) -> int:
        return self.kem.pk_len + (KEY_ID_LEN if self.client_initiated else 0)

    @property
    def ciphertext_len(self) -> int:
        return self.kem.ct_len + (0 if self.client_initiated else KEY_ID_LEN)

    @property
    def secret_len(self) -> int:
        return self.kem.ss_len + self.qkd_key_len


@dataclass(frozen=True)
class HybridPublicPayload:
    pk: bytes
    key_id: uuid.UUID | None = None

    def to_bytes(self) -> bytes:
        return self.pk + (self.key_id.bytes if self.key_id is not None else b"")

    @classmethod
    def from_bytes(cls, suite: HybridSuite, data: bytes) -> HybridPublicPayload:
        if len(data) != suite.payload_len:
            raise MalformedPayload(f"{suite.name}: payload is {len(data)} bytes, "
                                   f"expected {suite.payload_len}")
        pk_len = suite.kem.pk_len
        if not suite.client_initiated:
            return cls(bytes(data))
        return cls(bytes(data[:pk_len]), uuid.UUID(bytes=bytes(data[pk_len:])))


@dataclass(frozen=True)
class HybridCiphertext:
    pq_ct: bytes
    key_id: uuid.UUID | None = None

    def to_bytes(self) -> bytes:
        return self.pq_ct + (self.key_id.bytes if self.key_id is not None else b"")

    @classmethod
    def from_bytes(cls, suite: HybridSuite, data: bytes) -> HybridCiphertext:
        if len(data) != suite.ciphertext_len:
            raise MalformedCiphertext(f"{suite.name}: ciphertext is {len(data)} bytes, "
                                      f"expected {suite.ciphertext_len}")
        ct_len = suite.kem.ct_len
        if suite.client_initiated:
            return cls(bytes(data))
        return cls(bytes(data[:ct_len]), uuid.UUID(bytes=bytes(data[ct_len:])))


@dataclass(frozen=True)
class HybridSecret:
    pq_ss: bytes
    qkd_key: bytes

    @property
    def ss(self) -> bytes:
        return self.pq_ss + self.qkd_key

    def __bytes__(self):
        return self.ss

    def __len__(self):
        return len(self.pq_ss) + len(self.qkd_key)

    def __repr__(self):
        return f"HybridSecret(<{len(self)} bytes>)"


@dataclass
class HybridContext:
    """Per-handshake state for one party. Single owner; do not share across handshakes."""

    binding: QkdBinding
    role: QkdRole | None = None
    keypair: KemKeypair | None = None
    key_id: uuid.UUID | None = None
    cached_qkd_key: bytes | None = field(default=None, repr=False)
    open_stream: uuid.UUID | None = None

    def close(self):
        """Tear down: close any ETSI 004 stream end still held."""
        if self.open_stream is not None:
            sid, self.open_stream = self.open_stream, None
            self.binding.etsi004.close(sid)


def _as_suite(suite: HybridSuite) -> HybridSuite:
    if not isinstance(suite, HybridSuite):
        raise InvalidSuite(f"expected HybridSuite, got {type(suite).__name__}")
    return suite


def hybrid_keygen(suite: HybridSuite, ctx: HybridContext, seed: bytes) -> HybridPublicPayload:
    suite = _as_suite(suite)
    ctx.keypair = kem.keypair(suite.kem, seed)
    if not suite.client_initiated:
        ctx.role = QkdRole.RESPONDER
        return HybridPublicPayload(ctx.keypair.pk)

    ctx.role = QkdRole.INITIATOR
    b = ctx.binding
    if suite.api is QkdApi.ETSI014:
        [(key_id, key)] = b.etsi014.get_key(b.peer_sae, 1)
        ctx.key_id, ctx.cached_qkd_key = key_id, key
    else:
        ctx.key_id = b.etsi004.open_connect(QkdRole.INITIATOR, b.local_sae, b.peer_sae,
                                            QosSpec(key_chunk_size=suite.qkd_key_len))
        ctx.open_stream = ctx.key_id
    return HybridPublicPayload(ctx.keypair.pk, ctx.key_id)


def hybrid_encaps(suite: HybridSuite, ctx: HybridContext, payload: HybridPublicPayload | bytes,
                  randomness: bytes) -> tuple[HybridCiphertext, HybridSecret]:
    suite = _as_suite(suite)
    if not isinstance(payload, HybridPublicPayload):
        payload = HybridPublicPayload.from_bytes(suite, payload)
    elif len(payload.to_bytes()) != suite.payload_len:
        raise MalformedPayload(f"{suite.name}: payload layout does not match the suite")
    b = ctx.binding

    # QKD retrieval precedes the PQC encapsulation
    if suite.client_initiated:
        ctx.role = QkdRole.RESPONDER
        ctx.key_id = payload.key_id
        if payload.key_id.int == 0:
            raise UnknownKeyId("all-zero key id")
        if suite.api is QkdApi.ETSI014:
            [qkd_key] = b.etsi014.get_key_with_ids(b.peer_sae, [payload.key_id])
        else:
            b.etsi004.open_connect(QkdRole.RESPONDER, b.peer_sae, b.local_sae,
                                   QosSpec(key_chunk_size=suite.qkd_key_len), payload.key_id)
            ctx.open_stream = payload.key_id
            qkd_key = b.etsi004.get_key(payload.key_id, 0)
    else:
        ctx.role = QkdRole.INITIATOR
        [(ctx.key_id, qkd_key)] = b.etsi014.get_key(b.peer_sae, 1)

    pq_ct, pq_ss = kem.encaps(suite.kem, payload.pk, randomness)
    ct = HybridCiphertext(pq_ct, None if suite.client_initiated else ctx.key_id)
    return ct, HybridSecret(pq_ss, qkd_key)


def hybrid_decaps(suite: HybridSuite, ctx: HybridContext, ct: HybridCiphertext | bytes) -> HybridSecret:
    suite = _as_suite(suite)
    if ctx.keypair is None:
        raise MalformedCiphertext("context holds no keypair; run hybrid_keygen first")
    if not isinstance(ct, HybridCiphertext):
        ct = HybridCiphertext.from_bytes(suite, ct)
    elif len(ct.to_bytes()) != suite.ciphertext_len:
        raise MalformedCiphertext(f"{suite.name}: ciphertext layout does not match the suite")
    b = ctx.binding

    if suite.client_initiated:
        if suite.api is QkdApi.ETSI014:
            qkd_key = ctx.cached_qkd_key
        else:
            qkd_key = b.etsi004.get_key(ctx.key_id, 0)
    else:
        if ct.key_id.int == 0:
            raise UnknownKeyId("all-zero key id")
        ctx.key_id = ct.key_id
        [qkd_key] = b.etsi014.get_key_with_ids(b.peer_sae, [ct.key_id])

    pq_ss = kem.decaps(suite.kem, ctx.keypair.sk, ct.pq_ct)
    return HybridSecret(pq_ss, qkd_key)


@dataclass
class PhaseTrace:
    """Monotonic-clock phase windows plus the KME ledger entries for one exchange."""

    windows: dict[str, tuple[float, float]] = field(default_factory=dict)
    ledger: tuple = ()
    key_id: uuid.UUID | None = None


def qkd_call_count(trace) -> dict[str, int]:
    """Count QKD API round trips per phase from the KME ledger.

    ``trace`` needs ``windows`` (phase -> (start, end) on ``time.monotonic``),
    ``ledger`` (ledger entries) and optionally ``key_id`` to filter on. Only
    successful calls are ledgered, so this is exact; CLOSE is teardown and not
    attributed to any phase.
    """
    counts = dict.fromkeys(PHASES, 0)
    kid = str(trace.key_id) if getattr(trace, "key_id", None) is not None else None
    for entry in trace.ledger:
        if entry.op == "CLOSE" or (kid is not None and entry.key_id != kid):
            continue
        for phase in PHASES:
            window = trace.windows.get(phase)
            if window and window[0] <= entry.timestamp <= window[1]:
                counts[phase] += 1
                break
    return counts

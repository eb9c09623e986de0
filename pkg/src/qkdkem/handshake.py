"""TLS-1.3-style key-establishment handshake over hybrid QKD-KEM groups.

Only the key-exchange skeleton is modelled: the client offers groups
(``supported_groups``) with one public payload per group (``key_share``),
the server picks the first client preference it also supports, encapsulates,
and proves possession of the secret with a Finished MAC. Certificates,
signatures and record protection are out of scope.

Frames are length-prefixed::

    u32 length | u8 type | u16 group | payload[length - 3]

ClientHello payload::

    u16 n | n * u16 supported group
    u16 m | m * (u16 group | u16 len | share[len])

ServerHello payload is the hybrid ciphertext for the selected group and is
always followed by a Finished frame whose payload is
``HMAC-SHA256(secret, "server finished" || SHA-256(CH frame || SH frame))``.
A negotiation failure is reported with an Alert frame carrying the error
class name in UTF-8.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import socket
import struct
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Union

from . import kem
from .errors import (
    EmptyPreference, KeyConfirmationFailed, MalformedFrame, QkdKemError, SelectedGroupNotOffered,
    UnknownGroup, UnsupportedGroup, error_from_name,
)
from .hybrid import (
    Flow, HybridContext, HybridSecret, HybridSuite, QkdApi, hybrid_decaps, hybrid_encaps,
    hybrid_keygen, qkd_call_count,
)
from .kem import KemSuite
from .qkd_client import QkdBinding

FLAGSHIP_GROUP = 0x303C

# standard ML-KEM codepoints; mock256 sits in the private-use range
PLAIN_CODEPOINTS = {"mlkem512": 0x0200, "mlkem768": 0x0201, "mlkem1024": 0x0202, "mock256": 0xFE00}

CLIENT_HELLO, SERVER_HELLO, FINISHED, ALERT = 1, 2, 20, 21
_HEADER = struct.Struct(">IBH")


@dataclass(frozen=True)
class PlainKemGroup:
    """A non-hybrid group: pure post-quantum KEM, the baseline hybrids are measured against."""

    kem: KemSuite
    group_code: int

    def __post_init__(self):
        object.__setattr__(self, "kem", kem.get_suite(self.kem))

    @property
    def name(self):
        return self.kem.name


Group = Union[HybridSuite, PlainKemGroup]


class GroupCatalog:
    def __init__(self, groups=()):
        self.entries: dict[int, Group] = {}
        for g in groups:
            self.add(g)

    def add(self, group: Group):
        if group.group_code in self.entries:
            raise ValueError(f"codepoint {group.group_code:#06x} already taken")
        self.entries[group.group_code] = group

    def __contains__(self, code):
        return code in self.entries

    def __getitem__(self, code) -> Group:
        try:
            return self.entries[code]
        except KeyError:
            raise UnknownGroup(f"{code:#06x}") from None

    def __iter__(self):
        return iter(self.entries.values())

    def __len__(self):
        return len(self.entries)

    @classmethod
    def hybrid(cls, kems=("mock256",), flow=Flow.CLIENT_INITIATED, api=QkdApi.ETSI014,
               qkd_key_len=32, first_code=FLAGSHIP_GROUP, with_plain=False) -> GroupCatalog:
        """Hybrid groups at consecutive codepoints from 0x303C, optionally with plain baselines."""
        cat = cls()
        for i, name in enumerate(kems):
            cat.add(HybridSuite(kem.get_suite(name), api, flow, first_code + i, qkd_key_len))
            if with_plain:
                cat.add(plain_group(name))
        return cat


def plain_group(name: str, code: int | None = None) -> PlainKemGroup:
    return PlainKemGroup(kem.get_suite(name), PLAIN_CODEPOINTS[name] if code is None else code)


# -- messages ---------------------------------------------------------------------


@dataclass(frozen=True)
class ClientHello:
    supported_groups: tuple[int, ...]
    key_shares: dict[int, bytes]

    def encode(self) -> bytes:
        body = struct.pack(">H", len(self.supported_groups))
        body += b"".join(struct.pack(">H", g) for g in self.supported_groups)
        body += struct.pack(">H", len(self.key_shares))
        for g, share in self.key_shares.items():
            body += struct.pack(">HH", g, len(share)) + share
        first = self.supported_groups[0] if self.supported_groups else 0
        return encode_frame(CLIENT_HELLO, first, body)

    @classmethod
    def decode(cls, frame: bytes) -> ClientHello:
        _, _, body = decode_frame(frame, CLIENT_HELLO)
        try:
            (n,) = struct.unpack_from(">H", body, 0)
            groups = struct.unpack_from(f">{n}H", body, 2)
            off = 2 + 2 * n
            (m,) = struct.unpack_from(">H", body, off)
            off += 2
            shares = {}
            for _ in range(m):
                g, ln = struct.unpack_from(">HH", body, off)
                off += 4
                if off + ln > len(body):
                    raise MalformedFrame("key share overruns ClientHello")
                shares[g] = bytes(body[off:off + ln])
                off += ln
        except struct.error as exc:
            raise MalformedFrame(f"truncated ClientHello: {exc}") from None
        if off != len(body):
            raise MalformedFrame("trailing bytes in ClientHello")
        return cls(tuple(groups), shares)


@dataclass(frozen=True)
class ServerHello:
    selected_group: int
    server_payload: bytes
    finished: bytes = b""

    def encode(self) -> bytes:
        """ServerHello frame followed by its Finished frame."""
        return self.hello_frame() + encode_frame(FINISHED, self.selected_group, self.finished)

    def hello_frame(self) -> bytes:
        return encode_frame(SERVER_HELLO, self.selected_group, self.server_payload)

    @classmethod
    def decode(cls, data: bytes) -> ServerHello:
        frames = split_frames(data)
        if frames and frames[0][0] == ALERT:
            raise error_from_name(frames[0][2].decode("utf-8", "replace"), "alert from server")
        if len(frames) != 2 or frames[0][0] != SERVER_HELLO or frames[1][0] != FINISHED:
            raise MalformedFrame("expected ServerHello + Finished")
        return cls(frames[0][1], frames[0][2], frames[1][2])


def encode_frame(ftype: int, group: int, payload: bytes) -> bytes:
    return _HEADER.pack(3 + len(payload), ftype, group) + payload


def decode_frame(frame: bytes, expected_type: int | None = None) -> tuple[int, int, bytes]:
    frames = split_frames(frame)
    if len(frames) != 1:
        raise MalformedFrame(f"expected one frame, got {len(frames)}")
    ftype, group, payload = frames[0]
    if expected_type is not None and ftype != expected_type:
        raise MalformedFrame(f"frame type {ftype}, expected {expected_type}")
    return frames[0]


def split_frames(data: bytes) -> list[tuple[int, int, bytes]]:
    out, off = [], 0
    while off < len(data):
        if len(data) - off < _HEADER.size:
            raise MalformedFrame("truncated frame header")
        length, ftype, group = _HEADER.unpack_from(data, off)
        if length < 3 or off + 4 + length > len(data):
            raise MalformedFrame("frame length out of range")
        out.append((ftype, group, bytes(data[off + _HEADER.size:off + 4 + length])))
        off += 4 + length
    return out


def alert(exc: Exception) -> bytes:
    return encode_frame(ALERT, 0, type(exc).__name__.encode())


def _transcript_hash(ch_frame: bytes, sh_frame: bytes) -> bytes:
    return hashlib.sha256(ch_frame + sh_frame).digest()


def finished_mac(secret: bytes, ch_frame: bytes, sh_frame: bytes) -> bytes:
    return hmac.new(secret, b"server finished" + _transcript_hash(ch_frame, sh_frame),
                    hashlib.sha256).digest()


def secret_digest(secret: bytes, ch_frame: bytes, sh_frame: bytes) -> bytes:
    """Transcript-bound digest of the shared secret; stands in for the TLS key schedule."""
    return hashlib.sha256(b"qkdkem digest" + _transcript_hash(ch_frame, sh_frame) + secret).digest()


# -- state machines --------------------------------------------------------------


@dataclass
class ClientContext:
    binding: QkdBinding
    randbytes: Callable[[int], bytes] = os.urandom
    catalog: GroupCatalog | None = None
    offers: dict[int, HybridContext] = field(default_factory=dict)
    hello: ClientHello | None = None
    hello_frame: bytes = b""

    def close(self):
        for ctx in self.offers.values():
            ctx.close()


@dataclass
class ServerContext:
    binding: QkdBinding
    randbytes: Callable[[int], bytes] = os.urandom
    hybrid: HybridContext | None = None
    key_id: uuid.UUID | None = None

    def close(self):
        if self.hybrid is not None:
            self.hybrid.close()


def client_start(catalog: GroupCatalog, preferences, ctx: ClientContext) -> ClientHello:
    prefs = list(preferences)
    if not prefs:
        raise EmptyPreference("no groups to offer")
    groups = [catalog[code] for code in prefs]
    ctx.catalog = catalog
    shares = {}
    for group in groups:
        hctx = HybridContext(ctx.binding)
        ctx.offers[group.group_code] = hctx
        seed = ctx.randbytes(kem.SEED_LEN)
        if isinstance(group, HybridSuite):
            shares[group.group_code] = hybrid_keygen(group, hctx, seed).to_bytes()
        else:
            hctx.keypair = kem.keypair(group.kem, seed)
            shares[group.group_code] = hctx.keypair.pk
    ctx.hello = ClientHello(tuple(prefs), shares)
    ctx.hello_frame = ctx.hello.encode()
    return ctx.hello


def select_group(catalog: GroupCatalog, hello: ClientHello) -> Group:
    """First client preference the server also supports, with an identical definition."""
    for code in hello.supported_groups:
        mine = catalog.entries.get(code)
        if mine is not None and code in hello.key_shares:
            return mine
    raise UnsupportedGroup(f"no common group in {[hex(g) for g in hello.supported_groups]}")


def server_respond(catalog: GroupCatalog, hello: ClientHello | bytes, ctx: ServerContext
                   ) -> tuple[ServerHello, HybridSecret]:
    if isinstance(hello, ClientHello):
        ch_frame = hello.encode()
    else:
        ch_frame, hello = bytes(hello), ClientHello.decode(hello)
    # negotiation completes before any QKD call
    group = select_group(catalog, hello)
    share = hello.key_shares[group.group_code]
    randomness = ctx.randbytes(kem.SEED_LEN)
    if isinstance(group, HybridSuite):
        ctx.hybrid = HybridContext(ctx.binding)
        ct, secret = hybrid_encaps(group, ctx.hybrid, share, randomness)
        ctx.key_id = ctx.hybrid.key_id
        payload = ct.to_bytes()
    else:
        payload, pq_ss = kem.encaps(group.kem, share, randomness)
        secret = HybridSecret(pq_ss, b"")
    sh = ServerHello(group.group_code, payload)
    mac = finished_mac(secret.ss, ch_frame, sh.hello_frame())
    return ServerHello(group.group_code, payload, mac), secret


def client_finish(ctx: ClientContext, server_hello: ServerHello | bytes) -> HybridSecret:
    if not isinstance(server_hello, ServerHello):
        server_hello = ServerHello.decode(server_hello)
    code = server_hello.selected_group
    if ctx.hello is None or code not in ctx.offers:
        raise SelectedGroupNotOffered(f"{code:#06x}")
    hctx = ctx.offers[code]
    group = ctx.catalog[code]
    if isinstance(group, HybridSuite):
        secret = hybrid_decaps(group, hctx, server_hello.server_payload)
    else:
        secret = HybridSecret(kem.decaps(group.kem, hctx.keypair.sk, server_hello.server_payload), b"")
    expected = finished_mac(secret.ss, ctx.hello_frame, server_hello.hello_frame())
    if not hmac.compare_digest(expected, server_hello.finished):
        raise KeyConfirmationFailed("server Finished does not verify")
    return secret


# -- driver ------------------------------------------------------------------------


@dataclass
class HandshakeConfig:
    client_catalog: GroupCatalog
    server_catalog: GroupCatalog
    preferences: list[int]
    client_binding: QkdBinding
    server_binding: QkdBinding
    transport: str = "inprocess"  # or "socket"
    ledger: Callable[[int], tuple] | None = None  # since_seq -> ledger entries
    randbytes: Callable[[int], bytes] = os.urandom
    tamper: Callable[[bytes], bytes] | None = None  # applied to the server flight in transit


@dataclass
class HandshakeTranscript:
    preferences: list[int]
    messages: list[tuple[str, bytes]] = field(default_factory=list)
    group: int | None = None
    windows: dict[str, tuple[float, float]] = field(default_factory=dict)
    client_digest: bytes | None = None
    server_digest: bytes | None = None
    key_id: uuid.UUID | None = None
    offered_key_ids: list[uuid.UUID] = field(default_factory=list)
    ledger: tuple = ()
    error: str | None = None

    @property
    def success(self) -> bool:
        return self.error is None and self.client_digest is not None

    def duration_ms(self, phase: str) -> float:
        t0, t1 = self.windows[phase]
        return (t1 - t0) * 1000.0

    def call_counts(self) -> dict[str, int]:
        return qkd_call_count(self)


def run_handshake(config: HandshakeConfig) -> HandshakeTranscript:
    """Drive one client/server exchange and record messages, timings and ledger excerpt.

    Errors do not propagate; they end up in ``transcript.error``. QKD streams
    are closed at teardown, outside the timed window.
    """
    tr = HandshakeTranscript(list(config.preferences))
    mark = _ledger_len(config)
    cctx = ClientContext(config.client_binding, config.randbytes)
    sctx = ServerContext(config.server_binding, config.randbytes)
    server_secret = {}
    try:
        t0 = time.monotonic()
        hello = client_start(config.client_catalog, config.preferences, cctx)
        t1 = time.monotonic()
        tr.windows["keygen"] = (t0, t1)
        tr.messages.append(("ClientHello", cctx.hello_frame))
        tr.offered_key_ids = [c.key_id for c in cctx.offers.values() if c.key_id is not None]

        if config.transport == "socket":
            flight = _socket_exchange(cctx.hello_frame, config, sctx, server_secret, tr)
        else:
            flight = _server_side(cctx.hello_frame, config, sctx, server_secret, tr)
        if config.tamper is not None:
            flight = config.tamper(flight)
        tr.messages.append(("ServerFlight", flight))

        t2 = time.monotonic()
        secret = client_finish(cctx, flight)
        t3 = time.monotonic()
        tr.windows["decaps"] = (t2, t3)
        tr.windows["handshake"] = (t0, t3)
        sh = ServerHello.decode(flight)
        tr.group = sh.selected_group
        tr.key_id = cctx.offers[sh.selected_group].key_id
        tr.client_digest = secret_digest(secret.ss, cctx.hello_frame, sh.hello_frame())
    except QkdKemError as exc:
        tr.error = type(exc).__name__
    finally:
        if "secret" in server_secret:
            tr.server_digest = server_secret["digest"]
            if tr.key_id is None:
                tr.key_id = sctx.key_id
        for c in (cctx, sctx):
            try:
                c.close()
            except QkdKemError:
                pass
    if config.ledger is not None:
        ids = {str(k) for k in tr.offered_key_ids}
        if tr.key_id is not None:
            ids.add(str(tr.key_id))
        if sctx.key_id is not None:
            ids.add(str(sctx.key_id))
        tr.ledger = tuple(e for e in config.ledger(mark) if e.key_id in ids)
    return tr


def _ledger_len(config):
    if config.ledger is None:
        return 0
    entries = config.ledger(0)
    return entries[-1].seq + 1 if entries else 0


def _server_side(ch_frame, config, sctx, out, tr):
    t0 = time.monotonic()
    try:
        sh, secret = server_respond(config.server_catalog, ch_frame, sctx)
    except QkdKemError as exc:
        tr.windows["encaps"] = (t0, time.monotonic())
        return alert(exc)
    tr.windows["encaps"] = (t0, time.monotonic())
    out["secret"] = secret
    out["digest"] = secret_digest(secret.ss, ch_frame, sh.hello_frame())
    return sh.encode()


def _socket_exchange(ch_frame, config, sctx, out, tr):
    """Run the server half on a loopback socket in a helper thread."""
    listener = socket.create_server(("127.0.0.1", 0))
    port = listener.getsockname()[1]
    box = {}

    def serve_one():
        try:
            conn, _ = listener.accept()
            with conn:
                data = read_frames(conn, 1)
                conn.sendall(_server_side(data, config, sctx, out, tr))
        except Exception as exc:  # surfaced to the client thread below
            box["error"] = exc
        finally:
            listener.close()

    th = threading.Thread(target=serve_one, daemon=True)
    th.start()
    with socket.create_connection(("127.0.0.1", port)) as s:
        s.sendall(ch_frame)
        first = read_frames(s, 1)
        ftype = first[4]
        flight = first if ftype == ALERT else first + read_frames(s, 1)
    th.join()
    if "error" in box:
        raise box["error"]
    return flight


def read_frames(sock, count: int) -> bytes:
    out = b""
    for _ in range(count):
        header = _recv_exact(sock, 4)
        (length,) = struct.unpack(">I", header)
        out += header + _recv_exact(sock, length)
    return out


def _recv_exact(sock, n):
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise MalformedFrame("connection closed mid-frame")
        buf += chunk
    return buf

"""Simulated pair of QKD Key Management Entities.

Both KMEs of a pair share one :class:`KmeStore`, which stands in for the
key synchronisation a real QKD link performs. Every key, key id, stream id
and stream seed is derived from the pair seed with :func:`prf`, so tests can
regenerate all of them independently:

    prf(key, label, counter, n) = first n bytes of
        HMAC-SHA256(key, label || u64be(counter) || u32be(0))
     || HMAC-SHA256(key, label || u64be(counter) || u32be(1)) || ...

    pool key i     = prf(seed32, b"pool-key", i, key_len)
    pool key id i  = uuid4-shaped prf(seed32, b"pool-key-id", i, 16)
    stream n seed  = prf(seed32, b"stream-seed", n, 32)
    stream n id    = uuid4-shaped prf(seed32, b"stream-id", n, 16)
    stream key     = prf(stream_seed, b"stream-key", index, key_len)

``seed32`` is an integer seed encoded as 32 big-endian bytes.

Each :class:`KmeEndpoint` serves one SAE and answers the ETSI-014 REST
routes plus a JSON rendering of the ETSI-004 session calls, either in
process (:meth:`KmeEndpoint.handle`) or over HTTP (:func:`serve`).
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import logging
import random
import socket
import sys
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field
from enum import Enum
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from .errors import (
    BindFailure, InvalidConfig, InvalidRequest, KeyPoolExhausted, PeerSessionNotReady,
    QkdKemError, SessionAlreadyOpen, SessionNotOpen, UnknownKeyId,
)

log = logging.getLogger(__name__)

API_PREFIX = "/api/v1"


def prf(key: bytes, label: bytes, counter: int, length: int) -> bytes:
    out = bytearray()
    block = 0
    while len(out) < length:
        msg = label + counter.to_bytes(8, "big") + block.to_bytes(4, "big")
        out += hmac.new(key, msg, hashlib.sha256).digest()
        block += 1
    return bytes(out[:length])


def seed_bytes(seed: int | bytes) -> bytes:
    if isinstance(seed, (bytes, bytearray)):
        if len(seed) != 32:
            raise InvalidConfig("byte seeds must be 32 bytes")
        return bytes(seed)
    if not isinstance(seed, int) or seed < 0 or seed >= 1 << 256:
        raise InvalidConfig(f"seed must be an int in [0, 2**256), got {seed!r}")
    return seed.to_bytes(32, "big")


def derived_uuid(key: bytes, label: bytes, counter: int) -> uuid.UUID:
    # version/variant bits make the id RFC 4122-shaped and never all-zero
    return uuid.UUID(bytes=prf(key, label, counter, 16), version=4)


@dataclass
class LatencyModel:
    """Delay applied once per API round trip: ``fixed_ms + U(0, jitter_ms)``."""

    fixed_ms: float = 0.0
    jitter_ms: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.fixed_ms < 0 or self.jitter_ms < 0:
            raise InvalidConfig("latency must be non-negative")
        self._rng = random.Random(self.seed)
        self._lock = threading.Lock()

    def sample_ms(self) -> float:
        if not self.jitter_ms:
            return self.fixed_ms
        with self._lock:
            return self.fixed_ms + self._rng.uniform(0.0, self.jitter_ms)

    def apply(self):
        ms = self.sample_ms()
        if ms > 0:
            time.sleep(ms / 1000.0)


class KeyState(str, Enum):
    FRESH = "fresh"
    GRANTED = "granted"
    RETIRED = "retired"


@dataclass
class PoolEntry:
    key_id: uuid.UUID
    key: bytes
    state: KeyState = KeyState.FRESH
    master_sae: str | None = None
    slave_sae: str | None = None


@dataclass
class StreamState:
    key_stream_id: uuid.UUID
    stream_seed: bytes
    qos: dict
    source: str
    destination: str
    initiator_open: bool = False
    responder_open: bool = False
    initiator_closed: bool = False
    responder_closed: bool = False

    def is_open(self, role):
        if role == "initiator":
            return self.initiator_open and not self.initiator_closed
        return self.responder_open and not self.responder_closed


@dataclass(frozen=True)
class LedgerEntry:
    seq: int
    op: str           # GET_KEY, GET_KEY_WITH_IDS, OPEN_CONNECT, CLOSE
    api: str          # "014" or "004"
    key_id: str
    party: str        # SAE on whose behalf the KME acted
    timestamp: float  # time.monotonic() at the state transition
    role: str | None = None

    def to_json(self):
        return asdict(self)


class KmeStore:
    """Synchronised key pool and ETSI-004 stream table shared by a KME pair.

    All mutations happen under one lock, so check-and-transition is atomic
    and ledger order is total.
    """

    def __init__(self, pool_size: int, qkd_key_len: int = 32, seed: int | bytes = 0):
        if not isinstance(pool_size, int) or pool_size < 0:
            raise InvalidConfig(f"pool_size must be a non-negative int, got {pool_size!r}")
        if qkd_key_len <= 0:
            raise InvalidConfig("qkd_key_len must be positive")
        self.pool_size = pool_size
        self.qkd_key_len = qkd_key_len
        self._seed = seed_bytes(seed)
        self._lock = threading.RLock()
        self._pool = [
            PoolEntry(derived_uuid(self._seed, b"pool-key-id", i),
                      prf(self._seed, b"pool-key", i, qkd_key_len))
            for i in range(pool_size)
        ]
        self._by_id = {e.key_id: e for e in self._pool}
        self._next_fresh = 0
        self._streams: dict[uuid.UUID, StreamState] = {}
        self._closed_streams: set[uuid.UUID] = set()
        self._stream_counter = 0
        self._ledger: list[LedgerEntry] = []

    # -- accounting ------------------------------------------------------------

    def _record(self, op, api, key_id, party, role=None):
        self._ledger.append(LedgerEntry(len(self._ledger), op, api, str(key_id), party,
                                        time.monotonic(), role))

    def ledger_snapshot(self) -> tuple[LedgerEntry, ...]:
        with self._lock:
            return tuple(self._ledger)

    def counts(self) -> dict[str, int]:
        with self._lock:
            out = {s.value: 0 for s in KeyState}
            for e in self._pool:
                out[e.state.value] += 1
            return out

    def stored_key_count(self) -> int:
        with self._lock:
            return self.pool_size - self._next_fresh

    def pool_key(self, key_id: uuid.UUID) -> bytes | None:
        """Key bytes for a pool id regardless of state (diagnostics only)."""
        e = self._by_id.get(key_id)
        return e.key if e else None

    # -- ETSI 014 ----------------------------------------------------------------

    def grant(self, master_sae: str, slave_sae: str, number: int = 1) -> list[tuple[uuid.UUID, bytes]]:
        if number < 0:
            raise InvalidRequest("number must be non-negative")
        with self._lock:
            if self.pool_size - self._next_fresh < number:
                raise KeyPoolExhausted(
                    f"{number} keys requested, {self.pool_size - self._next_fresh} available")
            out = []
            for _ in range(number):
                e = self._pool[self._next_fresh]
                self._next_fresh += 1
                e.state = KeyState.GRANTED
                e.master_sae, e.slave_sae = master_sae, slave_sae
                self._record("GET_KEY", "014", e.key_id, master_sae)
                out.append((e.key_id, e.key))
            return out

    def retrieve(self, slave_sae: str, master_sae: str, key_ids: list[uuid.UUID]) -> list[bytes]:
        with self._lock:
            entries = []
            for kid in key_ids:
                e = self._by_id.get(kid)
                if (e is None or e.state is not KeyState.GRANTED
                        or e.master_sae != master_sae or e.slave_sae != slave_sae):
                    raise UnknownKeyId(f"key {kid} is not available to {slave_sae}")
                entries.append(e)
            if len({e.key_id for e in entries}) != len(entries):
                raise UnknownKeyId("duplicate key id in request")
            for e in entries:
                e.state = KeyState.RETIRED
                self._record("GET_KEY_WITH_IDS", "014", e.key_id, slave_sae)
            return [e.key for e in entries]

    # -- ETSI 004 ------------------------------------------------------------------

    def open_connect(self, party: str, role: str, source: str, destination: str,
                     qos: dict, key_stream_id: uuid.UUID | None = None) -> uuid.UUID:
        chunk = qos.get("key_chunk_size", self.qkd_key_len)
        if chunk != self.qkd_key_len:
            raise InvalidRequest(f"key_chunk_size must be {self.qkd_key_len}")
        if qos.get("timeout", 1) <= 0:
            raise InvalidRequest("qos timeout must be positive")
        with self._lock:
            if role == "initiator":
                if key_stream_id is not None:
                    st = self._streams.get(key_stream_id)
                    if st is not None and st.initiator_open:
                        raise SessionAlreadyOpen(str(key_stream_id))
                    raise InvalidRequest("initiator must not supply a key_stream_id")
                n = self._stream_counter
                self._stream_counter += 1
                sid = derived_uuid(self._seed, b"stream-id", n)
                st = StreamState(sid, prf(self._seed, b"stream-seed", n, 32), dict(qos),
                                 source, destination, initiator_open=True)
                self._streams[sid] = st
            elif role == "responder":
                if key_stream_id is None:
                    raise InvalidRequest("responder must supply the initiator's key_stream_id")
                st = self._streams.get(key_stream_id)
                if st is None:
                    if key_stream_id in self._closed_streams:
                        raise SessionNotOpen(f"stream {key_stream_id} is closed")
                    raise UnknownKeyId(f"no key stream {key_stream_id}")
                if st.responder_open or st.responder_closed:
                    raise SessionAlreadyOpen(str(key_stream_id))
                if st.initiator_closed:
                    raise SessionNotOpen(f"initiator already closed {key_stream_id}")
                st.responder_open = True
                sid = key_stream_id
            else:
                raise InvalidRequest(f"bad role {role!r}")
            self._record("OPEN_CONNECT", "004", sid, party, role)
            return sid

    def _stream_for(self, key_stream_id, role):
        st = self._streams.get(key_stream_id)
        if st is None:
            if key_stream_id in self._closed_streams:
                raise SessionNotOpen(f"stream {key_stream_id} is closed")
            raise UnknownKeyId(f"no key stream {key_stream_id}")
        if role not in ("initiator", "responder"):
            raise InvalidRequest(f"bad role {role!r}")
        if not st.is_open(role):
            raise SessionNotOpen(f"{role} end of {key_stream_id} is not open")
        return st

    def stream_get_key(self, party: str, role: str, key_stream_id: uuid.UUID, index: int) -> bytes:
        if index < 0:
            raise InvalidRequest("index must be non-negative")
        with self._lock:
            st = self._stream_for(key_stream_id, role)
            peer_opened = st.responder_open if role == "initiator" else st.initiator_open
            if not peer_opened:
                raise PeerSessionNotReady(f"peer of {key_stream_id} has not opened")
            self._record("GET_KEY", "004", key_stream_id, party, role)
            return prf(st.stream_seed, b"stream-key", index, self.qkd_key_len)

    def close(self, party: str, role: str, key_stream_id: uuid.UUID):
        with self._lock:
            st = self._stream_for(key_stream_id, role)
            if role == "initiator":
                st.initiator_closed = True
            else:
                st.responder_closed = True
            self._record("CLOSE", "004", key_stream_id, party, role)
            # a responder that never opened cannot close, so treat it as done
            resp_done = st.responder_closed or not st.responder_open
            if st.initiator_closed and resp_done:
                del self._streams[key_stream_id]
                self._closed_streams.add(key_stream_id)

    def stream(self, key_stream_id: uuid.UUID) -> StreamState | None:
        with self._lock:
            return self._streams.get(key_stream_id)


_STATUS = {
    InvalidRequest: 400, UnknownKeyId: 400, SessionAlreadyOpen: 409,
    SessionNotOpen: 409, PeerSessionNotReady: 425, KeyPoolExhausted: 503,
}


def _parse_uuid(value):
    try:
        return uuid.UUID(str(value))
    except (ValueError, AttributeError, TypeError):
        raise InvalidRequest(f"not a UUID: {value!r}") from None


class KmeEndpoint:
    """One KME of the pair, serving a single local SAE.

    :meth:`handle` is the transport-independent request dispatcher; the HTTP
    server and the in-process transport both go through it, so the JSON
    shapes are identical in both modes.
    """

    def __init__(self, kme_id: str, sae_id: str, peer_kme_id: str, store: KmeStore,
                 latency: LatencyModel | None = None):
        self.kme_id = kme_id
        self.sae_id = sae_id
        self.peer_kme_id = peer_kme_id
        self.store = store
        self.latency = latency or LatencyModel()
        self.running = True

    def __repr__(self):
        return f"KmeEndpoint({self.kme_id!r}, sae={self.sae_id!r})"

    def ledger_snapshot(self) -> tuple[LedgerEntry, ...]:
        return self.store.ledger_snapshot()

    def handle(self, method: str, path: str, body: dict | None = None) -> tuple[int, dict]:
        parts = urlsplit(path)
        if parts.path.rstrip("/") == API_PREFIX + "/ledger" and method == "GET":
            # diagnostic extension, not an ETSI route; no latency injected
            since = int(parse_qs(parts.query).get("since", ["0"])[0])
            return 200, {"entries": [e.to_json() for e in self.ledger_snapshot()[since:]]}
        self.latency.apply()
        try:
            return 200, self._dispatch(method, path, body if body is not None else {})
        except QkdKemError as exc:
            status = _STATUS.get(type(exc), 400)
            return status, {"message": str(exc), "error": type(exc).__name__}

    def _dispatch(self, method, path, body):
        parts = path.strip("/").split("/")
        if parts[:2] != ["api", "v1"]:
            raise InvalidRequest(f"unknown path {path}")
        rest = parts[2:]
        if len(rest) == 3 and rest[0] == "keys":
            sae, op = rest[1], rest[2]
            if op == "status" and method == "GET":
                return self._status(sae)
            if op == "enc_keys" and method == "POST":
                return self._enc_keys(sae, body)
            if op == "dec_keys" and method == "POST":
                return self._dec_keys(sae, body)
        if rest == ["kms", "sessions"] and method == "POST":
            return self._session(body)
        raise InvalidRequest(f"unknown route {method} {path}")

    def _status(self, slave_sae):
        store = self.store
        return {
            "source_KME_ID": self.kme_id,
            "target_KME_ID": self.peer_kme_id,
            "master_SAE_ID": self.sae_id,
            "slave_SAE_ID": slave_sae,
            "key_size": store.qkd_key_len * 8,
            "stored_key_count": store.stored_key_count(),
            "max_key_count": store.pool_size,
            "max_key_per_request": store.pool_size,
            "max_key_size": store.qkd_key_len * 8,
            "min_key_size": store.qkd_key_len * 8,
            "max_SAE_ID_count": 0,
        }

    def _enc_keys(self, slave_sae, body):
        number = body.get("number", 1)
        size = body.get("size", self.store.qkd_key_len * 8)
        if not isinstance(number, int) or isinstance(number, bool) or number < 0:
            raise InvalidRequest(f"bad number {number!r}")
        if size != self.store.qkd_key_len * 8:
            raise InvalidRequest(f"size must be {self.store.qkd_key_len * 8} bits")
        granted = self.store.grant(self.sae_id, slave_sae, number)
        return {"keys": [_key_json(kid, key) for kid, key in granted]}

    def _dec_keys(self, master_sae, body):
        try:
            ids = [_parse_uuid(item["key_ID"]) for item in body["key_IDs"]]
        except (KeyError, TypeError):
            raise InvalidRequest("dec_keys body must be {\"key_IDs\": [{\"key_ID\": ...}]}") from None
        keys = self.store.retrieve(self.sae_id, master_sae, ids)
        return {"keys": [_key_json(kid, key) for kid, key in zip(ids, keys)]}

    def _session(self, body):
        verb = body.get("method")
        role = body.get("role")
        sid = body.get("key_stream_id")
        sid = _parse_uuid(sid) if sid is not None else None
        if verb == "OPEN_CONNECT":
            sid = self.store.open_connect(self.sae_id, role, body.get("source", ""),
                                          body.get("destination", ""), body.get("qos") or {}, sid)
            return {"key_stream_id": str(sid), "status": 0}
        if sid is None:
            raise InvalidRequest(f"{verb} requires key_stream_id")
        if verb == "GET_KEY":
            index = body.get("index", 0)
            if not isinstance(index, int):
                raise InvalidRequest(f"bad index {index!r}")
            key = self.store.stream_get_key(self.sae_id, role, sid, index)
            return {"key_stream_id": str(sid), "index": index,
                    "key": base64.b64encode(key).decode(), "metadata": {}, "status": 0}
        if verb == "CLOSE":
            self.store.close(self.sae_id, role, sid)
            return {"status": 0}
        raise InvalidRequest(f"unknown session method {verb!r}")


def _key_json(key_id, key):
    return {"key_ID": str(key_id), "key": base64.b64encode(key).decode()}


@dataclass
class KmeConfig:
    pool_size: int = 1000
    qkd_key_len: int = 32
    latency: LatencyModel = field(default_factory=LatencyModel)
    seed: int = 0
    sae_a: str = "sae-alice"
    sae_b: str = "sae-bob"
    kme_a_id: str = "kme-a"
    kme_b_id: str = "kme-b"


def kme_spawn(config: KmeConfig | None = None, **overrides) -> tuple[KmeEndpoint, KmeEndpoint]:
    """Create a synchronised KME pair. ``kme_a`` serves ``sae_a``, ``kme_b`` serves ``sae_b``."""
    if config is None:
        config = KmeConfig(**overrides)
    elif overrides:
        raise TypeError("pass either a KmeConfig or keyword overrides")
    if not isinstance(config.latency, LatencyModel):
        raise InvalidConfig("latency must be a LatencyModel")
    if config.latency.fixed_ms < 0 or config.latency.jitter_ms < 0:
        raise InvalidConfig("latency must be non-negative")
    store = KmeStore(config.pool_size, config.qkd_key_len, config.seed)
    a = KmeEndpoint(config.kme_a_id, config.sae_a, config.kme_b_id, store, config.latency)
    b = KmeEndpoint(config.kme_b_id, config.sae_b, config.kme_a_id, store, config.latency)
    return a, b


# -- HTTP service ---------------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def setup(self):
        super().setup()
        # headers and body go out in separate writes; Nagle + delayed ACK would add ~40 ms
        self.connection.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.server.connections.add(self.connection)

    def finish(self):
        self.server.connections.discard(self.connection)
        super().finish()

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _respond(self, status, payload):
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _run(self, method):
        body = None
        length = int(self.headers.get("Content-Length") or 0)
        if length:
            try:
                body = json.loads(self.rfile.read(length))
            except json.JSONDecodeError:
                self._respond(400, {"message": "body is not JSON", "error": "InvalidRequest"})
                return
        if body is not None and not isinstance(body, dict):
            self._respond(400, {"message": "body must be a JSON object", "error": "InvalidRequest"})
            return
        status, payload = self.server.endpoint.handle(method, self.path, body)
        self._respond(status, payload)

    def do_GET(self):
        self._run("GET")

    def do_POST(self):
        self._run("POST")


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True


class ServiceHandle:
    """A running HTTP front end for one :class:`KmeEndpoint`."""

    def __init__(self, server: _Server, endpoint: KmeEndpoint):
        self._server = server
        self.endpoint = endpoint
        host, port = server.server_address[:2]
        self.url = f"http://{host}:{port}"
        self._thread = threading.Thread(target=server.serve_forever, name=f"kme-{endpoint.kme_id}",
                                         daemon=True)
        self._thread.start()

    def shutdown(self):
        self._server.shutdown()
        self._server.server_close()
        # keep-alive connections would otherwise outlive the listener
        for conn in list(self._server.connections):
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def serve(endpoint: KmeEndpoint, host: str = "127.0.0.1", port: int = 0) -> ServiceHandle:
    try:
        server = _Server((host, port), _Handler)
    except OSError as exc:
        raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
    server.endpoint = endpoint
    server.connections = set()
    return ServiceHandle(server, endpoint)


class SpawnedKmePair:
    """A KME pair running in a child process (``python -m qkdkem.kmed``), reached over HTTP."""

    def __init__(self, config: KmeConfig | None = None, host: str = "127.0.0.1"):
        import subprocess

        config = config or KmeConfig()
        cmd = [sys.executable, "-m", "qkdkem.kmed", "--host", host,
               "--pool-size", str(config.pool_size), "--key-len", str(config.qkd_key_len),
               "--seed", str(config.seed), "--latency-ms", str(config.latency.fixed_ms),
               "--jitter-ms", str(config.latency.jitter_ms)]
        self._proc = subprocess.Popen(cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True)
        line = self._proc.stdout.readline()
        if not line:
            self._proc.kill()
            raise BindFailure("KME child process exited before announcing its URLs")
        info = json.loads(line)
        self.url_a, self.url_b = info["kme_a"], info["kme_b"]
        self.sae_a, self.sae_b = info["sae_a"], info["sae_b"]

    def close(self):
        if self._proc.poll() is None:
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=5)
            except Exception:
                self._proc.kill()
                self._proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def main(argv=None):
    """Serve a KME pair on two ports; print their URLs as one JSON line; run until stdin closes."""
    import argparse

    ap = argparse.ArgumentParser(prog="python -m qkdkem.kmed", description=main.__doc__)
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port-a", type=int, default=0)
    ap.add_argument("--port-b", type=int, default=0)
    ap.add_argument("--pool-size", type=int, default=1000)
    ap.add_argument("--key-len", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--latency-ms", type=float, default=0.0)
    ap.add_argument("--jitter-ms", type=float, default=0.0)
    args = ap.parse_args(argv)

    a, b = kme_spawn(KmeConfig(pool_size=args.pool_size, qkd_key_len=args.key_len, seed=args.seed,
                               latency=LatencyModel(args.latency_ms, args.jitter_ms, seed=args.seed)))
    ha, hb = serve(a, args.host, args.port_a), serve(b, args.host, args.port_b)
    print(json.dumps({"kme_a": ha.url, "kme_b": hb.url, "sae_a": a.sae_id, "sae_b": b.sae_id}),
          flush=True)
    try:
        sys.stdin.read()
    except KeyboardInterrupt:
        pass
    ha.shutdown()
    hb.shutdown()


if __name__ == "__main__":
    main()

"""SAE-side clients for the two ETSI key-delivery styles.

:class:`Etsi014Client` is the stateless block API (GET_STATUS, GET_KEY,
GET_KEY_WITH_IDS); :class:`Etsi004Client` is the stateful stream API
(OPEN_CONNECT, GET_KEY, CLOSE). Both talk JSON through a transport bound to
the caller's own KME: :class:`InProcessTransport` for a KME in this process,
:class:`HttpTransport` for one behind :func:`qkdkem.kme.serve`.
"""

from __future__ import annotations

import base64
import json
import time
import uuid
from dataclasses import asdict, dataclass
from enum import Enum

import requests

from .errors import (
    InvalidRequest, PeerSessionNotReady, SessionNotOpen, TransportError, TransportTimeout,
    UnknownKeyId, error_from_name,
)


class QkdRole(str, Enum):
    INITIATOR = "initiator"
    RESPONDER = "responder"


@dataclass(frozen=True)
class QosSpec:
    key_chunk_size: int = 32
    timeout: int = 1000  # ms
    max_bps: int = 0

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("QoS timeout must be positive")
        if self.key_chunk_size <= 0:
            raise ValueError("key_chunk_size must be positive")


@dataclass(frozen=True)
class StatusReport:
    source_kme_id: str
    target_kme_id: str
    stored_key_count: int
    key_size: int  # bits, as on the wire


@dataclass(frozen=True)
class RetryPolicy:
    """Backoff for :class:`PeerSessionNotReady`; gives up after ``cap_s``."""

    interval_s: float = 0.010
    cap_s: float = 1.0


def parse_key_id(value) -> uuid.UUID:
    kid = value if isinstance(value, uuid.UUID) else uuid.UUID(str(value))
    if kid.int == 0:
        raise UnknownKeyId("all-zero key id")
    return kid


def _check(status, payload):
    if status == 200:
        return payload
    raise error_from_name(payload.get("error", "TransportError"),
                          payload.get("message", f"HTTP {status}"))


class InProcessTransport:
    """Calls a :class:`~qkdkem.kme.KmeEndpoint` directly, JSON-encoding both ways."""

    def __init__(self, endpoint):
        self.endpoint = endpoint

    def request(self, method: str, path: str, body: dict | None = None) -> dict:
        if not self.endpoint.running:
            raise TransportError(f"{self.endpoint.kme_id} is down")
        wire = json.loads(json.dumps(body)) if body is not None else None
        status, payload = self.endpoint.handle(method, path, wire)
        return _check(status, json.loads(json.dumps(payload)))

    def close(self):
        pass


class HttpTransport:
    def __init__(self, base_url: str, timeout: float = 5.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._session = requests.Session()

    def request(self, method: str, path: str, body: dict | None = None) -> dict:
        try:
            resp = self._session.request(method, self.base_url + path, json=body,
                                         timeout=self.timeout)
        except requests.Timeout as exc:
            raise TransportTimeout(str(exc)) from exc
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        try:
            payload = resp.json()
        except ValueError:
            raise TransportError(f"non-JSON reply (HTTP {resp.status_code})") from None
        return _check(resp.status_code, payload)

    def close(self):
        self._session.close()


class Etsi014Client:
    def __init__(self, transport):
        self.transport = transport

    def get_status(self, peer: str) -> StatusReport:
        r = self.transport.request("GET", f"/api/v1/keys/{peer}/status")
        return StatusReport(r["source_KME_ID"], r["target_KME_ID"], r["stored_key_count"],
                            r["key_size"])

    def get_key(self, peer: str, number: int = 1, size: int | None = None
                ) -> list[tuple[uuid.UUID, bytes]]:
        """Master side: fetch ``number`` fresh keys shared with slave SAE ``peer``."""
        if number == 0:
            return []
        body = {"number": number}
        if size is not None:
            body["size"] = size
        r = self.transport.request("POST", f"/api/v1/keys/{peer}/enc_keys", body)
        return [(parse_key_id(k["key_ID"]), base64.b64decode(k["key"])) for k in r["keys"]]

    def get_key_with_ids(self, peer: str, ids) -> list[bytes]:
        """Slave side: fetch the keys master SAE ``peer`` obtained under ``ids``."""
        body = {"key_IDs": [{"key_ID": str(parse_key_id(i))} for i in ids]}
        r = self.transport.request("POST", f"/api/v1/keys/{peer}/dec_keys", body)
        by_id = {parse_key_id(k["key_ID"]): base64.b64decode(k["key"]) for k in r["keys"]}
        try:
            return [by_id[parse_key_id(i)] for i in ids]
        except KeyError as exc:
            raise UnknownKeyId(f"KME did not return key {exc}") from None


class Etsi004Client:
    """Stream client. Remembers which role it holds on each stream it opened."""

    def __init__(self, transport, retry: RetryPolicy | None = None):
        self.transport = transport
        self.retry = retry or RetryPolicy()
        self._roles: dict[uuid.UUID, QkdRole] = {}

    def _session(self, body):
        return self.transport.request("POST", "/api/v1/kms/sessions", body)

    def _role_for(self, key_stream_id, role):
        if role is not None:
            return QkdRole(role)
        try:
            return self._roles[key_stream_id]
        except KeyError:
            raise SessionNotOpen(f"no open end of {key_stream_id} in this client") from None

    def open_connect(self, role: QkdRole, source: str, destination: str,
                     qos: QosSpec | None = None, key_stream_id: uuid.UUID | None = None) -> uuid.UUID:
        role = QkdRole(role)
        if role is QkdRole.INITIATOR and key_stream_id is not None:
            raise InvalidRequest("initiator must not pass a key_stream_id")
        if role is QkdRole.RESPONDER and key_stream_id is None:
            raise InvalidRequest("responder needs the initiator's key_stream_id")
        body = {
            "method": "OPEN_CONNECT", "role": role.value, "source": source,
            "destination": destination, "qos": asdict(qos or QosSpec()),
            "key_stream_id": str(key_stream_id) if key_stream_id is not None else None,
        }
        sid = parse_key_id(self._session(body)["key_stream_id"])
        self._roles[sid] = role
        return sid

    def get_key(self, key_stream_id: uuid.UUID, index: int = 0, *, role: QkdRole | None = None,
                retry: bool = True) -> bytes:
        """Fetch key ``index`` of the stream; retries while the peer has not opened."""
        role = self._role_for(key_stream_id, role)
        body = {"method": "GET_KEY", "role": role.value, "key_stream_id": str(key_stream_id),
                "index": index}
        deadline = time.monotonic() + self.retry.cap_s
        while True:
            try:
                r = self._session(body)
                return base64.b64decode(r["key"])
            except PeerSessionNotReady:
                if not retry or time.monotonic() + self.retry.interval_s > deadline:
                    raise
                time.sleep(self.retry.interval_s)

    def close(self, key_stream_id: uuid.UUID, *, role: QkdRole | None = None):
        role = self._role_for(key_stream_id, role)
        self._session({"method": "CLOSE", "role": role.value, "key_stream_id": str(key_stream_id)})
        self._roles.pop(key_stream_id, None)


def fetch_ledger(transport, since: int = 0):
    """KME ledger entries from sequence number ``since`` on (diagnostic route)."""
    from .kme import LedgerEntry

    r = transport.request("GET", f"/api/v1/ledger?since={since}")
    return tuple(LedgerEntry(**e) for e in r["entries"])


@dataclass
class QkdBinding:
    """An SAE's view of the QKD layer: its own SAE id, its peer's, and clients for its KME."""

    local_sae: str
    peer_sae: str
    etsi014: Etsi014Client
    etsi004: Etsi004Client

    @classmethod
    def over(cls, transport, local_sae: str, peer_sae: str, retry: RetryPolicy | None = None):
        return cls(local_sae, peer_sae, Etsi014Client(transport), Etsi004Client(transport, retry))

    @classmethod
    def in_process(cls, endpoint, peer_endpoint, retry: RetryPolicy | None = None):
        return cls.over(InProcessTransport(endpoint), endpoint.sae_id, peer_endpoint.sae_id, retry)

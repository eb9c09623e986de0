"""KEM contract used as the post-quantum half of the hybrid construction.

Every suite is a :class:`KemSuite` with fixed byte lengths and a backend
implementing ``keypair(seed)``, ``encaps(pk, randomness)`` and
``decaps(sk, ct)``. All randomness is passed in explicitly so runs are
replayable.

The built-in ``mock256`` suite is **not secure** and exists only for tests:

    sk = seed
    pk = SHA-256(sk)
    ct = randomness
    ss = SHA-256(pk || ct)

so any value it produces can be recomputed with a plain SHA-256 tool.
``mlkem512/768/1024`` are registered when the optional ``kyber-py``
package is importable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Protocol

from .errors import MalformedCiphertext, MalformedKey, UnknownSuite

SEED_LEN = 32


class KemBackend(Protocol):
    def keypair(self, seed: bytes) -> tuple[bytes, bytes]: ...

    def encaps(self, pk: bytes, randomness: bytes) -> tuple[bytes, bytes]: ...

    def decaps(self, sk: bytes, ct: bytes) -> bytes: ...


@dataclass(frozen=True)
class KemSuite:
    name: str
    pk_len: int
    sk_len: int
    ct_len: int
    ss_len: int
    backend: Any = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        for attr in ("pk_len", "sk_len", "ct_len", "ss_len"):
            if getattr(self, attr) <= 0:
                raise ValueError(f"{self.name}: {attr} must be positive")


@dataclass(frozen=True)
class KemKeypair:
    pk: bytes
    sk: bytes


_REGISTRY: dict[str, KemSuite] = {}


def register_suite(suite: KemSuite, *, replace: bool = False) -> KemSuite:
    """Add a suite to the registry. Hybrid and handshake code look suites up by name only."""
    if suite.backend is None:
        raise ValueError("suite needs a backend")
    if suite.name in _REGISTRY and not replace:
        raise ValueError(f"suite {suite.name!r} already registered")
    _REGISTRY[suite.name] = suite
    return suite


def get_suite(suite: KemSuite | str) -> KemSuite:
    if isinstance(suite, KemSuite):
        if suite.backend is None:
            raise UnknownSuite(f"suite {suite.name!r} has no backend")
        return suite
    try:
        return _REGISTRY[suite]
    except KeyError:
        raise UnknownSuite(f"no KEM suite named {suite!r}") from None


def available_suites() -> list[str]:
    return sorted(_REGISTRY)


def keypair(suite: KemSuite | str, seed: bytes) -> KemKeypair:
    suite = get_suite(suite)
    if len(seed) != SEED_LEN:
        raise ValueError(f"seed must be {SEED_LEN} bytes, got {len(seed)}")
    pk, sk = suite.backend.keypair(bytes(seed))
    _check_len(suite, "pk", pk, suite.pk_len)
    _check_len(suite, "sk", sk, suite.sk_len)
    return KemKeypair(pk=pk, sk=sk)


def encaps(suite: KemSuite | str, pk: bytes, randomness: bytes) -> tuple[bytes, bytes]:
    """Return ``(ct, ss)``."""
    suite = get_suite(suite)
    if len(pk) != suite.pk_len:
        raise MalformedKey(f"{suite.name}: public key is {len(pk)} bytes, expected {suite.pk_len}")
    if len(randomness) != SEED_LEN:
        raise ValueError(f"randomness must be {SEED_LEN} bytes, got {len(randomness)}")
    ct, ss = suite.backend.encaps(bytes(pk), bytes(randomness))
    _check_len(suite, "ct", ct, suite.ct_len)
    _check_len(suite, "ss", ss, suite.ss_len)
    return ct, ss


def decaps(suite: KemSuite | str, sk: bytes, ct: bytes) -> bytes:
    suite = get_suite(suite)
    if len(sk) != suite.sk_len:
        raise MalformedKey(f"{suite.name}: secret key is {len(sk)} bytes, expected {suite.sk_len}")
    if len(ct) != suite.ct_len:
        raise MalformedCiphertext(
            f"{suite.name}: ciphertext is {len(ct)} bytes, expected {suite.ct_len}")
    ss = suite.backend.decaps(bytes(sk), bytes(ct))
    _check_len(suite, "ss", ss, suite.ss_len)
    return ss


def _check_len(suite, what, value, expected):
    # backend bug, not caller error
    if len(value) != expected:
        raise AssertionError(f"{suite.name} backend returned {what} of {len(value)} bytes, expected {expected}")


class MockKem:
    """Hash-only KEM for tests. Offers no security whatsoever."""

    def keypair(self, seed):
        return hashlib.sha256(seed).digest(), seed

    def encaps(self, pk, randomness):
        ct = randomness
        return ct, hashlib.sha256(pk + ct).digest()

    def decaps(self, sk, ct):
        pk = hashlib.sha256(sk).digest()
        return hashlib.sha256(pk + ct).digest()


MOCK256 = register_suite(KemSuite("mock256", pk_len=32, sk_len=32, ct_len=32, ss_len=32, backend=MockKem()))


class MlKemBackend:
    """ML-KEM via kyber-py's deterministic internal routines.

    The 32-byte seed is stretched with SHA3-512 into the ``(d, z)`` pair;
    encapsulation randomness is used directly as the message ``m``.
    """

    def __init__(self, impl):
        self.impl = impl

    def keypair(self, seed):
        dz = hashlib.sha3_512(seed).digest()
        ek, dk = self.impl._keygen_internal(dz[:32], dz[32:])
        return ek, dk

    def encaps(self, pk, randomness):
        ss, ct = self.impl._encaps_internal(pk, randomness)
        return ct, ss

    def decaps(self, sk, ct):
        return self.impl.decaps(sk, ct)


# (pk, sk, ct) lengths from FIPS 203; ss is 32 bytes for all three
_MLKEM_SIZES = {
    "mlkem512": ("ML_KEM_512", 800, 1632, 768),
    "mlkem768": ("ML_KEM_768", 1184, 2400, 1088),
    "mlkem1024": ("ML_KEM_1024", 1568, 3168, 1568),
}


def _register_mlkem():
    try:
        from kyber_py import ml_kem
    except ImportError:
        return
    for name, (attr, pk_len, sk_len, ct_len) in _MLKEM_SIZES.items():
        register_suite(KemSuite(name, pk_len, sk_len, ct_len, 32,
                                backend=MlKemBackend(getattr(ml_kem, attr))))


_register_mlkem()

"""Hybrid QKD + post-quantum KEM key establishment with a simulated ETSI KME pair."""

from .errors import *  # noqa: F401,F403
from .hybrid import (
    Flow, HybridCiphertext, HybridContext, HybridPublicPayload, HybridSecret, HybridSuite,
    PhaseTrace, QkdApi, hybrid_decaps, hybrid_encaps, hybrid_keygen, qkd_call_count,
)
from .kem import KemKeypair, KemSuite, available_suites, decaps, encaps, get_suite, keypair, register_suite
from .kme import KmeConfig, KmeEndpoint, KmeStore, LatencyModel, SpawnedKmePair, kme_spawn, serve
from .qkd_client import (
    Etsi004Client, Etsi014Client, HttpTransport, InProcessTransport, QkdBinding, QkdRole, QosSpec,
    RetryPolicy, StatusReport,
)

__version__ = "0.1.0"

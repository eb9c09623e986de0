"""
Hybrid QKD-KEM flows
====================

A hybrid suite pairs a KEM with a QKD key API and a flow. The shared
secret is the KEM secret followed by the QKD key.
"""

import os

from qkdkem import (
    Flow, HybridContext, HybridSuite, KmeConfig, QkdApi, QkdBinding, hybrid_decaps,
    hybrid_encaps, hybrid_keygen, kme_spawn,
)

a, b = kme_spawn(KmeConfig(pool_size=10))

for flow, api in [(Flow.CLIENT_INITIATED, QkdApi.ETSI014),
                  (Flow.CLIENT_INITIATED, QkdApi.ETSI004),
                  (Flow.SERVER_INITIATED, QkdApi.ETSI014)]:
    suite = HybridSuite("mock256", api, flow, 0x303C)
    client = HybridContext(QkdBinding.in_process(a, b))
    server = HybridContext(QkdBinding.in_process(b, a))

    payload = hybrid_keygen(suite, client, os.urandom(32))
    ct, server_secret = hybrid_encaps(suite, server, payload.to_bytes(), os.urandom(32))
    client_secret = hybrid_decaps(suite, client, ct.to_bytes())
    assert client_secret.ss == server_secret.ss
    print(f"{flow.value:17} {api.value}: payload {suite.payload_len} B, "
          f"ct {suite.ciphertext_len} B, secret {len(client_secret)} B")
    client.close()
    server.close()

###############################################################################
# The stream API needs both parties online at once, so it cannot serve the
# server-initiated flow.

try:
    HybridSuite("mock256", QkdApi.ETSI004, Flow.SERVER_INITIATED, 0x303C)
except Exception as exc:
    print(type(exc).__name__, exc)

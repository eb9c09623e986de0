"""
A key-exchange handshake
========================

Hybrid suites are negotiated like TLS groups. The client offers key
shares, the server picks the first mutually supported group and answers
with its share and a Finished MAC over the transcript.
"""

from qkdkem import Flow, KmeConfig, QkdApi, QkdBinding, kme_spawn
from qkdkem.handshake import GroupCatalog, HandshakeConfig, plain_group, run_handshake

a, b = kme_spawn(KmeConfig(pool_size=10))
client, server = QkdBinding.in_process(a, b), QkdBinding.in_process(b, a)

catalog = GroupCatalog.hybrid(flow=Flow.CLIENT_INITIATED, api=QkdApi.ETSI014)
for code, group in catalog.entries.items():
    print(hex(code), group)

tr = run_handshake(HandshakeConfig(catalog, catalog, [0x303C], client, server,
                                   ledger=lambda since: a.ledger_snapshot()[since:]))
print("ok:", tr.success, "digest", tr.client_digest.hex()[:16])
print("QKD calls per phase:", tr.call_counts())

###############################################################################
# A server that only knows the plain KEM forces a failed negotiation. The
# client-initiated flow has already fetched one QKD key by then.

tr = run_handshake(HandshakeConfig(catalog, GroupCatalog([plain_group("mock256")]),
                                   [0x303C], client, server))
print("error:", tr.error, "| keys granted but never used:", a.store.counts()["granted"])

###############################################################################
# The same exchange over a real loopback socket.

tr = run_handshake(HandshakeConfig(catalog, catalog, [0x303C], client, server,
                                   transport="socket"))
print("socket handshake:", tr.success, f"{tr.duration_ms('handshake'):.2f} ms")

"""
Talking to a simulated KME pair
===============================

``kme_spawn`` returns two KME endpoints sharing one key store. Each SAE
talks to its own KME, either through the stateless block API (ETSI 014)
or through the stateful stream API (ETSI 004).
"""

from qkdkem import KmeConfig, QkdBinding, QkdRole, QosSpec, kme_spawn, serve
from qkdkem.qkd_client import HttpTransport

a, b = kme_spawn(KmeConfig(pool_size=10, seed=7))
alice = QkdBinding.in_process(a, b)
bob = QkdBinding.in_process(b, a)

###############################################################################
# Block API: the master fetches a key, the slave asks for it by id.

print(alice.etsi014.get_status(bob.local_sae))
[(key_id, key)] = alice.etsi014.get_key(bob.local_sae)
[same] = bob.etsi014.get_key_with_ids(alice.local_sae, [key_id])
assert same == key
print("014 key", key_id, key.hex()[:16], "...")

###############################################################################
# Stream API: both ends open the stream before either reads from it.

sid = alice.etsi004.open_connect(QkdRole.INITIATOR, alice.local_sae, bob.local_sae, QosSpec())
bob.etsi004.open_connect(QkdRole.RESPONDER, alice.local_sae, bob.local_sae, QosSpec(), sid)
assert alice.etsi004.get_key(sid, 0) == bob.etsi004.get_key(sid, 0)
alice.etsi004.close(sid)
bob.etsi004.close(sid)

###############################################################################
# Every successful call lands in the shared ledger.

for entry in a.ledger_snapshot():
    print(entry.seq, entry.op, entry.api, entry.party, entry.role)

###############################################################################
# The same endpoint served over HTTP on loopback.

with serve(a) as handle:
    client = QkdBinding.over(HttpTransport(handle.url), a.sae_id, b.sae_id)
    print("over HTTP:", client.etsi014.get_status(b.sae_id))

"""
Benchmarking under KME latency
==============================

The bench module times each KEM phase and whole handshakes, with and
without QKD, against a KME pair that injects a fixed delay per call.
The same runs are available from the ``qkdkem-bench`` command.
"""

from qkdkem import LatencyModel
from qkdkem.bench import BenchConfig, bench_handshake, bench_ops, to_table

cfg = BenchConfig(flows=["client_initiated", "server_initiated"], iterations=10, warmup=1,
                  latency=LatencyModel(fixed_ms=20))

records, summary = bench_ops(cfg)
print(to_table(records))

###############################################################################
# Each QKD round trip adds about 20 ms, so the client-initiated handshake
# should come out roughly 40 ms above the plain baseline.

records, summary = bench_handshake(BenchConfig(iterations=10, warmup=1,
                                               latency=LatencyModel(fixed_ms=20)))
print(to_table(records))

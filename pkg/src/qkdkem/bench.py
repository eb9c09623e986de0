"""Benchmark harness: isolated KEM-operation timings and full handshake timings.

Each measured cell is (suite, flow, api, phase). Plain post-quantum runs use
``flow="baseline"`` and ``api="none"`` so they sit next to the hybrid runs
in the same CSV. Timing uses ``time.perf_counter`` around each phase;
warmup iterations are run and discarded.

CSV columns: ``suite,flow,api,phase,iteration,duration_us``.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import itertools
import logging
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import kem
from .errors import EmptyRun, InvalidConfig, InvalidSuite, QkdKemError
from .handshake import GroupCatalog, HandshakeConfig, plain_group, run_handshake
from .hybrid import Flow, HybridContext, HybridSuite, QkdApi, hybrid_decaps, hybrid_encaps, hybrid_keygen
from .kme import KmeConfig, LatencyModel, SpawnedKmePair, kme_spawn, serve
from .qkd_client import HttpTransport, QkdBinding, fetch_ledger

log = logging.getLogger(__name__)

CSV_COLUMNS = ("suite", "flow", "api", "phase", "iteration", "duration_us")
OP_PHASES = ("keygen", "encaps", "decaps")
BASELINE = "baseline"

# Published hardware-testbed figures (QKD over a ~500 km WAN, 20 iterations),
# printed as context only; they cannot be reproduced on loopback.
REFERENCE_HANDSHAKE_MS = {"mlkem768": (13.47, 310.76)}


@dataclass
class BenchConfig:
    suites: list[str] = field(default_factory=lambda: ["mock256"])
    flows: list[str] = field(default_factory=lambda: ["client_initiated"])
    apis: list[str] = field(default_factory=lambda: ["etsi014"])
    iterations: int = 50
    latency: LatencyModel = field(default_factory=LatencyModel)
    warmup: int = 5
    out: str | None = None
    kme: str = "inprocess"  # inprocess | loopback | spawn | "URL_A,URL_B"
    seed: int = 0
    parallel: int = 1
    pool_size: int | None = None
    baseline: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidConfig("iterations must be >= 1")
        if self.warmup < 0:
            raise InvalidConfig("warmup must be >= 0")
        if not self.suites:
            raise InvalidConfig("at least one suite is required")
        for name in self.suites:
            kem.get_suite(name)

    def hybrid_suites(self) -> list[HybridSuite]:
        """Every valid (suite, flow, api) combination; server-initiated ETSI 004 is skipped."""
        out = []
        for name, flow, api in itertools.product(self.suites, self.flows, self.apis):
            try:
                out.append(HybridSuite(kem.get_suite(name), api, flow, 0x303C))
            except InvalidSuite as exc:
                log.warning("skipping %s/%s/%s: %s", name, flow, api, exc)
        return out


@dataclass(frozen=True)
class BenchRecord:
    suite: str
    flow: str
    api: str
    phase: str
    iteration: int
    duration_us: float


@dataclass(frozen=True)
class CellStats:
    mean_ms: float
    std_ms: float
    n: int


def summarize(records) -> dict[tuple[str, str, str, str], CellStats]:
    cells: dict[tuple, list[float]] = {}
    for r in records:
        cells.setdefault((r.suite, r.flow, r.api, r.phase), []).append(r.duration_us / 1000.0)
    return {
        k: CellStats(statistics.fmean(v), statistics.stdev(v) if len(v) > 1 else 0.0, len(v))
        for k, v in cells.items()
    }


# -- KME plumbing ----------------------------------------------------------------


@dataclass
class KmeSession:
    client: QkdBinding
    server: QkdBinding
    ledger: object  # since_seq -> entries
    make_bindings: object  # () -> (client, server), for parallel workers


@contextlib.contextmanager
def open_kme(config: BenchConfig, pool_size: int):
    """Yield a :class:`KmeSession` for the configured KME mode."""
    kcfg = KmeConfig(pool_size=pool_size, latency=config.latency, seed=config.seed)
    mode = config.kme
    if mode == "inprocess":
        a, b = kme_spawn(kcfg)

        def make():
            return QkdBinding.in_process(a, b), QkdBinding.in_process(b, a)

        def ledger(since):
            return a.ledger_snapshot()[since:]

        c, s = make()
        yield KmeSession(c, s, ledger, make)
        return

    with contextlib.ExitStack() as stack:
        if mode == "loopback":
            a, b = kme_spawn(kcfg)
            ha = stack.enter_context(serve(a))
            hb = stack.enter_context(serve(b))
            url_a, url_b, sae_a, sae_b = ha.url, hb.url, a.sae_id, b.sae_id
        elif mode == "spawn":
            pair = stack.enter_context(SpawnedKmePair(kcfg))
            url_a, url_b, sae_a, sae_b = pair.url_a, pair.url_b, pair.sae_a, pair.sae_b
        else:
            try:
                url_a, url_b = mode.split(",")
            except ValueError:
                raise InvalidConfig("--kme URL form is 'URL_A,URL_B'") from None
            sae_a, sae_b = kcfg.sae_a, kcfg.sae_b

        def make():
            ta, tb = HttpTransport(url_a), HttpTransport(url_b)
            return QkdBinding.over(ta, sae_a, sae_b), QkdBinding.over(tb, sae_b, sae_a)

        c, s = make()
        def ledger(since):
            return fetch_ledger(c.etsi014.transport, since)

        yield KmeSession(c, s, ledger, make)


def _seeded_randbytes(seed):
    import random

    rng = random.Random(seed)
    return lambda n: rng.randbytes(n)


def _needed_keys(config, cells):
    return (config.iterations + config.warmup) * max(cells, 1) * 2 + 16


# -- isolated operations -----------------------------------------------------------


def _time_us(fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    return out, (time.perf_counter() - t0) * 1e6


def bench_ops(config: BenchConfig):
    """Time keygen/encaps/decaps for plain and hybrid KEMs. Returns ``(records, summary)``."""
    rand = _seeded_randbytes(config.seed)
    records = []
    if config.baseline:
        for name in config.suites:
            suite = kem.get_suite(name)
            for i in range(-config.warmup, config.iterations):
                kp, t_kg = _time_us(kem.keypair, suite, rand(32))
                (ct, _), t_en = _time_us(kem.encaps, suite, kp.pk, rand(32))
                _, t_de = _time_us(kem.decaps, suite, kp.sk, ct)
                if i >= 0:
                    for phase, t in zip(OP_PHASES, (t_kg, t_en, t_de)):
                        records.append(BenchRecord(name, BASELINE, "none", phase, i, t))

    hybrids = config.hybrid_suites()
    if hybrids:
        with open_kme(config, config.pool_size or _needed_keys(config, len(hybrids))) as kmes:
            for suite in hybrids:
                for i in range(-config.warmup, config.iterations):
                    cctx, sctx = HybridContext(kmes.client), HybridContext(kmes.server)
                    try:
                        payload, t_kg = _time_us(hybrid_keygen, suite, cctx, rand(32))
                        (ct, _), t_en = _time_us(hybrid_encaps, suite, sctx, payload, rand(32))
                        _, t_de = _time_us(hybrid_decaps, suite, cctx, ct)
                    finally:
                        cctx.close()
                        sctx.close()
                    if i >= 0:
                        for phase, t in zip(OP_PHASES, (t_kg, t_en, t_de)):
                            records.append(BenchRecord(suite.kem.name, suite.flow.value,
                                                       suite.api.value, phase, i, t))
    return records, summarize(records)


# -- full handshakes ----------------------------------------------------------------


def _handshake_cell(config, kmes, catalog, code, label, seed):
    """Run warmup + iterations of one handshake cell; return durations in µs."""
    rand = _seeded_randbytes(seed)

    def one(bindings):
        c, s = bindings
        tr = run_handshake(HandshakeConfig(catalog, catalog, [code], c, s, randbytes=rand))
        if not tr.success or tr.client_digest != tr.server_digest:
            raise QkdKemError(f"{label}: handshake failed ({tr.error})")
        return tr.duration_ms("handshake") * 1000.0

    for _ in range(config.warmup):
        one((kmes.client, kmes.server))
    if config.parallel <= 1:
        return [one((kmes.client, kmes.server)) for _ in range(config.iterations)]
    workers = [kmes.make_bindings() for _ in range(config.parallel)]
    with ThreadPoolExecutor(config.parallel) as pool:
        return list(pool.map(one, (workers[i % config.parallel] for i in range(config.iterations))))


def bench_handshake(config: BenchConfig):
    """Time complete handshakes, plain vs hybrid. Returns ``(records, summary)``."""
    hybrids = config.hybrid_suites()
    records = []
    with open_kme(config, config.pool_size or _needed_keys(config, len(hybrids))) as kmes:
        if config.baseline:
            for name in config.suites:
                group = plain_group(name)
                durations = _handshake_cell(config, kmes, GroupCatalog([group]), group.group_code,
                                            name, config.seed)
                records += [BenchRecord(name, BASELINE, "none", "handshake", i, d)
                            for i, d in enumerate(durations)]
        for n, suite in enumerate(hybrids):
            durations = _handshake_cell(config, kmes, GroupCatalog([suite]), suite.group_code,
                                        suite.name, config.seed + n + 1)
            records += [BenchRecord(suite.kem.name, suite.flow.value, suite.api.value, "handshake", i, d)
                        for i, d in enumerate(durations)]
    return records, summarize(records)


# -- output ----------------------------------------------------------------------


def to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([r.suite, r.flow, r.api, r.phase, r.iteration, f"{r.duration_us:.3f}"])
    return buf.getvalue()


def to_table(records) -> str:
    """Per (flow, api, phase): one row per suite with plain and hybrid mean/std in ms."""
    stats = summarize(records)
    suites = list(dict.fromkeys(r.suite for r in records))
    sections = list(dict.fromkeys((r.flow, r.api, r.phase) for r in records if r.flow != BASELINE))
    if not sections:
        sections = list(dict.fromkeys((BASELINE, "none", r.phase) for r in records))
    lines = []
    for flow, api, phase in sections:
        title = f"{phase}: plain vs {flow}/{api}" if flow != BASELINE else f"{phase}: plain only"
        lines.append(title)
        lines.append(f"{'Algorithm':<16}|{'Plain (ms)':^21}|{'Hybrid (ms)':^21}|")
        lines.append(f"{'':<16}|{'Mean':>10} {'Std':>10}|{'Mean':>10} {'Std':>10}|")
        lines.append("-" * 61)
        for suite in suites:
            base = stats.get((suite, BASELINE, "none", phase))
            hyb = stats.get((suite, flow, api, phase)) if flow != BASELINE else None
            cols = []
            for cell in (base, hyb):
                cols += [f"{cell.mean_ms:10.2f}", f"{cell.std_ms:10.2f}"] if cell else [f"{'-':>10}"] * 2
            lines.append(f"{suite:<16}|{cols[0]} {cols[1]}|{cols[2]} {cols[3]}|")
        lines.append("")
    for name, (plain, hybrid) in REFERENCE_HANDSHAKE_MS.items():
        if name in suites and any(s[2] == "handshake" for s in sections):
            lines.append(f"reference (hardware QKD testbed over WAN, not reproducible here): "
                         f"{name} handshake {plain:.2f} ms plain vs {hybrid:.2f} ms hybrid")
    return "\n".join(lines).rstrip() + "\n"


def emit(records, fmt: str = "csv", out=None) -> str:
    """Render records as CSV or a plain/hybrid comparison table; write to ``out`` if given."""
    records = list(records)
    if not records:
        raise EmptyRun("no records to emit")
    if fmt == "csv":
        text = to_csv(records)
    elif fmt == "table":
        text = to_table(records)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if out is not None:
        if hasattr(out, "write"):
            out.write(text)
        else:
            with open(out, "w", newline="") as fh:
                fh.write(text)
    return text


# -- CLI ---------------------------------------------------------------------------

_FLOWS = {"client": Flow.CLIENT_INITIATED.value, "server": Flow.SERVER_INITIATED.value}


def build_parser():
    ap = argparse.ArgumentParser(prog="qkdkem-bench",
                                 description="Benchmark plain vs hybrid QKD-KEM key establishment.")
    ap.add_argument("--suite", action="append", help="KEM suite (repeatable), default mock256")
    ap.add_argument("--flow", action="append", choices=sorted(_FLOWS), help="repeatable, default client")
    ap.add_argument("--api", action="append", choices=[a.value for a in QkdApi],
                    help="repeatable, default etsi014")
    ap.add_argument("--mode", choices=("ops", "handshake", "both"), default="both")
    ap.add_argument("--iterations", type=int, default=50)
    ap.add_argument("--warmup", type=int, default=5)
    ap.add_argument("--kme-latency-ms", type=float, default=0.0)
    ap.add_argument("--kme-jitter-ms", type=float, default=0.0)
    ap.add_argument("--kme", default="inprocess",
                    help="inprocess | loopback | spawn | URL_A,URL_B")
    ap.add_argument("--pool-size", type=int, default=None)
    ap.add_argument("--parallel", type=int, default=1, help="concurrent handshakes (KME contention)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-baseline", action="store_true")
    ap.add_argument("--format", choices=("csv", "table"), default="table")
    ap.add_argument("--out", help="output path (default stdout)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = BenchConfig(
            suites=args.suite or ["mock256"],
            flows=[_FLOWS[f] for f in (args.flow or ["client"])],
            apis=args.api or ["etsi014"],
            iterations=args.iterations,
            latency=LatencyModel(args.kme_latency_ms, args.kme_jitter_ms, seed=args.seed),
            warmup=args.warmup,
            out=args.out,
            kme=args.kme,
            seed=args.seed,
            parallel=args.parallel,
            pool_size=args.pool_size,
            baseline=not args.no_baseline,
        )
        records = []
        if args.mode in ("ops", "both"):
            records += bench_ops(config)[0]
        if args.mode in ("handshake", "both"):
            records += bench_handshake(config)[0]
        emit(records, args.format, args.out if args.out else sys.stdout)
    except (QkdKemError, OSError, ValueError) as exc:
        print(f"qkdkem-bench: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

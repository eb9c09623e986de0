import pytest

from qkdkem import KmeConfig, LatencyModel, QkdBinding, kme_spawn, serve
from qkdkem.qkd_client import HttpTransport


@pytest.fixture
def kme_pair():
    return kme_spawn(KmeConfig(pool_size=100, seed=0))


@pytest.fixture
def bindings(kme_pair):
    a, b = kme_pair
    return QkdBinding.in_process(a, b), QkdBinding.in_process(b, a)


@pytest.fixture
def served_pair():
    """KME pair behind real loopback HTTP; yields (kme_a, kme_b, transport_a, transport_b)."""
    a, b = kme_spawn(KmeConfig(pool_size=100, seed=0))
    with serve(a) as ha, serve(b) as hb:
        ta, tb = HttpTransport(ha.url), HttpTransport(hb.url)
        yield a, b, ta, tb
        ta.close()
        tb.close()


def make_latency(ms):
    return LatencyModel(fixed_ms=ms)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, status in sorted(RESULTS.items()):
        terminalreporter.write_line(f"[{status}] {label}")

import random
from pathlib import Path

import pytest

from epdg_audit.mock_epdg import MockEpdg
from epdg_audit.policy import EpdgPolicy
from epdg_audit.scanner import ProbeConfig

VECTORS = Path(__file__).resolve().parent.parent / "testdata" / "vectors"


def load_hex(name: str) -> bytes:
    text = (VECTORS / name).read_text()
    return bytes.fromhex("".join(line.split("#", 1)[0] for line in text.splitlines()))


def fast_cfg(seed=0, **kw) -> ProbeConfig:
    kw.setdefault("timeout_ms", 300)
    kw.setdefault("inter_probe_delay_ms", 0)
    kw.setdefault("retries", 0)
    return ProbeConfig(rng=random.Random(seed), **kw)


@pytest.fixture
def mock_server():
    started = []

    def make(policy: EpdgPolicy, **kw) -> MockEpdg:
        server = MockEpdg(policy, seed=kw.pop("seed", 0), **kw).start()
        started.append(server)
        return server

    yield make
    for s in started:
        s.stop()


def monte_carlo_coverage(k: int, n: int, trials: int = 100_000, seed: int = 0) -> float:
    """Fraction of trials in which n uniform draws from k keys hit every key."""
    import numpy as np

    rng = np.random.default_rng(seed)
    hits = 0
    for start in range(0, trials, 10_000):
        m = min(10_000, trials - start)
        draws = rng.integers(0, k, size=(m, n), dtype=np.uint16)
        seen = np.zeros((m, k), dtype=bool)
        seen[np.arange(m)[:, None], draws] = True
        hits += int(seen.all(axis=1).sum())
    return hits / trials


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda x: int(x.split()[1])):
            terminalreporter.write_line(line)

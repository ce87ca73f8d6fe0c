import numpy as np
import pytest

from tracetime.trace_model import Batch, Label, make_events


def batch_of(rows, label=Label.NORMAL, batch_id="b", scenario="default"):
    """Batch from ``(probe, dir, pid, t_ns)`` rows; tgid mirrors pid."""
    return Batch(batch_id, label, scenario, make_events([(p, d, pid, pid, t) for p, d, pid, t in rows]))


def random_batch(rng: np.random.Generator, n_pids=3, max_events=40, probes=("a", "b", "c")):
    """Random well-formed trace: per pid a random nesting of calls, pids interleaved."""
    rows = []
    for pid in range(1, n_pids + 1):
        t = int(rng.integers(1, 1000))
        stack = []
        for _ in range(int(rng.integers(1, max_events))):
            if stack and rng.random() < 0.5:
                name = stack.pop()
                rows.append((name, "return", pid, t))
            else:
                name = str(rng.choice(probes))
                stack.append(name)
                rows.append((name, "enter", pid, t))
            # ties are legal; arrival order breaks them
            t += int(rng.integers(0, 50))
    # stable sort: equal timestamps keep per-pid emission order, resolved by arrival index
    rows.sort(key=lambda r: r[3])
    return batch_of(rows)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import DATASET, RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    if not DATASET:
        RESULTS.setdefault("7 published data set", "SKIP  TRACETIME_DATASET not set (published data not available)")
    for key in sorted(RESULTS):
        terminalreporter.write_line(f"[{key}] {RESULTS[key]}")

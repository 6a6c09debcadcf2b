import numpy as np
import pytest

from cateq.data import Dataset, Provenance

ACCEPTANCE_LINES = []


@pytest.fixture
def report_line(capsys):
    """Record a PASS/FAIL line; echoed inline and again in the session summary."""

    def emit(label, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_rct(n=400, d=3, e1=0.5, seed=0, effect=None):
    """Small RCT with ``y = x0 + t * effect(x) + noise``."""
    gen = np.random.default_rng(seed)
    x = gen.random((n, d))
    t = (gen.random(n) < e1).astype(int)
    tau = effect(x) if effect is not None else 1.0 + x[:, 0]
    y = x[:, 0] + t * tau + gen.normal(0, 0.5, n)
    return Dataset(x=x, t=t, y=y, e1=e1, provenance=Provenance.RCT, name="toy")


@pytest.fixture
def rct():
    return make_rct()

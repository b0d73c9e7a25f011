import numpy as np
import pytest

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(cid, title, passed, detail):
    ACCEPTANCE[cid] = (title, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: (int("".join(ch for ch in c if ch.isdigit())), c)):
        title, passed, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {cid:<4} {title}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

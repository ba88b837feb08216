import numpy as np
import pytest

from sqlgrade.data import generate_synthetic


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"], op_flags=["readwrite"])
    for _ in it:
        ix = it.multi_index
        old = x[ix]
        x[ix] = old + h
        fp = f()
        x[ix] = old - h
        fm = f()
        x[ix] = old
        grad[ix] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic, numeric, floor=1e-8):
    """Max elementwise |a-n| / max(|a|+|n|, floor)."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


@pytest.fixture(scope="session")
def synthetic_200():
    return generate_synthetic(200, seed=7)


# acceptance results are collected here and echoed in the terminal summary
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")

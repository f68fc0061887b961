import numpy as np
import pytest

from hiddenprox import DgpSpec, simulate


@pytest.fixture(scope="session")
def binary_spec():
    return DgpSpec.binary()


@pytest.fixture(scope="session")
def mixed_spec():
    return DgpSpec.mixed()


@pytest.fixture(scope="session")
def binary_big(binary_spec):
    return simulate(binary_spec, 100_000, seed=11)


@pytest.fixture(scope="session")
def mixed_big(mixed_spec):
    return simulate(mixed_spec, 10_000, seed=12)


def expit(x):
    from scipy.special import expit as _expit
    return _expit(np.asarray(x, dtype=float))


# acceptance reporting: one PASS/FAIL line per criterion

ACCEPTANCE_LINES = []


class _Recorder:
    def __call__(self, key, title, checks):
        """Record criterion ``key``; ``checks`` is a list of ``(description, ok)``."""
        ok = all(flag for _, flag in checks)
        failed = "; ".join(desc for desc, flag in checks if not flag)
        line = f"{'PASS' if ok else 'FAIL'}  {key}: {title}"
        if failed:
            line += f"  [failed: {failed}]"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok


@pytest.fixture(scope="session")
def acceptance():
    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

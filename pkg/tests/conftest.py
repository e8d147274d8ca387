import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_diff(f, x, eps=1e-6):
    """Numerical gradient of scalar ``f`` (numpy in, float out) at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


# acceptance criteria report: one PASS/FAIL line each, repeated in the terminal summary
ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def report(request):
    lines = request.config.stash[ACCEPTANCE]

    def add(name: str, ok: bool | None, detail: str = "") -> None:
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[ok]
        line = f"{status}  {name}" + (f"  [{detail}]" if detail else "")
        lines.append(line)
        print(line)

    return add


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

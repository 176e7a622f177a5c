import numpy as np
import pytest
from hypothesis import settings

from stakessm.data import build_corpus, prepare_spec
from stakessm.simulate import SimConfig, simulate_corpus

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_sim():
    """40 baseline matches at the reference parameters."""
    return simulate_corpus(SimConfig(n_matches=40, seed=3))


@pytest.fixture(scope="session")
def small_corpus(small_sim):
    spec = prepare_spec(small_sim.records, "baseline")
    return spec, build_corpus(small_sim.records, spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = {}


@pytest.fixture
def acceptance(request):
    """``acceptance(label, ok, detail)`` records one criterion for the terminal summary."""

    def record(label, ok, detail=""):
        _ACCEPTANCE[request.node.nodeid] = (label, bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    outcomes = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when == "call" or key != "passed":
                outcomes[rep.nodeid] = key
    terminalreporter.section("acceptance criteria")
    for nodeid, (label, ok, detail) in sorted(_ACCEPTANCE.items(), key=lambda kv: int(kv[1][0][2:].split()[0])):
        status = "PASS" if ok and outcomes.get(nodeid) == "passed" else "FAIL"
        terminalreporter.write_line(f"{label}: {status}  {detail}")

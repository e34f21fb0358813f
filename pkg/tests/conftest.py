import threading

import numpy as np
import pytest

from epmixed import EPConfig, ModelSpec, PriorSpec, SimConfig, simulate_dataset
from epmixed.distributed import run_worker, serve_central


def small_problem(likelihood, L=20, seed=0, obs=10):
    data, truth = simulate_dataset(SimConfig.scalability_setting(likelihood, L, seed=seed, obs_per_group=obs))
    spec = ModelSpec(data.likelihood, PriorSpec.default(data.likelihood, data.P, data.Q))
    return data, spec, truth


def run_distributed(data, spec, cfg, n_workers, backend=None):
    """Central node plus ``n_workers`` workers on loopback threads."""
    ready = threading.Event()
    addr, result, errors = {}, {}, []

    def on_listen(a):
        addr["a"] = a
        ready.set()

    def central():
        try:
            result["post"] = serve_central(("127.0.0.1", 0), data, spec, cfg, n_workers, on_listen=on_listen)
        except Exception as e:  # surfaced below
            errors.append(e)
            ready.set()

    t = threading.Thread(target=central)
    t.start()
    assert ready.wait(30)
    if errors:
        raise errors[0]
    target = f"{addr['a'][0]}:{addr['a'][1]}"
    workers = [threading.Thread(target=run_worker, args=(target, backend)) for _ in range(n_workers)]
    for w in workers:
        w.start()
    t.join(120)
    for w in workers:
        w.join(30)
    if errors:
        raise errors[0]
    return result["post"]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def fixed_cfg():
    return EPConfig(min_passes=5, max_passes=5)


# -- acceptance report: one pass/fail line per criterion in the terminal summary

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """``record(number, title, ok, detail)`` stores and prints one criterion result."""
    lines = request.config.stash[_ACCEPTANCE]
    seen = []

    def record(number, title, ok, detail=""):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        seen.append(line)
        lines.append(line)
        print(line)
        return ok

    yield record
    if not seen:
        lines.append(f"criterion {request.node.name} FAIL: error before the check ran")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: s.split()[1]):
            terminalreporter.write_line(line)

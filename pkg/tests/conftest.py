import numpy as np
import pytest

from shieldplan import cache
from shieldplan.config import Config
from shieldplan.sim import load_caches


@pytest.fixture(scope="session")
def cfg():
    return Config()


@pytest.fixture(scope="session")
def cache_root():
    return cache.cache_dir()


@pytest.fixture(scope="session")
def caches(cfg, cache_root):
    """Default certificate and QMDP tables, built once and reused from disk."""
    return load_caches(cfg, cache_root)


@pytest.fixture(scope="session")
def cert(caches):
    return caches.cert


VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[VERDICTS] = {}


@pytest.fixture
def verdict(request):
    """Record one acceptance line; call before asserting so failures are listed too."""
    def record(number: int, ok: bool, detail: str) -> bool:
        request.config.stash[VERDICTS][number] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        ok, detail = lines[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

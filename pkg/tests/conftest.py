import numpy as np
import pytest

from pewire.model import ModelConfig

ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = {}


@pytest.fixture
def acceptance(request):
    """Record one acceptance line: ``acceptance(criterion, passed, detail)``."""
    results = request.config.stash[ACCEPTANCE_KEY]

    def record(criterion: str, passed, detail: str = ""):
        status = "PASS" if passed is True else ("FAIL" if passed is False else str(passed))
        results[criterion] = (status, detail)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")

    def order(key):
        head = key.split()[0]
        digits = "".join(ch for ch in head if ch.isdigit())
        return (int(digits) if digits else 99, key)

    for criterion in sorted(results, key=order):
        status, detail = results[criterion]
        terminalreporter.write_line(f"[{status}] {criterion}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """2-layer, d=16 model on 8x8 single-channel images (4 patches)."""
    return ModelConfig(image_size=8, patch_size=4, channels=1, embed_dim=16, num_layers=2, num_heads=2, num_classes=3)


@pytest.fixture
def small_config():
    """4-layer model used by the wiring tests."""
    return ModelConfig(image_size=8, patch_size=2, channels=2, embed_dim=8, num_layers=4, num_heads=2, num_classes=5)

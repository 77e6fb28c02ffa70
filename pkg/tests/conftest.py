import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from splitlora.model import ModelConfig, build_model  # noqa: E402


@pytest.fixture(scope="session")
def desk():
    cfg = ModelConfig()
    base, adapters = build_model(cfg, seed=0)
    return cfg, base, adapters


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])

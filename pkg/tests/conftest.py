import sys
import time
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).resolve().parent))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TOY_SEEDS = (0, 1, 2, 3, 4)
TOY_METHODS = ("ddpo", "dspo", "ddspo_practical", "ddspo_efficient")


@pytest.fixture(scope="session")
def toy_runs():
    """The default toy protocol over five seeds, computed once per session."""
    from ddspo_lab.experiment import ToyConfig, run_toy

    t0 = time.perf_counter()
    runs = [run_toy(ToyConfig(), s, TOY_METHODS) for s in TOY_SEEDS]
    return runs, time.perf_counter() - t0


@pytest.fixture(scope="session")
def small_reference():
    """A briefly pretrained reference on the default toy data (fast, for plumbing tests)."""
    from dataclasses import replace

    from ddspo_lab.experiment import ToyConfig, train_reference

    cfg = replace(ToyConfig(), pretrain_steps=300, train_per_class=300, hidden_width=32)
    return cfg, train_reference(cfg, 0)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criteria A1-A10")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)

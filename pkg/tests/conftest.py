import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def default_report():
    from rttd.harness import default_scenario, run_scenario

    return run_scenario(default_scenario(0), keep_models=True)


@pytest.fixture(scope="session")
def default_data():
    from rttd.harness import default_scenario

    cfg = default_scenario(0)
    return cfg, cfg.dataset.build(cfg.scenario_seed)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record_criterion():
    """Log one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)

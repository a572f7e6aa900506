import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo",
    deadline=None,
    derandomize=True,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance():
    def record(number: int, title: str, checks: list[tuple[bool, str]]):
        ok = all(c for c, _ in checks)
        failed = [d for c, d in checks if not c]
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2} {title}: " + "; ".join(failed or [d for _, d in checks])
        ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[2])):
            terminalreporter.write_line(line)

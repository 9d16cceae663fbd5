import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance check; lines are echoed in
    the terminal summary so the verdicts survive output capture."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def record(tag: str, passed: bool, detail: str) -> None:
        line = f"[criterion {tag}] {'PASS' if passed else 'FAIL'}: {detail}"
        lines.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance checks")
        for line in lines:
            terminalreporter.write_line(line)


def random_spd(rng: np.random.Generator, n: int, scale: float = 1.0) -> np.ndarray:
    """Well-conditioned random symmetric positive-definite matrix."""
    q = rng.normal(size=(n, n))
    return scale * (q @ q.T + n * np.eye(n))

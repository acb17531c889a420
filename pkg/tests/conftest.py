import pytest

_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, name, ok, detail)``."""

    def record(n, name, ok, detail=""):
        _CRITERIA[n] = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {name}" + (f" ({detail})" if detail else "")
        print(_CRITERIA[n])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])

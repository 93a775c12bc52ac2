import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for the acceptance summary."""
    def record(number, ok, detail):
        _VERDICTS.append((number, f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)

import pytest

VERDICTS = []


@pytest.fixture
def verdict():
    """Record a PASS/FAIL line for an acceptance criterion and assert on it."""

    def _record(criterion, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        VERDICTS.append(line)
        print(line)
        assert ok, line

    return _record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)

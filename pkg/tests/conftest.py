import pytest

_LINES = {}


@pytest.fixture
def report():
    """Record the one-line outcome of an acceptance criterion."""

    def record(criterion, passed, detail):
        status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
        line = f"criterion {criterion}: {status} - {detail}"
        _LINES.setdefault(str(criterion), []).append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_LINES):
        for line in _LINES[key]:
            terminalreporter.write_line(line)

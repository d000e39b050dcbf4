import pytest

_LINES = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL/WARN line for the acceptance summary."""
    def record(number, title, status, detail=""):
        line = f"[{status}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
        _LINES.append((number, line))
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_LINES):
        terminalreporter.write_line(line)

import pytest

_LINES: dict = {}


@pytest.fixture
def report():
    """``report(n, ok, detail)`` records one line for the acceptance summary."""
    def record(n: int, ok: bool, detail: str) -> None:
        _LINES[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_LINES[n])
    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        terminalreporter.write_line(_LINES[n])

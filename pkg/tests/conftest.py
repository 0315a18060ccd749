import pytest

_LINES: dict[int, tuple[bool, str]] = {}
_EXTRA: dict[int, list[str]] = {}


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion for the terminal summary."""

    def record(number: int, passed: bool, detail: str, extra=()):
        _LINES[number] = (bool(passed), detail)
        _EXTRA[number] = list(extra)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_LINES):
        ok, detail = _LINES[n]
        tr.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        for line in _EXTRA[n]:
            tr.write_line(f"    {line}")

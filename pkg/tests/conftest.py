import pytest

_LINES = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash.setdefault(_LINES, {})

    def record(number: int, ok: bool | None, detail: str, seconds: float | None = None):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        timing = "" if seconds is None else f" [{seconds:.1f} s]"
        lines[number] = f"criterion {number:>2}: {status}  {detail}{timing}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])

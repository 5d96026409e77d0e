import pytest

_LINES: list[str] = []


@pytest.fixture
def acceptance_line(capsys):
    """Record one PASS/FAIL line; it is echoed live and again in the session summary."""
    def emit(number: int, ok: bool, detail: str, seconds: float) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}  [{seconds:.1f} s]"
        _LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)

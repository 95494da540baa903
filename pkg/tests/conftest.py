import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one criterion line: ``verdict(num, text, ok)``; the line is echoed and kept for the summary."""

    def _record(num: int, text: str, ok: bool) -> bool:
        line = f"[criterion {num:2d}] {'PASS' if ok else 'FAIL'}  {text}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

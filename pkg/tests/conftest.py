import pytest

# criterion id -> (passed, detail), filled by test_acceptance
VERDICTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(VERDICTS):
        ok, detail = VERDICTS[key]
        terminalreporter.write_line(f"criterion {key:>2}: {'PASS' if ok else 'FAIL'}  {detail}")

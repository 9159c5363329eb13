from __future__ import annotations

# Criterion verdicts recorded by test_acceptance.py, echoed after the run so they
# appear even when pytest captures per-test output.
VERDICTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[key])

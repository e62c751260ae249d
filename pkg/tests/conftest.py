"""Prints the acceptance verdicts collected by test_acceptance.py at the end
of the run, one PASS/FAIL line per criterion."""

VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in VERDICTS:
        terminalreporter.write_line(line)

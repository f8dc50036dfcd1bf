"""Shared test plumbing: the acceptance-criteria summary block.

Acceptance tests append one line per criterion to ACCEPTANCE_LINES; the
terminal-summary hook prints them after the run so every criterion shows
an explicit PASS or FAIL regardless of output capture.
"""

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)

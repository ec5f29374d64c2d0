"""Shared pytest wiring: surfaces the capability-gate verdict lines.

Capture is file-descriptor level by default, so lines printed inside the
acceptance tests never reach the terminal. They are collected here
instead and replayed in the end-of-run summary, where pytest writes with
capture suspended.
"""

GATE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("capability gate")
        for line in GATE_LINES:
            terminalreporter.write_line(line)

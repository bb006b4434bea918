import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

# filled by test_acceptance, echoed after the run so the lines survive output capture
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])

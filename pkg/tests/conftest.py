import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

# Lines of the form "PASS criterion N: ..." collected by the acceptance suite.
CRITERIA = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

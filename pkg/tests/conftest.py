# Acceptance tests append one line per criterion here; the lines are
# printed in the terminal summary so they appear in plain `pytest -v` runs.
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

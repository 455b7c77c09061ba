"""Shared test configuration: the acceptance-criteria result board.

Acceptance tests register one line per criterion through `record`; the
terminal summary prints the full board after the run so pass/fail status
is visible even with output capture enabled.
"""

ACCEPTANCE = {}


def record(num, name, passed, detail=""):
    """Log a criterion outcome and assert it in one step."""
    ACCEPTANCE[num] = (name, bool(passed), detail)
    assert passed, f"criterion {num} ({name}): {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[num]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(
            f"[{status}] criterion {num:2d} | {name}: {detail}")

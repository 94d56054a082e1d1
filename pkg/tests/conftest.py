"""Shared pytest hooks: print one summary line per acceptance criterion.

The acceptance tests are named test_criterion_NN_<slug>; after the run the
terminal summary lists each as "PASS criterion N: <slug words>" so the
acceptance state is readable without scanning the full verbose output.
"""

import re

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_outcomes = {}


def pytest_runtest_logreport(report):
    match = _CRITERION.search(report.nodeid)
    if match is None:
        return
    number = int(match.group(1))
    if report.when == "call" or (report.when == "setup" and report.failed):
        _outcomes[number] = (report.outcome, match.group(2))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        outcome, slug = _outcomes[number]
        word = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(
            f"{word} criterion {number}: {slug.replace('_', ' ')}"
        )

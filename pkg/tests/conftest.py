"""Shared pytest hooks: print the acceptance scorecard after the run."""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    for name in ("test_acceptance", "tests.test_acceptance"):
        mod = sys.modules.get(name)
        if mod is not None and getattr(mod, "SCORECARD", None):
            terminalreporter.section("acceptance scorecard")
            for line in mod.SCORECARD:
                terminalreporter.write_line(line)
            break

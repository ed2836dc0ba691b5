import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Replay the acceptance-gate PASS/FAIL lines after the run.

    test_acceptance prints one line per criterion as it executes, but
    pytest's default fd-level capture swallows them for passing tests;
    replaying the collected lines here keeps one visible line per
    criterion in every run's output.
    """
    for name in ("test_acceptance", "tests.test_acceptance"):
        mod = sys.modules.get(name)
        if mod is not None and getattr(mod, "REPORT_LINES", None):
            terminalreporter.section("acceptance criteria")
            for line in mod.REPORT_LINES:
                terminalreporter.write_line(line)
            break

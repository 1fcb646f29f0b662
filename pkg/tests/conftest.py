import sys


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance criteria verdicts, one line each, at the end of the run."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results, key=lambda k: (int(k.rstrip("abcd")), k)):
        terminalreporter.write_line(results[key])

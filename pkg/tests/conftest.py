import sys


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not (mod.RESULTS or mod.STARTED):
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, 13):
        line = mod.RESULTS.get(n)
        if line is None:
            status = "FAIL (errored before a verdict)" if n in mod.STARTED else "not run"
            line = f"criterion {n:>2}: {status}"
        terminalreporter.write_line(line)

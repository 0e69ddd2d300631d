import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance-criterion result lines after the test summary."""
    lines = []
    for name, module in sys.modules.items():
        if name.rpartition(".")[2] == "test_acceptance" and module is not None:
            lines = getattr(module, "REPORT_LINES", [])
            if lines:
                break
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

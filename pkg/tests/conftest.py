import sys

from hypothesis import settings

# fixed example sequence so the suite gives the same verdict on every run
settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)

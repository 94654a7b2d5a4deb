import os
import sys

# helpers (oracles, synthetic data) live next to the tests
sys.path.insert(0, os.path.dirname(__file__))


def pytest_terminal_summary(terminalreporter):
    from criteria import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key, (title, passed, detail) in RESULTS.items():
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {key:<9} {title}: {detail}")

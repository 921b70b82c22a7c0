import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    # one line per acceptance criterion, in criterion order
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(module.RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(module.format_line(number, passed, detail))

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (title, outcome, detail)
_ACCEPTANCE: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion check")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    detail = getattr(item, "acceptance_detail", "")
    passed = call.excinfo is None
    _ACCEPTANCE[number] = [title, "PASS" if passed else "FAIL", detail]


@pytest.fixture
def acceptance_detail(request):
    """Call with a short measurement string; it is echoed in the summary."""

    def record(text: str) -> None:
        request.node.acceptance_detail = text

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, outcome, detail = _ACCEPTANCE[number]
        line = f"criterion {number:2d} {outcome}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)

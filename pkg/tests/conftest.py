import re

import pytest

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = re.match(r"test_criterion_(\d+)_", item.name)
    if m and rep.when == "call":
        detail = getattr(item, "criterion_detail", "")
        _CRITERIA[int(m.group(1))] = ("PASS" if rep.passed else "FAIL", detail)


@pytest.fixture
def detail(request):
    """Tests call ``detail("...")`` to attach measured numbers to their criterion line."""

    def note(text: str) -> None:
        request.node.criterion_detail = text

    return note


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        status, text = _CRITERIA[k]
        terminalreporter.write_line(f"criterion {k}: {status}  {text}".rstrip())

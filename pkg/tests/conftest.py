import pytest

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.fixture
def note(request):
    """Attach a line of measured detail to the acceptance summary."""

    def add(text):
        request.node.user_properties.append(("note", str(text)))

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "passed": True, "notes": [], "seconds": 0.0})
    entry["passed"] = entry["passed"] and rep.passed
    entry["seconds"] += rep.duration
    if rep.when == "call":
        entry["notes"] = [text for key, text in item.user_properties if key == "note"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_criteria):
        c = _criteria[number]
        status = "PASS" if c["passed"] else "FAIL"
        tr.write_line(f"[{status}] criterion {number:2d}: {c['title']} ({c['seconds']:.1f} s)")
        for text in c["notes"]:
            for line in text.splitlines():
                tr.write_line(f"           {line}")
    passed = sum(c["passed"] for c in _criteria.values())
    tr.write_line(f"{passed}/{len(_criteria)} acceptance criteria passed")

import pytest

_RESULTS = {}


def pytest_runtest_logreport(report):
    k = dict(report.user_properties).get("acceptance")
    if k is None:
        return
    entry = _RESULTS.setdefault(k, {"ok": True, "details": []})
    if report.failed:
        entry["ok"] = False
    if report.when == "call":
        detail = dict(report.user_properties).get("detail")
        if detail:
            entry["details"].append(detail)


@pytest.fixture(autouse=True)
def _acceptance_tag(request, record_property):
    marker = request.node.get_closest_marker("acceptance")
    if marker is not None:
        record_property("acceptance", marker.args[0])


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_RESULTS):
        e = _RESULTS[k]
        terminalreporter.write_line(f"ACCEPTANCE {k}: {'PASS' if e['ok'] else 'FAIL'}  {'; '.join(e['details'])}")

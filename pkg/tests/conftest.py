"""Collects one pass/fail verdict per acceptance criterion and prints them at the end."""

import pytest

CRITERIA = {
    1: "gradient correctness",
    2: "flags-off equivalence",
    3: "freeze guarantee",
    4: "two-step ordering",
    5: "context utility",
    6: "integration ablation",
    7: "gating sanity",
    8: "context window semantics",
    9: "decoding correctness",
    10: "efficiency trend",
    11: "BLEU oracle",
}

_outcomes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): test backing acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes.setdefault(marker.args[0], []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        results = _outcomes.get(n)
        if results is None:
            verdict = "NOT RUN"
        elif all(r == "passed" for r in results):
            verdict = "PASS"
        else:
            verdict = "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} ({name}): {verdict}  [{len(results or [])} tests]")

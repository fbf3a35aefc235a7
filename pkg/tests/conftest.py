"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

CRITERIA = {
    1: "closed-form reproduction, constant risk aversion",
    2: "closed-form reproduction, state-dependent risk aversion and regulator",
    3: "spike-limit oracle sweep and perturbed-strategy rejection",
    4: "consistency fixed point and singularity guard",
    5: "mean-field error slope -1 +/- 0.15",
    6: "asymptotic Nash gap slope -1/2 +/- 0.2 with every cell inside the band",
    7: "bitwise manifest reruns across thread counts",
}

_outcomes = {}


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    if report.when == "call":
        _outcomes.setdefault(crit, []).append(report.passed)
    elif not report.passed:
        _outcomes.setdefault(crit, []).append(False)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        res = _outcomes.get(n)
        if res is None:
            continue
        word = "PASS" if all(res) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {word}  {title} ({sum(res)}/{len(res)} tests)")

"""Collect acceptance outcomes and print one PASS/FAIL line per criterion."""

from collections import defaultdict

import pytest

CRITERIA = {
    1: "certificate reproduction",
    2: "Monte Carlo soundness",
    3: "expected inverse distance monotone in k",
    4: "QP matches brute-force grid search",
    5: "barrier value and gradient match brute force",
    6: "image safe-set composition matches per-pixel evaluation",
    7: "forward invariance under static barriers",
    8: "suite reproduction",
    9: "bit-identical trajectories",
}

_outcomes: dict[int, list[tuple[str, str, list]]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        if hasattr(report, "wasxfail"):
            state = "xfail" if report.skipped else "xpass"
        else:
            state = report.outcome
        notes = [f"{k}={v}" for k, v in item.user_properties]
        _outcomes[n].append((item.name, state, notes))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in CRITERIA.items():
        runs = _outcomes.get(n)
        if not runs:
            tr.write_line(f"criterion {n}: NOT RUN  {title}")
            continue
        ok = all(state == "passed" for _, state, _ in runs)
        tr.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}")
        for name, state, notes in runs:
            detail = f"  ({'; '.join(notes)})" if notes else ""
            tr.write_line(f"    {state:<7} {name}{detail}")

"""Acceptance bookkeeping: tests tagged ``@pytest.mark.criterion(name)`` roll up into one line per criterion."""

import pytest

CRITERIA = [
    "Table arithmetic reproduction",
    "Gradient correctness",
    "GAE oracle equivalence",
    "Desk-scale learning",
    "Difficulty monotonicity",
    "Curriculum rule suite",
    "Terrain invariant suite",
    "Determinism",
    "Critic heatmap qualitative check",
]

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion this test checks")
    config.stash[_RESULTS] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if name not in CRITERIA:
        raise ValueError(f"unknown acceptance criterion {name!r}")
    if rep.when != "call" and not rep.failed:
        return
    entry = item.config.stash[_RESULTS].setdefault(name, {"ok": True, "details": []})
    entry["ok"] = entry["ok"] and rep.passed
    entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]
    if rep.failed and rep.when != "call":
        entry["details"].append(f"{item.name} failed during {rep.when}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name in CRITERIA:
        entry = results.get(name)
        if entry is None:
            terminalreporter.write_line(f"NOT RUN  {name}")
            continue
        status = "PASS" if entry["ok"] else "FAIL"
        detail = "; ".join(dict.fromkeys(entry["details"]))
        terminalreporter.write_line(f"{status:7s}  {name}" + (f": {detail}" if detail else ""))

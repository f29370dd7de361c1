from __future__ import annotations

import pytest

CRITERIA = {
    1: "latency ordering and reduction band on a 50-scenario synthetic batch",
    2: "waiting = perception + reaction on every trace",
    3: "commit point equals first-true scan on 10,000 sequences",
    4: "confidence and entropy closed forms",
    5: "perplexity closed form for constant token probability",
    6: "loss suite (coherence zero, KL sign, weighted total)",
    7: "curriculum plan shape, partition, steps and determinism",
    8: "extraction fixtures match hand walk-throughs",
    9: "length buckets and monotone per-bucket reduction",
    10: "simulate is byte-deterministic for a fixed seed",
    11: "normalized label entropy bounds and fixtures",
    12: "remote protocol and realtime session against the stub",
}

_outcomes: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): test belongs to acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    n = marker.args[0]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes.setdefault(n, []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, text in CRITERIA.items():
        results = _outcomes.get(n)
        if results is None:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status:7s} {text}")

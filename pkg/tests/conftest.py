import pytest

from pedsim import kernels

CRITERIA = {
    1: "conservation suite",
    2: "determinism",
    3: "capacity, 100k agents",
    4: "uniform spread anchor",
    5: "free-flow fidelity",
    6: "collision suite",
    7: "speed-density and LOS bounds",
    8: "analysis cross-checks",
    9: "evacuation",
    10: "checklist scoring",
    11: "round-trips",
    12: "rendering golden files",
}

_results: dict = {}
_notes: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config.addinivalue_line("markers", "slow: long-running test")


def pytest_runtest_logreport(report):
    n = _criterion_of.get(report.nodeid)
    if n is None:
        return
    _results.setdefault(n, True)
    if report.failed or report.skipped:
        _results[n] = False


_criterion_of: dict = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _criterion_of[item.nodeid] = int(m.args[0])


@pytest.fixture
def note():
    """Attach a measured value to the acceptance summary line."""
    def add(n, text):
        _notes.setdefault(n, []).append(text)
    return add


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(CRITERIA):
        if n not in _results:
            continue
        state = "PASS" if _results[n] else "FAIL"
        extra = "; ".join(_notes.get(n, []))
        tr.write_line(f"criterion {n:2d} {state}  {CRITERIA[n]}" + (f"  [{extra}]" if extra else ""))


@pytest.fixture(params=kernels.available())
def backend(request):
    with kernels.use_backend(request.param):
        yield request.param

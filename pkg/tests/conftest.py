import pytest

from forgeline import _pykernels, kernels

BACKENDS = ["python"]
try:
    from forgeline import _ckernels

    BACKENDS.insert(0, "cython")
except ImportError:  # extension not built
    _ckernels = None


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run a test once per available kernel backend."""
    impl = _ckernels if request.param == "cython" else _pykernels
    for name in ("accumulate", "f64_to_bf16", "bf16_to_f32", "transition_counts"):
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    monkeypatch.setattr(kernels, "BACKEND", impl.BACKEND)
    return request.param


# -- acceptance reporting ---------------------------------------------------

_ACCEPTANCE: dict[str, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    name = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict in _ACCEPTANCE.items():
        terminalreporter.write_line(f"{verdict}  {name}")

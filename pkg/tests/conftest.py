import numpy as np
import pytest

from fedifl.nn import _pykernels, kernels

try:
    from fedifl.nn import _ckernels
except ImportError:  # pragma: no cover - extension not built
    _ckernels = None

BACKENDS = ["python"] + (["cython"] if _ckernels is not None else [])


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run a test once per available kernel backend."""
    impl = _ckernels if request.param == "cython" else _pykernels
    for name in ("conv1d_forward", "conv1d_backward", "maxpool1d_forward", "maxpool1d_backward"):
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """``record(criterion, ok, detail)`` feeds the acceptance summary."""

    def _record(criterion: int, ok: bool, detail: str):
        ACCEPTANCE[criterion] = (bool(ok), detail)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[c]
        terminalreporter.write_line(f"criterion {c}: {'PASS' if ok else 'FAIL'}  {detail}")

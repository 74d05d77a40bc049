import numpy as np
import pytest

from m3ae import kernels


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    previous = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def shapes_dir(tmp_path_factory):
    from m3ae.synthetic import SyntheticShapesSpec, generate

    out = tmp_path_factory.mktemp("shapes")
    generate(SyntheticShapesSpec(n=48, seed=7), out)
    return out


@pytest.fixture(scope="session")
def shapes_ds(shapes_dir):
    from m3ae.data import Dataset

    return Dataset.load(shapes_dir / "data.jsonl")


# -- acceptance report ---------------------------------------------------------------------
_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance_report():
    """``record(number, passed, detail)`` collects one line per acceptance criterion."""
    def record(number, passed, detail):
        _ACCEPTANCE[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")

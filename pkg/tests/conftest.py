import numpy as np
import pytest

from cgmd.tabular import Schema


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_schema():
    return Schema(id="pid", label="y", numeric=("age", "sbp_proxy"), categorical=("sex",))


@pytest.fixture
def write_csv(tmp_path):
    def _write(text, name="cohort.csv"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return _write


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.VERDICTS):
            terminalreporter.write_line(line)

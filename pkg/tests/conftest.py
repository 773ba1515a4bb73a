import numpy as np
import pytest

from dendrorecon import simulate
from dendrorecon.ingest import ClimateSeries, RingWidthDataset


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number n")


@pytest.fixture
def small_dataset():
    """Three overlapping trees over 1990-1999."""
    return RingWidthDataset(
        tree_ids=("a", "b", "c"),
        first_year=np.array([1990, 1992, 1995]),
        last_year=np.array([1997, 1999, 1999]),
        widths=(
            np.array([2.0, 1.8, 1.7, 1.5, 1.4, 1.3, 1.3, 1.2]),
            np.array([1.5, 1.4, 1.2, 1.3, 1.1, 1.0, 1.0, 0.9]),
            np.array([1.1, 1.0, 0.9, 0.95, 0.85]),
        ),
    )


@pytest.fixture
def small_climate():
    vals = np.array([np.nan] * 5 + [9.5, 10.2, 10.8, 9.9, 10.4])
    return ClimateSeries(np.arange(1990, 2000), vals)


@pytest.fixture(scope="session")
def micro_sim():
    return simulate.simulate_dataset(simulate.scenario("micro"), 0)


@pytest.fixture(scope="session")
def flat_sim():
    return simulate.simulate_dataset(simulate.scenario("flat"), 1)


@pytest.fixture(scope="session")
def curse_sim():
    return simulate.simulate_dataset(simulate.scenario("curse"), 1)


@pytest.fixture
def report(capsys):
    """Print one PASS/FAIL line per acceptance criterion, past output capture."""

    def _report(tag: str, passed: bool, detail: str = "") -> bool:
        with capsys.disabled():
            print(f"\n[acceptance {tag}] {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return _report

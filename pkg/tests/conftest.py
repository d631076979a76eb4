import numpy as np
import pytest

from setkernel import SampleSet, sample_frequencies


@pytest.fixture(scope="session")
def small_map():
    return sample_frequencies(d=2, D=64, gamma=1.0, seed=1234)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def make_sample(cells, sample_id="s", markers=None):
    cells = np.atleast_2d(np.asarray(cells, dtype=float))
    if markers is None:
        markers = tuple(f"f{j}" for j in range(cells.shape[1]))
    return SampleSet(cells=cells, sample_id=sample_id, marker_names=markers)

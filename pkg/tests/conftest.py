import numpy as np
import pytest

from mitml.autodiff import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def rand_tensor(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape))


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Eight identities, two tracklets per identity and modality."""
    from mitml.synthdata import generate_corpus

    root = tmp_path_factory.mktemp("corpus")
    generate_corpus(root, num_ids=8, tracklets_per_id_per_modality=2, seed=3)
    return root


@pytest.fixture(scope="session")
def small_store(small_corpus):
    from mitml.synthdata import Manifest, TrackletStore

    return TrackletStore(Manifest.read(small_corpus))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import CRITERIA
    except ImportError:
        return
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)

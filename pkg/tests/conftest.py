import numpy as np
import pytest

from ggdiff import diffusion, dqr, latentcodec
from ggdiff.corpus import CorpusSpec, make_corpus


@pytest.fixture(scope="session")
def train_corpus():
    return make_corpus(CorpusSpec(60, 32, seed=0))


@pytest.fixture(scope="session")
def test_corpus():
    return make_corpus(CorpusSpec(10, 32, seed=1))


@pytest.fixture(scope="session")
def stats_corpus():
    return make_corpus(CorpusSpec(12, 64, seed=2))


@pytest.fixture(scope="session")
def sched():
    return diffusion.make_schedule()


@pytest.fixture(scope="session")
def prior(train_corpus):
    return diffusion.fit_gmm([latentcodec.encode(im) for im in train_corpus], K=5, seed=0)


@pytest.fixture(scope="session")
def quality_model(train_corpus):
    return dqr.fit_pristine_model(train_corpus)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])

import pytest

from ssltr.dataset import synth_corpus
from ssltr.types import Style


@pytest.fixture(scope="session")
def printed_corpus():
    return synth_corpus("printed", Style.PRINTED, 12, seed=0)


@pytest.fixture(scope="session")
def cursive_corpus():
    return synth_corpus("cursive", Style.CURSIVE, 8, seed=1)

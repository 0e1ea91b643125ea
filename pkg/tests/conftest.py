import pytest

from ctm.rng import Rng
from ctm.synth import GenSpec, generate_synthetic_corpus


@pytest.fixture(scope="session")
def corpus():
    """Default synthetic split (seed 0): (train, test, manifest)."""
    return generate_synthetic_corpus(GenSpec(), Rng(0))

import numpy as np
import pytest

from advreal import harness

FIXTURE_SEED = 606
FIXTURE_SCENES = 32


@pytest.fixture(scope="session")
def fixture_corpus(tmp_path_factory):
    """The 32-scene corpus used by the acceptance suite (deterministic)."""
    out = tmp_path_factory.mktemp("corpus32")
    spec = harness.SyntheticCorpusSpec(n_scenes=FIXTURE_SCENES, seed=FIXTURE_SEED)
    harness.generate_corpus(spec, out)
    return harness.ingest_corpus(out)


@pytest.fixture(scope="session")
def fixture_scenes(fixture_corpus):
    return harness.corpus_scenes(fixture_corpus)


@pytest.fixture(scope="session")
def detector():
    """The shipped detector weights."""
    cfg = harness.RunConfig()
    return harness.load_detector(cfg)


@pytest.fixture(scope="session")
def run_config():
    return harness.RunConfig()

import pytest

from csseg.config import PipelineConfig
from csseg.pipeline import generate_corpus


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """6 small phantoms shared by the CLI and determinism tests."""
    path = tmp_path_factory.mktemp("small_corpus")
    generate_corpus(6, path, seed=7, dims=(48, 48, 10))
    return path


def small_config() -> PipelineConfig:
    cfg = PipelineConfig()
    cfg.seed = 7
    cfg.cv.folds = 2
    cfg.forest.trees = 10
    cfg.cnn.epochs = 4
    return cfg


@pytest.fixture(scope="session")
def acceptance_corpus(tmp_path_factory):
    """The 12-phantom corpus the acceptance criteria run on."""
    path = tmp_path_factory.mktemp("acceptance_corpus")
    generate_corpus(12, path, seed=0)
    return path

import pytest

from modnet.dataset import FAST_OVERRIDES, GenConfig, generate_dataset


@pytest.fixture(scope="session")
def fast_dataset(tmp_path_factory):
    """61-question dataset shared by the slower functional tests."""
    out = tmp_path_factory.mktemp("fast_dataset")
    config = GenConfig(**FAST_OVERRIDES)
    manifest = generate_dataset(config, out)
    return out, config, manifest


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    """Full 244-question benchmark; used by the acceptance suite."""
    out = tmp_path_factory.mktemp("default_dataset")
    config = GenConfig()
    manifest = generate_dataset(config, out)
    return out, config, manifest

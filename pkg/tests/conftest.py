import pytest

from newentry.corpus import build_bundle
from newentry.synthetic import SyntheticConfig, generate_synthetic


@pytest.fixture(scope="session")
def default_synthetic():
    cfg = SyntheticConfig()
    conversations, annotations, ground = generate_synthetic(cfg)
    return cfg, conversations, annotations, ground


@pytest.fixture(scope="session")
def default_bundle(default_synthetic):
    cfg, conversations, _, _ = default_synthetic
    return build_bundle(conversations, seed=cfg.seed)

import os
import sys

import pytest

# Fix path to include core
sys.path.append(os.path.join(os.path.dirname(__file__), '.'))

from core.config import ModelConfig, load_config
from core.datamodel import SyntheticSpec, generate_synthetic

TINY_SIZE = 16


@pytest.fixture
def tiny_model():
    return ModelConfig(image_size=TINY_SIZE, channels=3, embedding_dim=8)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """6 identities x 2 views per domain, 16 px, 3 folds of 2 identities each"""
    spec = SyntheticSpec(num_identities=6, views_per_domain=2, image_size=(TINY_SIZE, TINY_SIZE),
                         num_folds=3, seed=3)
    return generate_synthetic(spec, tmp_path_factory.mktemp("tiny_data"))


def make_config(out_dir, manifest=None, **overrides):
    values = {
        "model.image_size": TINY_SIZE,
        "model.embedding_dim": 8,
        "train.batch_size": 4,
        "train.epochs": 1,
        "train.steps_per_epoch": 2,
        "train.progress": False,
        "train.test_folds": (0,),
        "paths.out": str(out_dir),
    }
    if manifest is not None:
        values["paths.manifest"] = str(manifest.root / "manifest.csv")
    values.update(overrides)
    return load_config(overrides=values, environ={})


@pytest.fixture
def tiny_config(tmp_path, tiny_manifest):
    return make_config(tmp_path / "run", tiny_manifest)


# ==========================================
#  SEEDED LEARNING RUNS (pytest -m slow)
# ==========================================

LEARNING_SIZE = 32
LEARNING_TEST_FOLDS = (0, 1)


@pytest.fixture(scope="session")
def learning_manifest(tmp_path_factory):
    """30 identities x 8 views per domain, 32 px, 5 folds; folds 0 and 1 are held out"""
    spec = SyntheticSpec(num_identities=30, views_per_domain=8, image_size=(LEARNING_SIZE, LEARNING_SIZE),
                         num_folds=5, seed=1)
    return generate_synthetic(spec, tmp_path_factory.mktemp("learning_data"))


def learning_config(out_dir, manifest, **overrides):
    values = {
        "model.image_size": LEARNING_SIZE,
        "model.embedding_dim": 64,
        "train.batch_size": 32,
        "train.steps_per_epoch": 0,
        "train.epochs": 30,
        "train.test_folds": LEARNING_TEST_FOLDS,
    }
    values.update(overrides)
    return make_config(out_dir, manifest, **values)


@pytest.fixture(scope="session")
def trained_cpgan(tmp_path_factory, learning_manifest):
    from core.trainer import train_cpgan

    out = tmp_path_factory.mktemp("trained_cpgan")
    return train_cpgan(learning_manifest, learning_config(out, learning_manifest))

import numpy as np
import pytest

from stmrgnn.data import SyntheticModeSpec, SyntheticSpec, generate_synthetic
from stmrgnn.graphs import GeoConfig, assemble_relations
from stmrgnn.model import ModelConfig, STMRGNN
from stmrgnn.training import Normalizer, SplitSpec, make_windows


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small coupled bimodal dataset shared by model/training/cli tests."""
    spec = SyntheticSpec(mode1=SyntheticModeSpec(8, 3000.0),
                         mode2=SyntheticModeSpec(5, 3000.0),
                         length=300, seed=11)
    nodes, panels, record = generate_synthetic(spec)
    return nodes, panels, record


@pytest.fixture(scope="session")
def tiny_relations(tiny_dataset):
    nodes, panels, _ = tiny_dataset
    return assemble_relations(nodes, panels, GeoConfig(kappa_m=1500.0),
                              train_steps=180)


@pytest.fixture(scope="session")
def tiny_windows(tiny_dataset):
    _, panels, _ = tiny_dataset
    split = SplitSpec()
    train_end, val_end = split.boundaries(300)
    norm = Normalizer.fit(panels, train_end)
    values = {m: norm.transform(m, panels[m].values) for m in panels}
    return {
        "train": make_windows(values, 6, 0, train_end),
        "val": make_windows(values, 6, train_end, val_end),
        "test": make_windows(values, 6, val_end, 300),
        "normalizer": norm,
        "bounds": (train_end, val_end, 300),
    }


def make_toy_model(relations, variant="full", seed=0, **dims):
    defaults = dict(window=6, blocks=2, kernel=2, tcn_in=3, tcn_out=4,
                    mrgnn_out=2, head_hidden=5, dropout=0.0)
    defaults.update(dims)
    cfg = ModelConfig.for_relations(relations, **defaults)
    return STMRGNN(cfg, relations, variant=variant, seed=seed)


@pytest.fixture
def toy_model(tiny_relations):
    return make_toy_model(tiny_relations)


@pytest.fixture
def rng():
    return np.random.default_rng(0)

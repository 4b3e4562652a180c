"""Shared fixtures: tiny streams and configs that train in well under a second."""

import json

import numpy as np
import pytest

from collapsecl.core.etf import ClassPrototypeMap, generate_etf
from collapsecl.core.losses import DistillationConfig
from collapsecl.core.stream import make_synthetic_stream
from collapsecl.core.trainer import ModelConfig, TrainConfig


def tiny_train(**overrides) -> TrainConfig:
    """Three-epoch config on an 8-dim embedding; keyword overrides replace fields."""
    epochs_later = overrides.pop("epochs_later", 3)
    values = dict(
        epochs_first_task=3,
        epochs_later=epochs_later,
        batch_size=32,
        probe_epochs=5,
        distill=DistillationConfig(e0=1, epochs=epochs_later),
        model=ModelConfig(hidden_sizes=(16,), embedding_dim=8),
    )
    values.update(overrides)
    return TrainConfig(**values)


def tiny_config_doc(**sections) -> dict:
    """A valid experiment config document; keyword arguments replace whole sections."""
    doc = {
        "seeds": [0],
        "stream": {"tasks": 2, "classes_per_task": 2, "samples_per_class": 20, "input_dim": 6,
                   "cluster_spread": 0.1},
        "model": {"hidden_sizes": [16], "embedding_dim": 8},
        "train": {"epochs_first_task": 2, "epochs_later": 2, "batch_size": 32, "probe_epochs": 3},
        "ablation": {"plasticity_loss": "fnc2", "stability": "hsd", "pseudo_replay": True},
    }
    doc.update(sections)
    return doc


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def stream():
    """Two tasks, two classes each, 20 samples per class in 6 dimensions."""
    return make_synthetic_stream(2, 2, 20, 6, 0.1, seed=0)


@pytest.fixture
def four_class_setup():
    """K=4 ETF in d=8 with classes {0,1} at task 1 and {2,3} at task 2."""
    protos = generate_etf(4, 8, seed=3)
    proto_map = ClassPrototypeMap.from_task_classes([[0, 1], [2, 3]])
    return protos, proto_map


@pytest.fixture
def write_config(tmp_path):
    """Write a config document to tmp_path and return its path."""
    def _write(doc: dict, name: str = "config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(doc, indent=2), encoding="utf-8")
        return path
    return _write

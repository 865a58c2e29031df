from pathlib import Path

import numpy as np
import pytest

from backend.models import (
    PERSON_RANGES,
    AppConfig,
    CloudConfig,
    ModelConfig,
    SynthConfig,
    TrainConfig,
)

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        d_model=16,
        n_heads=2,
        n_encoder_layers=1,
        n_decoder_layers=1,
        ffn_multiplier=2,
        dropout=0.0,
        l_out=4,
        rate_ratio=9,
        seed=0,
    )


@pytest.fixture
def tiny_synth_config() -> SynthConfig:
    return SynthConfig(
        persons={p: PERSON_RANGES[p] for p in (1, 2, 3)},
        duration_frames=120,
        seed=0,
    )


@pytest.fixture
def tiny_app_config(tiny_model_config, tiny_synth_config) -> AppConfig:
    return AppConfig(
        model=tiny_model_config,
        train=TrainConfig(epochs=2, batch_size=8, patience=None, seed=0),
        synth=tiny_synth_config,
        cloud=CloudConfig(n_vertices=30, seed=0),
    )

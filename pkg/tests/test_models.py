from pathlib import Path

import pytest
from pydantic import ValidationError

from backend import settings
from backend.models import (
    AppConfig,
    CloudConfig,
    ModelConfig,
    Settings,
    SmoothingParams,
    SynthConfig,
    TrainConfig,
)


class TestAppConfig:
    def test_defaults(self):
        cfg = AppConfig()
        assert cfg.model.l_in == 90
        assert cfg.train.learning_rate == 1e-3
        assert cfg.train.lam == 0.1
        assert cfg.smoothing == SmoothingParams(sigma=2.0, half_window=5)
        assert sorted(cfg.synth.persons) == list(range(1, 8))

    def test_fingerprint_is_stable_and_sensitive(self):
        assert AppConfig().fingerprint() == AppConfig().fingerprint()
        assert len(AppConfig().fingerprint()) == 12
        changed = AppConfig(train=TrainConfig(lam=0.2))
        assert changed.fingerprint() != AppConfig().fingerprint()

    def test_with_seed_reaches_every_section(self):
        cfg = AppConfig().with_seed(17)
        assert (cfg.model.seed, cfg.train.seed, cfg.synth.seed, cfg.cloud.seed) == (17, 17, 17, 17)

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValidationError):
            AppConfig.model_validate({"train": {"learning_rat": 0.1}})

    @pytest.mark.parametrize(
        "build",
        [
            lambda: TrainConfig(learning_rate=0.0),
            lambda: SmoothingParams(sigma=-1.0),
            lambda: ModelConfig(output_dim=6),
            lambda: SynthConfig(persons={1: ((0.0, 1.0),)}),
            lambda: SynthConfig(noise_magnitude=-0.1),
            lambda: CloudConfig(n_vertices=2),
        ],
    )
    def test_invalid_values(self, build):
        with pytest.raises(ValidationError):
            build()


class TestSettings:
    def test_singleton(self):
        assert Settings() is settings

    def test_load_yaml(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("train:\n  epochs: 3\nsmoothing:\n  sigma: 1.0\n  half_window: 2\n")
        cfg = settings.load_app_config(path)
        assert cfg.train.epochs == 3
        assert cfg.smoothing.half_window == 2
        assert cfg.model == ModelConfig()

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            settings.load_app_config(tmp_path / "absent.yaml")

    def test_non_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ValueError):
            settings.load_app_config(path)


def test_example_config_loads():
    path = Path(__file__).parent.parent / "config" / "example.yaml"
    cfg = settings.load_app_config(path)
    assert cfg.synth.duration_frames == 9000
    assert cfg.model == ModelConfig()
    assert cfg.limits == AppConfig().limits

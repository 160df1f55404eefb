from pathlib import Path

import pytest
from pydantic import ValidationError

from app.core.errors import ConfigurationError, CoverageError, DataError, NumericalError, ShapeError, UsageError
from app.core.schemas import ModelConfig
from app.core.settings import RunConfig, Settings, get_settings, model_config_from_text, model_config_to_text

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


# ============ Settings ============

def test_settings_read_the_prefixed_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("SHUFFLEUNET_DATA_DIR", str(tmp_path))
    monkeypatch.setenv("SHUFFLEUNET_DEVICE", "cpu")
    monkeypatch.setenv("SHUFFLEUNET_NUM_THREADS", "2")
    monkeypatch.setenv("DEVICE", "cuda")
    get_settings.cache_clear()
    try:
        settings = get_settings()
        assert settings.data_dir == tmp_path
        assert settings.device == "cpu"
        assert settings.num_threads == 2
        assert get_settings() is settings
    finally:
        get_settings.cache_clear()


def test_settings_defaults(monkeypatch):
    for name in ("DATA_DIR", "LOG_LEVEL", "LOG_DIR", "DEVICE", "NUM_THREADS"):
        monkeypatch.delenv(f"SHUFFLEUNET_{name}", raising=False)
    settings = Settings(_env_file=None)
    assert settings.device == "auto"
    assert settings.num_threads is None
    assert settings.log_level == "INFO"


def test_invalid_settings_are_rejected(monkeypatch):
    monkeypatch.setenv("SHUFFLEUNET_DEVICE", "tpu")
    with pytest.raises(ValidationError):
        Settings(_env_file=None)
    monkeypatch.setenv("SHUFFLEUNET_DEVICE", "cpu")
    monkeypatch.setenv("SHUFFLEUNET_NUM_THREADS", "0")
    with pytest.raises(ValidationError):
        Settings(_env_file=None)


# ============ Run configuration ============

def test_default_config_round_trips_through_text():
    config = RunConfig()
    assert RunConfig.from_text(config.to_text()) == config


def test_rendered_text_format():
    text = RunConfig().to_text()
    assert "train.patch_size = 96, 96, 48\n" in text
    assert "model.global_residual = false\n" in text
    assert text.splitlines()[0] == "model.architecture = shuffleunet"


def test_shipped_configs_load():
    tiny = RunConfig.load(CONFIG_DIR / "tiny.conf")
    assert (tiny.model.levels, tiny.model.base_filters) == (2, 8)
    assert tiny.train.patch_size == (16, 16, 16)
    assert tiny.train.learning_rate == 1e-3

    default = RunConfig.load(CONFIG_DIR / "default.conf")
    assert default.model == ModelConfig()
    assert default.train.patch_size == (96, 96, 48)


def test_comments_and_blank_lines_are_skipped():
    config = RunConfig.from_text("# header\n\nmodel.levels = 3  # three levels\ntrain.epochs=5\n")
    assert config.model.levels == 3
    assert config.train.epochs == 5
    assert config.train.batch_size == 4


@pytest.mark.parametrize(
    "text, match",
    [
        ("optim.lr = 1", "unknown key"),
        ("model.depth = 3", "unknown model field"),
        ("levels = 3", "unknown key"),
        ("model.levels 3", "line 1"),
        ("model.base_filters = 12", "divisible by 8"),
        ("model.conv_kernel = 4", "odd"),
        ("model.global_residual = true\nmodel.out_channels = 2", "global_residual"),
        ("train.patch_size = 16, 16", "invalid configuration"),
    ],
)
def test_invalid_config_text(text, match):
    with pytest.raises(ConfigurationError, match=match):
        RunConfig.from_text(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        RunConfig.load(tmp_path / "missing.conf")


def test_overrides_skip_none_values():
    config = RunConfig().with_overrides({"train.epochs": 3, "train.seed": None, "model.architecture": "unet"})
    assert config.train.epochs == 3
    assert config.train.seed == 0
    assert config.model.architecture == "unet"


def test_overrides_are_validated():
    with pytest.raises(ConfigurationError):
        RunConfig().with_overrides({"train.momentum": 0.9})
    with pytest.raises(ConfigurationError):
        RunConfig().with_overrides({"train.epochs": 0})


def test_model_config_text_round_trip():
    config = ModelConfig(levels=3, base_filters=16, global_residual=True, activation="relu", init_seed=9)
    text = model_config_to_text(config)
    assert all(line.startswith("model.") for line in text.splitlines())
    assert model_config_from_text(text) == config
    # train lines in the same text are ignored
    assert model_config_from_text(RunConfig(model=config).to_text()) == config


# ============ Errors ============

def test_exit_codes_follow_the_error_kind():
    assert UsageError("x").exit_code == 1
    assert ConfigurationError("x").exit_code == 1
    assert DataError("x").exit_code == 2
    assert ShapeError("x").exit_code == 2
    assert CoverageError("x").exit_code == 2
    assert NumericalError("x").exit_code == 3
    assert isinstance(ShapeError("x"), ValueError)
    assert ConfigurationError("bad value").detail == "bad value"

import json
import pytest
from src.config import Settings, apply_seed, deep_merge, load_experiment_config, preset_defaults
from src.models.enums import Preset
from src.utils.errors import ConfigurationError


def _write(tmp_path, payload, name="exp.json"):
    path = tmp_path / name
    path.write_text(payload if isinstance(payload, str) else json.dumps(payload))
    return path


def test_empty_file_resolves_to_preset(tmp_path):
    config = load_experiment_config(_write(tmp_path, {}))
    assert config.name == "ddnet-desk"
    assert config.cycle_start == config.time_grid.t2
    assert config.cycle_horizon == config.time_grid.t_end - 1 - config.time_grid.t2


def test_paper_shape_preset_uses_reference_networks(tmp_path):
    config = load_experiment_config(_write(tmp_path, {}), preset=Preset.PAPER_SHAPE)
    assert config.prednet.hidden_channels == 64
    assert config.prednet.kernel_sizes == [7, 5, 3, 1]
    assert config.danet.kernel_sizes == [5, 3, 1]
    assert config.name == "ddnet-paper-shape"


def test_file_overrides_merge_into_nested_sections(tmp_path):
    config = load_experiment_config(_write(tmp_path, {"world": {"height": 8}, "danet_training": {"epochs": 3}}))
    assert config.world.height == 8
    assert config.world.width == 64
    assert config.danet_training.epochs == 3
    assert config.danet_training.seed == 13


def test_deep_merge_leaves_inputs_untouched():
    base = {"a": {"x": 1, "y": 2}, "b": [1]}
    merged = deep_merge(base, {"a": {"y": 3}, "b": [2, 3]})
    assert merged == {"a": {"x": 1, "y": 3}, "b": [2, 3]}
    assert base == {"a": {"x": 1, "y": 2}, "b": [1]}


def test_seed_override_reseeds_every_stage(tmp_path):
    config = load_experiment_config(_write(tmp_path, {}), seed=100)
    assert config.world.seed == 100
    assert config.prednet_training.seed == 101
    assert config.danet_training.seed == 102
    assert config.evaluation.seed == 103
    assert apply_seed({}, 7)["world"] == {"seed": 7}


def test_unknown_key_names_its_path(tmp_path):
    with pytest.raises(ConfigurationError) as excinfo:
        load_experiment_config(_write(tmp_path, {"world": {"heigth": 8}}))
    assert excinfo.value.key_path == "world.heigth"


def test_invalid_value_names_its_path(tmp_path):
    with pytest.raises(ConfigurationError) as excinfo:
        load_experiment_config(_write(tmp_path, {"prednet_training": {"epochs": 0}}))
    assert excinfo.value.key_path == "prednet_training.epochs"


def test_cycle_past_dataset_end_is_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        load_experiment_config(_write(tmp_path, {"cycle": {"horizon": 10_000}}))


def test_cycle_start_off_observation_cadence_names_its_path(tmp_path):
    with pytest.raises(ConfigurationError) as excinfo:
        load_experiment_config(_write(tmp_path, {"cycle": {"start_index": 6721}}))
    assert excinfo.value.key_path == "cycle.start_index"
    assert "observation cadence" in str(excinfo.value)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError) as excinfo:
        load_experiment_config(tmp_path / "nope.json")
    assert excinfo.value.key_path == "--config"


def test_malformed_json(tmp_path):
    with pytest.raises(ConfigurationError, match="invalid JSON"):
        load_experiment_config(_write(tmp_path, "{not json"))


def test_top_level_must_be_object(tmp_path):
    with pytest.raises(ConfigurationError):
        load_experiment_config(_write(tmp_path, [1, 2]))


def test_unknown_preset():
    with pytest.raises(ValueError):
        preset_defaults("laptop")


def test_shipped_configs_validate():
    smoke = load_experiment_config("configs/smoke.json")
    assert smoke.world.height == 8
    assert smoke.cycle_start == 224
    load_experiment_config("configs/desk.json")


def test_settings_read_environment(monkeypatch):
    monkeypatch.setenv("DDNET_LEDGER_URL", "sqlite:///:memory:")
    monkeypatch.setenv("DDNET_THREADS", "2")
    settings = Settings()
    assert settings.ledger_url == "sqlite:///:memory:"
    assert settings.threads == 2

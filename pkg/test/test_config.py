import os
from pathlib import Path

import pytest

import caila
from caila import config
from caila.config import Configuration, ConfigVariable, CURRENT_CONFIG
from caila.data import World
from caila.exceptions import ConfigError, ConfigWarning
from caila.layers import MixtureMode

from conftest import CFG_DIR


def test_load_custom_cfg():
    test_config_path = os.path.join(CFG_DIR, "test_defaults.cfg")
    new_config = Configuration.load_from_file(test_config_path)
    assert new_config.get("d") == 16
    assert new_config.get("text_moa") is False
    assert new_config.get("lr") == 0.01
    assert new_config.get("batch") == 32
    assert new_config.path == test_config_path


@pytest.mark.parametrize(
    "file_name, line",
    [("bad_value.cfg", 2), ("unknown_key.cfg", 4), ("malformed.cfg", 1)],
)
def test_bad_custom_cfg(file_name, line):
    path = os.path.join(CFG_DIR, file_name)
    with pytest.raises(ConfigError) as err:
        Configuration.load_from_file(path)
    assert f"{path}:{line}:" in str(err.value)


def test_missing_config():
    with pytest.raises(ConfigError):
        Configuration.load_from_file("dne.cfg")


def test_user_config_missing_is_silent(tmp_path):
    new_config = Configuration.load_user_config(str(tmp_path / "caila.cfg"))
    assert new_config.text == new_config.default_text


def test_user_config_broken_warns():
    with pytest.warns(ConfigWarning):
        new_config = Configuration.load_user_config(os.path.join(CFG_DIR, "bad_value.cfg"))
    assert new_config.text == new_config.default_text


def test_user_config_from_environment(monkeypatch):
    monkeypatch.setenv(config.CFG_ENV_VAR, os.path.join(CFG_DIR, "test_defaults.cfg"))
    assert Configuration.load_user_config().get("world") == "open"


def test_typed_configs():
    run = Configuration.load_from_file(os.path.join(CFG_DIR, "test_defaults.cfg")).run_config()
    assert run.encoder.d == 16
    assert run.encoder.vision_mixture is MixtureMode.LATENT
    assert run.training.shift_ratio == 0.25
    assert run.world is World.OPEN
    assert run.data == Path("/tmp/shapes")


def test_run_config_requires_data():
    with pytest.raises(ConfigError):
        Configuration().run_config(require_data=True)


@pytest.mark.parametrize(
    "name, value",
    [("d", "0"), ("shift_ratio", "1.0"), ("tau_c", "-1"), ("vision_mixture", "blend"), ("text_moa", "maybe")],
)
def test_invalid_values(name, value):
    with pytest.raises(ConfigError):
        Configuration().set(name, value)


def test_iterable():
    names = list(CURRENT_CONFIG)
    assert "d" in names and "shift_ratio" in names


def test_variable():
    def verify():
        pass

    new_var = ConfigVariable("test_var", "123", verify)
    assert new_var == "test_var"
    assert new_var == new_var
    assert str(new_var) == "Config variable: test_var"


def test_copy_is_independent():
    before = CURRENT_CONFIG.get("epochs")
    duplicate = CURRENT_CONFIG.copy()
    duplicate.set("epochs", before + 1)
    assert CURRENT_CONFIG.get("epochs") == before


def test_set_get_value():
    caila.configure("vision_mixture", "output")
    assert caila.configure("vision_mixture") == "output"
    caila.configure("vision_mixture", None)
    assert caila.configure("vision_mixture") == "full"


def test_write_value(tmp_path, monkeypatch):
    monkeypatch.setattr(CURRENT_CONFIG, "_config_file_path", str(tmp_path / "caila.cfg"))
    caila.configure("epochs", 7, durable=True)
    try:
        reloaded = Configuration.load_from_file(tmp_path / "caila.cfg")
        assert reloaded.get("epochs") == 7
    finally:
        caila.configure("epochs", None)


def test_get_invalid_variable():
    with pytest.raises(ConfigError):
        caila.configure("fake_variable")

"""
caila.config
~~~~~~~~~~~~

Run configuration: flat ``key = value`` files, per-user defaults and the
typed encoder/training configurations built from them.
"""

from dataclasses import dataclass, field
import logging
import os
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union
import warnings

from platformdirs import PlatformDirs

from .data import World
from .exceptions import ConfigError, ConfigWarning
from .layers import MixtureMode
from .model import EncoderConfig
from .train import TrainConfig

LOGGER = logging.getLogger("caila")

CFG_VALS = Union[str, int, float, bool]
CFG_FILE_NAME = "caila.cfg"
CFG_FILE_PATH = os.path.join(PlatformDirs("caila").user_config_dir, CFG_FILE_NAME)
CFG_ENV_VAR = "CAILA_CONFIG"

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def verify_pos_int(_obj: Any) -> int:
    new_int = int(_obj)
    if new_int < 1:
        raise ValueError(f"expected a positive integer, got {_obj}")
    return new_int


def verify_nonneg_int(_obj: Any) -> int:
    new_int = int(_obj)
    if new_int < 0:
        raise ValueError(f"expected a non-negative integer, got {_obj}")
    return new_int


def verify_pos_float(_obj: Any) -> float:
    new_float = float(_obj)
    if new_float <= 0:
        raise ValueError(f"expected a positive number, got {_obj}")
    return new_float


def verify_nonneg_float(_obj: Any) -> float:
    new_float = float(_obj)
    if new_float < 0:
        raise ValueError(f"expected a non-negative number, got {_obj}")
    return new_float


def verify_ratio(_obj: Any) -> float:
    new_float = float(_obj)
    if not 0 <= new_float < 1:
        raise ValueError(f"expected a value in [0, 1), got {_obj}")
    return new_float


def verify_bool(_obj: Any) -> bool:
    if isinstance(_obj, bool):
        return _obj
    text = str(_obj).strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise ValueError(f"expected true or false, got {_obj}")


def verify_choice(*choices: str) -> Callable[[Any], str]:
    def verify(_obj: Any) -> str:
        text = str(_obj).strip()
        if text not in choices:
            raise ValueError(f"expected one of {', '.join(choices)}, got {_obj}")
        return text

    return verify


@dataclass
class ConfigVariable:
    name: str
    default_value: CFG_VALS
    verify_func: Callable
    doc: str = ""
    current_value: CFG_VALS = field(init=False)

    def __post_init__(self):
        self.current_value = self.default_value

    def __eq__(self, __obj: Any) -> bool:
        if isinstance(__obj, str):
            return self.name == __obj
        rep = (self.name, self.current_value)
        return rep.__eq__(__obj)

    def __str__(self) -> str:
        return f"Config variable: {self.name}"


@dataclass(frozen=True)
class RunConfig:
    """Everything one training or evaluation run needs."""

    encoder: EncoderConfig
    training: TrainConfig
    world: World
    data: Optional[Path]


ENCODER_KEYS = (
    "d", "heads", "n_vision", "n_text", "moa_layers", "reduction", "patch", "image_hw", "max_text_len",
    "activation", "vision_adapters", "text_adapters", "vision_moa", "text_moa", "vision_mixture",
)
TRAIN_KEYS = (
    "lr", "stage0_lr", "weight_decay", "decoupled_weight_decay", "tau_c", "tau_a", "tau_o",
    "attribute_weight", "object_weight", "batch", "epochs", "stage0_epochs", "shift_ratio",
    "shift_retries", "learnable_prompts", "seed",
)


class Configuration:
    DEFAULT_VARIABLES: List[Tuple[str, CFG_VALS, Callable, str]] = [
        ("d", 64, verify_pos_int, "hidden width"),
        ("heads", 4, verify_pos_int, "attention heads, must divide d"),
        ("n_vision", 6, verify_pos_int, "vision depth"),
        ("n_text", 4, verify_pos_int, "language depth"),
        ("moa_layers", 2, verify_pos_int, "trailing vision mixture-of-adapters layers (full-scale setting 6)"),
        ("reduction", 4, verify_pos_int, "adapter reduction factor"),
        ("patch", 8, verify_pos_int, "vision patch size"),
        ("image_hw", 64, verify_pos_int, "input resolution"),
        ("max_text_len", 12, verify_pos_int, "token capacity"),
        ("activation", "gelu", verify_choice("gelu", "relu"), "adapter nonlinearity"),
        ("vision_adapters", True, verify_bool, "train adapters in the vision tower"),
        ("text_adapters", True, verify_bool, "train adapters in the text tower"),
        ("vision_moa", True, verify_bool, "two-stage vision pipeline with mixture-of-adapters layers"),
        ("text_moa", True, verify_bool, "average attribute, object and composition text embeddings"),
        ("vision_mixture", "full", verify_choice(*(mode.value for mode in MixtureMode)), "vision mixture strategy"),
        ("lr", 2e-4, verify_nonneg_float, "adapter learning rate (full-scale setting 2e-5)"),
        ("stage0_lr", 1e-3, verify_nonneg_float, "backbone pretraining learning rate"),
        ("weight_decay", 5e-5, verify_nonneg_float, "weight decay"),
        ("decoupled_weight_decay", True, verify_bool, "apply weight decay to the weights, not the gradient"),
        ("tau_c", 0.01, verify_pos_float, "composition temperature"),
        ("tau_a", 5e-4, verify_pos_float, "attribute temperature"),
        ("tau_o", 5e-4, verify_pos_float, "object temperature"),
        ("attribute_weight", 1.0, verify_nonneg_float, "weight of the attribute loss term"),
        ("object_weight", 1.0, verify_nonneg_float, "weight of the object loss term"),
        ("batch", 32, verify_pos_int, "batch size"),
        ("epochs", 30, verify_nonneg_int, "adapter training epochs"),
        ("stage0_epochs", 10, verify_nonneg_int, "backbone pretraining epochs"),
        ("shift_ratio", 0.1, verify_ratio, "fraction of each batch replaced by concept-shifted features"),
        ("shift_retries", 20, verify_nonneg_int, "donor draws per concept-shift slot"),
        ("learnable_prompts", True, verify_bool, "train class-prompt embeddings with the adapters"),
        ("seed", 0, verify_nonneg_int, "random seed"),
        ("world", "closed", verify_choice("closed", "open"), "evaluation world"),
        ("data", "", str, "dataset directory"),
    ]

    def __init__(self, _config_file_path: Optional[str] = None) -> None:
        self._variables = {
            v.name: v
            for v in [ConfigVariable(*args) for args in Configuration.DEFAULT_VARIABLES]
        }
        self._config_file_path = _config_file_path or CFG_FILE_PATH

    @property
    def path(self) -> str:
        return self._config_file_path

    @property
    def text(self) -> str:
        return "".join(f"{v.name} = {format_value(v.current_value)}\n" for v in self._variables.values())

    @property
    def default_text(self) -> str:
        return "".join(f"{v.name} = {format_value(v.default_value)}\n" for v in self._variables.values())

    @classmethod
    def load_from_file(cls, file_path: Union[str, Path]) -> "Configuration":
        """Read a ``key = value`` file on top of the defaults.

        Raises:
            ConfigError: unreadable file, malformed line, unknown key or invalid value, with ``path:line``
        """
        new_configuration = Configuration(str(file_path))
        try:
            with open(file_path, "r", encoding="utf-8") as cfg_file:
                lines = cfg_file.read().splitlines()
        except UnicodeDecodeError:
            raise ConfigError(f"{file_path}: not a UTF-8 text file")
        except OSError as e:
            raise ConfigError(f"{file_path}: cannot read config file ({e.strerror})")

        for number, line in enumerate(lines, start=1):
            content = line.split("#", 1)[0].strip()
            if not content:
                continue
            key, sep, value = content.partition("=")
            if not sep:
                raise ConfigError(f"{file_path}:{number}: expected 'key = value', got '{line.strip()}'")
            try:
                new_configuration.set(key.strip(), value.strip())
            except ConfigError as e:
                raise ConfigError(f"{file_path}:{number}: {e}")
        LOGGER.debug(f"Loaded configuration from {file_path}")
        return new_configuration

    @classmethod
    def load_user_config(cls, file_path: Optional[str] = None) -> "Configuration":
        """Per-user defaults; a missing file is silent, a broken one is reported and ignored."""
        file_path = file_path or os.getenv(CFG_ENV_VAR, CFG_FILE_PATH)
        if not os.path.exists(file_path):
            return Configuration(file_path)
        try:
            return cls.load_from_file(file_path)
        except ConfigError as e:
            LOGGER.warning(f"Ignoring user config: {e}")
            warnings.warn(f"Couldn't load config from '{file_path}': {e}", ConfigWarning)
            return Configuration(file_path)

    def set(self, variable_name: str, value: Any, durable: bool = False) -> None:
        variable = self._variables.get(variable_name)
        if variable is None:
            raise ConfigError(f"unknown config key '{variable_name}'")
        try:
            new_value = variable.default_value if value is None else variable.verify_func(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid value for '{variable_name}': {e}")
        variable.current_value = new_value
        if durable:
            self._write()

    def get(self, variable_name: str) -> CFG_VALS:
        variable = self._variables.get(variable_name)
        if variable is None:
            raise ConfigError(f"unknown config key '{variable_name}'")
        return variable.current_value

    def update(self, values: Dict[str, Any]) -> None:
        for name, value in values.items():
            self.set(name, value)

    def copy(self) -> "Configuration":
        duplicate = Configuration(self._config_file_path)
        for name, variable in self._variables.items():
            duplicate._variables[name].current_value = variable.current_value
        return duplicate

    def write(self, file_path: Union[str, Path]) -> None:
        Path(file_path).parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, "w", encoding="utf-8") as cfg:
            cfg.write(self.text)

    def _write(self) -> None:
        self.write(self._config_file_path)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**{key: self.get(key) for key in ENCODER_KEYS})  # type: ignore[arg-type]

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{key: self.get(key) for key in TRAIN_KEYS})  # type: ignore[arg-type]

    def run_config(self, require_data: bool = False) -> RunConfig:
        data = str(self.get("data"))
        if require_data and not data:
            raise ConfigError("no dataset directory configured, set 'data' or pass --data")
        return RunConfig(
            encoder=self.encoder_config(),
            training=self.train_config(),
            world=World(self.get("world")),
            data=Path(data) if data else None,
        )

    def __iter__(self):
        return iter(self._variables)


def format_value(value: CFG_VALS) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


CURRENT_CONFIG = Configuration.load_user_config()


def configure(variable_name: str, *args, durable: bool = False) -> Union[None, CFG_VALS]:
    """Read (one argument) or set (two arguments) a key of the process-wide configuration."""
    if not args:
        return CURRENT_CONFIG.get(variable_name)
    else:
        return CURRENT_CONFIG.set(variable_name, args[0], durable=durable)

"""
Run configuration: a flat `key = value` text file plus command line
overrides, layered over built-in defaults.

    # comments and blank lines are ignored
    model.levels = 4
    model.resampler_kind = decimate_linear
    train.gain_range = 0.7, 1.0
    data.manifest =
    output_dir = runs/desk

Lookup order is override, then file, then default. `data.manifest` selects
a manifest dataset when non-empty; otherwise the `synth.*` keys describe
the synthetic dataset.
"""

### stdlib imports
import dataclasses
import logging
import pathlib
import typing

### local imports
from .data import SynthSpec
from .errors import ConfigurationError
from .model import ModelConfig
from .resampling import ResamplerKind
from .training import TrainConfig


log = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "resolved_config.txt"

DEFAULT_OUTPUT_DIR = "runs/wavesep"


def _cast_bool(value: str) -> bool:
    normal = value.strip().lower()
    if normal in ("1", "true", "yes", "on"):
        return True
    if normal in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _cast_pair(value: str) -> tuple[float, float]:
    parts = [part.strip() for part in value.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected two comma separated numbers: {value!r}")
    return float(parts[0]), float(parts[1])


def _format_value(value: typing.Any) -> str:
    if isinstance(value, ResamplerKind):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(item) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_cast_methods: dict[type, typing.Callable[[str], typing.Any]] = {
    int: int,
    float: float,
    bool: _cast_bool,
    ResamplerKind: ResamplerKind,
    tuple[float, float]: _cast_pair,
}


def _section(
    prefix: str, cls: type
) -> dict[str, tuple[typing.Any, typing.Callable[[str], typing.Any]]]:
    """Default value and cast method of every field of a config class."""
    hints = typing.get_type_hints(cls)
    return {
        f"{prefix}.{field.name}": (
            field.default,
            _cast_methods[hints[field.name]],
        )
        for field in dataclasses.fields(cls)
    }


# Key -> (default, cast method)
_KEYS: dict[str, tuple[typing.Any, typing.Callable[[str], typing.Any]]] = {
    **_section("model", ModelConfig),
    **_section("train", TrainConfig),
    **_section("synth", SynthSpec),
    "data.manifest": ("", str.strip),
    "output_dir": (DEFAULT_OUTPUT_DIR, str.strip),
}


def parse_assignment(line: str, origin: str) -> tuple[str, str]:
    """Split a `key = value` line; `origin` names it in error messages."""
    key, separator, value = line.partition("=")
    key = key.strip()
    if not separator or not key:
        raise ConfigurationError(
            f"{origin}: expected 'key = value', got {line.strip()!r}"
        )
    return key, value.strip()


def read_config_file(path: pathlib.Path) -> dict[str, str]:
    path = pathlib.Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(
            f"Cannot read config file '{path}': {exc}"
        ) from exc

    values: dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, value = parse_assignment(line, f"{path}:{number}")
        if key in values:
            raise ConfigurationError(
                f"{path}:{number}: key '{key}' is set twice"
            )
        values[key] = value
    return values


class RunConfig:
    """
    Layered configuration store.

    `values` hold the strings read from a config file, `overrides` the ones
    given on the command line. Every key must be known; values are cast
    once, on construction.
    """

    def __init__(
        self,
        values: typing.Optional[dict[str, str]] = None,
        overrides: typing.Optional[dict[str, str]] = None,
    ) -> None:
        self._values = dict(values or {})
        self._overrides = dict(overrides or {})

        for key in [*self._values, *self._overrides]:
            if key not in _KEYS:
                raise ConfigurationError(f"Unknown config key '{key}'")

        self._resolved: dict[str, typing.Any] = {}
        for key, (default, cast_method) in _KEYS.items():
            if key in self._overrides:
                raw = self._overrides[key]
            elif key in self._values:
                raw = self._values[key]
            else:
                self._resolved[key] = default
                continue
            try:
                self._resolved[key] = cast_method(raw)
            except ValueError as exc:
                raise ConfigurationError(
                    f"Invalid value {raw!r} for config key '{key}': {exc}"
                ) from exc

    @classmethod
    def load(
        cls,
        path: typing.Optional[pathlib.Path] = None,
        overrides: typing.Iterable[str] = (),
    ) -> "RunConfig":
        """Read `path` (if any) and apply `key=value` override strings."""
        values = read_config_file(path) if path else {}
        parsed = dict(
            parse_assignment(item, "override") for item in overrides
        )
        return cls(values, parsed)

    def __getitem__(self, key: str) -> typing.Any:
        try:
            return self._resolved[key]
        except KeyError:
            raise KeyError(f"Key '{key}' does not exist in the config")

    def __iter__(self) -> typing.Iterator[str]:
        return iter(_KEYS)

    def is_default(self, key: str) -> bool:
        return key not in self._values and key not in self._overrides

    def is_overridden(self, key: str) -> bool:
        return key in self._overrides

    def _fields(self, prefix: str) -> dict[str, typing.Any]:
        return {
            key[len(prefix) + 1 :]: value
            for key, value in self._resolved.items()
            if key.startswith(prefix + ".")
        }

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self._fields("model"))

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self._fields("train"))

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(**self._fields("synth"))

    @property
    def manifest(self) -> typing.Optional[pathlib.Path]:
        value = self._resolved["data.manifest"]
        return pathlib.Path(value).expanduser() if value else None

    @property
    def output_dir(self) -> pathlib.Path:
        return pathlib.Path(self._resolved["output_dir"]).expanduser()

    def validate(self) -> None:
        """Build every section once so invalid values fail early."""
        self.model_config()
        self.train_config()
        if self.manifest is None:
            self.synth_spec()

    def resolved_text(self) -> str:
        """All keys, sorted, in config file syntax."""
        return "".join(
            f"{key} = {_format_value(self._resolved[key])}\n"
            for key in sorted(self._resolved)
        )

    def write_resolved(
        self, directory: typing.Optional[pathlib.Path] = None
    ) -> pathlib.Path:
        directory = pathlib.Path(directory or self.output_dir)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / RESOLVED_CONFIG_NAME
        path.write_text(self.resolved_text(), encoding="utf-8")
        log.debug("Wrote resolved config to %s", path)
        return path

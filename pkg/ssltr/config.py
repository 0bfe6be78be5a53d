"""
Experiment configuration: a YAML file mapped onto nested dataclasses.

>>> config = from_dict({"method": "fq", "pretrain": {"k": 32}})
>>> config.method, config.pretrain.k, config.training.scale
(<Method.FQ: 'fq'>, 32, 0.01)
>>> from_dict({"pretrain": {"kk": 32}})
Traceback (most recent call last):
...
ssltr.config.ConfigError: pretrain: unknown key 'kk'
"""

import dataclasses
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union, get_args, get_origin, get_type_hints

import yaml

from ssltr.augment import AugmentationSet
from ssltr.backbone import HeadSpec, ModelConfig
from ssltr.errors import SsltrError
from ssltr.types import AugKind, BackboneKind, Method, Style

log = logging.getLogger(__name__)

PathLike = Union[str, Path]

CONFIG_ECHO = "config.yaml"


class ConfigError(SsltrError, ValueError):
    """A configuration file or override is invalid."""


@dataclass
class DataConfig:
    """Corpus manifests; a missing manifest is replaced by a synthetic corpus."""

    train: Optional[str] = None
    test: Optional[str] = None
    unlabeled: Optional[str] = None
    source: Optional[str] = None
    workers: int = 1
    validation: int = 64
    budgets: Tuple[int, ...] = (100, 1000)
    charset_capacity: Optional[int] = None


@dataclass
class SynthConfig:
    style: Style = Style.PRINTED
    unlabeled: int = 512
    annotated: int = 1100
    test: int = 128
    source: int = 512


@dataclass
class ModelSection:
    backbone: BackboneKind = BackboneKind.VGGT
    dim: int = 256
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    dropout: float = 0.1
    conv_width: float = 0.5
    positional_encoding: bool = True

    def model_config(self, head: HeadSpec) -> ModelConfig:
        return ModelConfig(
            backbone=self.backbone,
            dim=self.dim,
            layers=self.layers,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            dropout=self.dropout,
            head=head,
            positional_encoding=self.positional_encoding,
            conv_width=self.conv_width,
        )


@dataclass
class PretrainConfig:
    # codebook size and crop width default to the corpus style
    k: Optional[int] = None
    mask_probability: float = 0.2
    kmeans_epochs: int = 100
    kmeans_normalize: bool = False
    ae_latent_dim: int = 64
    ae_width: float = 1.0
    ae_max_width: Optional[int] = 512
    commitment: float = 0.25
    crop_width: Optional[int] = None
    temperature: float = 0.1
    shift: bool = True
    augmentation: Optional[AugKind] = None
    probe_lines: int = 16
    proxy_style: Optional[Style] = None


@dataclass
class TrainingConfig:
    scale: float = 0.01
    batch_scale: float = 1.0
    max_batch: Optional[int] = 16
    device: str = "cpu"
    prefetch: bool = False
    log_every: int = 50
    eval_batch_size: int = 16
    progress: bool = True


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    method: Method = Method.SCRATCH
    seed: int = 0
    output: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelSection = field(default_factory=ModelSection)
    augmentation: AugmentationSet = field(default_factory=AugmentationSet)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    @property
    def run_dir(self) -> Path:
        return Path(self.output) / self.name

    def augmentation_for(self, kind) -> AugmentationSet:
        """The configured parameter ranges under the augmentation kind of a phase."""
        return dataclasses.replace(self.augmentation, kind=AugKind(kind))

    def validate(self, check_paths: bool = True) -> "ExperimentConfig":
        if not self.name or "/" in self.name:
            raise ConfigError(f"name: {self.name!r} is not a valid run name")
        if not self.data.budgets or any(b < 1 for b in self.data.budgets):
            raise ConfigError("data.budgets: every budget must be a positive line count")
        if self.data.validation < 0:
            raise ConfigError("data.validation: must be non-negative")
        if self.training.scale <= 0:
            raise ConfigError("training.scale: must be positive")
        if not 0.0 <= self.pretrain.mask_probability <= 1.0:
            raise ConfigError("pretrain.mask_probability: must be in [0, 1]")
        if self.pretrain.k is not None and self.pretrain.k < 2:
            raise ConfigError("pretrain.k: label generation needs at least 2 classes")
        if self.model.dim % self.model.heads:
            raise ConfigError(
                f"model.dim: {self.model.dim} is not divisible by {self.model.heads} heads"
            )
        if check_paths:
            for key in ("train", "test", "unlabeled", "source"):
                value = getattr(self.data, key)
                if value is not None and not Path(value).is_file():
                    raise ConfigError(f"data.{key}: manifest {value} does not exist")
        return self


# -- conversion -------------------------------------------------------------------


def _convert(tp, value, where: str):
    if get_origin(tp) is Union:
        args = [a for a in get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _convert(args[0], value, where)
    if get_origin(tp) is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        args = get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} values, got {len(value)}")
        return tuple(_convert(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if dataclasses.is_dataclass(tp):
        if isinstance(value, tp):
            return value
        return _build(tp, value, where)
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(value)
        except ValueError:
            choices = ", ".join(m.value for m in tp)
            raise ConfigError(f"{where}: {value!r} is not one of {choices}") from None
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true or false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data, where: str = ""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {data!r}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    for key in data:
        if key not in names:
            raise ConfigError(f"{where or 'config'}: unknown key {key!r}")
    kwargs = {
        key: _convert(hints[key], value, f"{where}.{key}" if where else key)
        for key, value in data.items()
    }
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


def from_dict(data: Optional[Dict[str, Any]]) -> ExperimentConfig:
    return _build(ExperimentConfig, data)


def _plain(value):
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def to_dict(config: ExperimentConfig) -> Dict[str, Any]:
    return _plain(dataclasses.asdict(config))


# -- overrides --------------------------------------------------------------------


def apply_override(data: Dict[str, Any], assignment: str) -> Dict[str, Any]:
    """
    Set a dotted key from ``key=value``; the value is parsed as a YAML scalar.

    >>> apply_override({}, "pretrain.k=32")
    {'pretrain': {'k': 32}}
    """
    key, sep, text = assignment.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"override {assignment!r}: {e}") from e
    node = data
    parts = key.strip().split(".")
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {assignment!r}: {part!r} is not a section")
        node = child
    node[parts[-1]] = value
    return data


def read_yaml(path: PathLike) -> Dict[str, Any]:
    try:
        with open(path, encoding="utf8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: the top level must be a mapping")
    return data


def load_config(
    path: Optional[PathLike] = None,
    overrides: Iterable[str] = (),
    aug: Optional[str] = None,
    check_paths: bool = True,
) -> ExperimentConfig:
    """
    Read ``path`` (defaults only when omitted), apply ``key=value`` overrides and the
    pre-training augmentation kind, then validate.
    """
    data = read_yaml(path) if path is not None else {}
    for assignment in overrides:
        apply_override(data, assignment)
    if aug is not None:
        apply_override(data, f"pretrain.augmentation={aug}")
    config = from_dict(data).validate(check_paths)
    log.debug("Loaded config %s", to_dict(config))
    return config


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(config), sort_keys=False)


def write_config(config: ExperimentConfig, directory: PathLike) -> Path:
    path = Path(directory) / CONFIG_ECHO
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(config), encoding="utf8")
    return path


__all__ = [
    "CONFIG_ECHO",
    "ConfigError",
    "DataConfig",
    "SynthConfig",
    "ModelSection",
    "PretrainConfig",
    "TrainingConfig",
    "ExperimentConfig",
    "from_dict",
    "to_dict",
    "apply_override",
    "read_yaml",
    "load_config",
    "dump_config",
    "write_config",
]

"""JSON run configuration with strict parsing.

Every section maps onto a frozen dataclass.  Unknown keys, wrong types and
missing required entries raise :class:`ConfigError` naming the offending key
(dotted path, e.g. ``train.tau``).  ``inf`` / ``"inf"`` is accepted wherever a
float is expected.
"""
import json
import math
import typing
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass, replace

from .attack import AttackConfig
from .synth import SynthConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    out: str = "out"
    dataset: typing.Optional[str] = None
    synthetic: typing.Optional[str] = None
    teacher: typing.Optional[str] = None
    student: typing.Optional[str] = None
    model: typing.Optional[str] = None


@dataclass(frozen=True)
class DataConfig:
    kind: str = "gauss2d"
    classes: int = 4
    per_class: int = 500
    spread: float = 0.6
    radius: float = 2.0
    noise: float = 0.1
    test_stride: int = 5

    def __post_init__(self):
        if self.kind not in ("gauss2d", "patterns8x8"):
            raise ValueError(f"data.kind must be 'gauss2d' or 'patterns8x8', got {self.kind!r}")
        if self.classes < 2 or self.per_class < 1:
            raise ValueError("need classes >= 2 and per_class >= 1")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "mlp-bn"
    widths: typing.Optional[tuple] = None


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 10
    lr: float = 0.05
    batch_size: int = 64
    momentum: float = 0.9


@dataclass(frozen=True)
class EvalConfig:
    k: int = 5
    bins: int = 100
    significance: float = 0.05
    features: str = "penultimate"
    iterations: tuple = (1, 2, 5, 10, 100)
    unbounded_iterations: int = 1000
    surface_resolution: int = 21
    surface_radius: float = 1.0
    surface_samples: int = 500

    def __post_init__(self):
        if self.features not in ("input", "penultimate"):
            raise ValueError(f"eval.features must be 'input' or 'penultimate'")


@dataclass(frozen=True)
class SweepConfig:
    tau: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    aggregate_batches: tuple = (1, 2, 4, 10)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)


# value_range follows the dataset and is never configured by hand
_EXCLUDED = {AttackConfig: {"value_range"}}


def _type_name(tp):
    return getattr(tp, "__name__", str(tp))


def _coerce(value, tp, where):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], where)
    if is_dataclass(tp):
        return _build(tp, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected bool, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected int, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, str) and value.strip().lower() in ("inf", "+inf", "infinity"):
            return math.inf
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected string, got {value!r}")
        return value
    if tp in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected list, got {value!r}")
        out = []
        for i, v in enumerate(value):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{where}[{i}]: expected number, got {v!r}")
            out.append(v)
        return tuple(out)
    raise ConfigError(f"{where}: unsupported field type {_type_name(tp)}")


def _field_type(cls, f, hints):
    tp = hints.get(f.name, f.type)
    # dataclass fields like ``step: float = None`` are optional in practice
    if f.default is None and typing.get_origin(tp) is not typing.Union:
        tp = typing.Optional[tp]
    return tp


def _build(cls, data, where=""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    allowed = {f.name: f for f in fields(cls) if f.name not in _EXCLUDED.get(cls, ())}
    for key in data:
        if key not in allowed:
            name = f"{where}.{key}" if where else key
            raise ConfigError(f"unknown config key {name!r}")
    kwargs = {}
    for name, f in allowed.items():
        path = f"{where}.{name}" if where else name
        if name in data:
            kwargs[name] = _coerce(data[name], _field_type(cls, f, hints), path)
        elif f.default is MISSING and f.default_factory is MISSING:
            raise ConfigError(f"missing required config key {path!r}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def from_dict(data):
    return _build(RunConfig, data)


def load_config(path=None):
    """Parse a JSON file (``None`` gives all defaults)."""
    if path is None:
        return RunConfig()
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data)


def _plain(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def to_dict(cfg):
    out = _plain(asdict(cfg))
    out["attack"].pop("value_range", None)
    return out


def dumps(cfg):
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)


def require(cfg, dotted):
    """Value at ``dotted`` (e.g. ``"paths.teacher"``); ConfigError when unset."""
    obj = cfg
    for part in dotted.split("."):
        obj = getattr(obj, part)
    if obj is None:
        raise ConfigError(f"missing required config key {dotted!r}")
    return obj


def override(cfg, section, **changes):
    """Copy of ``cfg`` with fields of one section replaced (validated)."""
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return cfg
    try:
        return replace(cfg, **{section: replace(getattr(cfg, section), **changes)})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None

"""Run configuration: one JSON document with a strict schema.

Unknown keys and wrongly typed values raise ConfigurationError naming the
dotted key. Command-line flags override keys through ``apply_overrides``.
"""
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union, get_args, get_origin, get_type_hints

from backbone import BackboneConfig
from benchmark_data import DegradationSpec
from errors import ConfigurationError
from finetune import ADAPTER_MODES, TrainConfig
from margin_losses import LossConfig
from model_surgery import PRESETS, InjectionConfig
from recognition_metrics import EvalConfig

RESOLVED_CONFIG_NAME = 'resolved_config.json'
# keys filled from the top-level document rather than read from their section
DERIVED_KEYS = {'train': frozenset({'seed'})}
DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent / 'run_config.json'


@dataclass(frozen=True)
class DataConfig:
    n_identities: int = 16
    per_identity_counts: Dict[str, int] = field(
        default_factory=lambda: {'train': 6, 'gallery': 2, 'probe': 4})
    n_unknown_identities: int = 4
    identity_spread: float = 1.0
    train_degraded_fraction: float = 0.5
    degradation_grid: Optional[List[Dict[str, Any]]] = None
    pretrain_identities: int = 32
    pretrain_per_identity: int = 8
    n_jobs: int = 1

    def grid(self) -> Optional[List[DegradationSpec]]:
        if self.degradation_grid is None:
            return None
        return [DegradationSpec.from_dict(spec) for spec in self.degradation_grid]


@dataclass(frozen=True)
class GateConfig:
    estimator: str = 'laplacian-sharpness'
    samples: int = 1000
    split: str = 'train'


@dataclass(frozen=True)
class InjectionSection:
    preset: Optional[str] = 'paper-best'
    sites: Optional[List[str]] = None
    rank: int = 8
    scale: float = 1.0
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.sites is None and self.preset not in PRESETS:
            raise ConfigurationError(f"unknown injection preset '{self.preset}'; available: {sorted(PRESETS)}")

    def build(self, mode: str = 'twin') -> InjectionConfig:
        sites = frozenset(self.sites) if self.sites is not None else PRESETS[self.preset]
        return InjectionConfig(sites=sites, rank=self.rank, scale=self.scale,
                               dropout_rate=self.dropout_rate, mode=mode)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 10
    warmup_epochs: int = 1
    batch_size: int = 32
    initial_lr: float = 1e-3
    weight_decay: float = 0.05
    lr_power: float = 1.0


@dataclass(frozen=True)
class ParamCountConfig:
    ranks: Tuple[int, ...] = (2, 4, 8, 16)
    presets: Optional[List[str]] = None


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    injection: InjectionSection = field(default_factory=InjectionSection)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    param_count: ParamCountConfig = field(default_factory=ParamCountConfig)
    seed: int = 0
    output_dir: str = 'runs/default'

    def __post_init__(self):
        # the top-level seed drives every stage
        self.train = replace(self.train, seed=self.seed)

    def injection_config(self, mode: Optional[str] = None) -> InjectionConfig:
        mode = mode or self.train.mode
        return self.injection.build(ADAPTER_MODES.get(mode, 'none'))

    def pretrain_train_config(self) -> TrainConfig:
        p = self.pretrain
        return TrainConfig(epochs=p.epochs, warmup_epochs=p.warmup_epochs, batch_size=p.batch_size,
                           initial_lr=p.initial_lr, weight_decay=p.weight_decay, lr_power=p.lr_power,
                           seed=self.seed, mode='full_ft', num_workers=self.train.num_workers)

    def to_dict(self) -> Dict:
        data = asdict(self)
        for section, keys in DERIVED_KEYS.items():
            for key in keys:
                data[section].pop(key, None)
        return data


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _type_name(hint) -> str:
    return getattr(hint, '__name__', str(hint))


def _coerce(value, hint, path: str):
    if is_dataclass(hint):
        return _parse(hint, value, path)
    origin, args = get_origin(hint), get_args(hint)
    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if hint is Any:
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"config key '{path}' expects a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"config key '{path}' expects an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"config key '{path}' expects a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"config key '{path}' expects a string, got {value!r}")
        return value
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"config key '{path}' expects a list, got {value!r}")
        item_hint = args[0] if args else Any
        items = [_coerce(v, item_hint, f"{path}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigurationError(f"config key '{path}' expects an object, got {value!r}")
        value_hint = args[1] if args else Any
        return {str(k): _coerce(v, value_hint, _join(path, str(k))) for k, v in value.items()}
    raise ConfigurationError(f"config key '{path}' has unsupported type {_type_name(hint)}")


def _parse(cls, data, path: str = ''):
    if not isinstance(data, dict):
        raise ConfigurationError(f"config section '{path or '<root>'}' must be an object")
    hints = get_type_hints(cls)
    names = [f.name for f in fields(cls) if f.init and f.name not in DERIVED_KEYS.get(path, ())]
    derived = sorted(set(data) & DERIVED_KEYS.get(path, frozenset()))
    if derived:
        key = _join(path, derived[0])
        raise ConfigurationError(f"config key '{key}' is set from the top-level '{derived[0]}'; remove it")
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigurationError(f"unknown config key '{_join(path, unknown[0])}'")
    kwargs = {key: _coerce(value, hints[key], _join(path, key)) for key, value in data.items()}
    try:
        return cls(**kwargs)
    except ConfigurationError as e:
        raise ConfigurationError(f"invalid config section '{path or '<root>'}': {str(e)}") from e
    except TypeError as e:
        raise ConfigurationError(f"invalid config section '{path or '<root>'}': {str(e)}") from e


def parse_run_config(data: Dict) -> RunConfig:
    return _parse(RunConfig, data)


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Load a run config; without a path the built-in defaults are used.

    Raises:
        ConfigurationError: If the file is missing, is not valid JSON or breaks the schema
    """
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except FileNotFoundError as e:
        raise ConfigurationError(f"config file not found: {path}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file {path} is not valid JSON: {e.msg} (line {e.lineno})") from e
    return parse_run_config(data)


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Set dotted keys (``train.epochs``) and re-validate the whole document."""
    data = json.loads(json.dumps(config.to_dict()))
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        parts = dotted.split('.')
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigurationError(f"unknown config key '{dotted}'")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigurationError(f"unknown config key '{dotted}'")
        node[parts[-1]] = value
    return parse_run_config(data)


def write_resolved_config(config: RunConfig, out_dir: Union[str, Path]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG_NAME
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + '\n', encoding='utf-8')
    return path

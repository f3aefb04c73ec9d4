"""Declarative injection of twin adapters into a ToyBackbone, and its removal."""
import hashlib
import json
import zlib
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Iterable, List, Optional

import torch
from torch import nn

from backbone import ToyBackbone
from errors import ConfigurationError, GatingError, StateError
from logging_utils import get_logger
from lora_adapters import DEFAULT_DROPOUT, TwinAdaptedLinear, init_adapter
from quality_gate import QualityGate

logger = get_logger('model_surgery')

SITES = ('attention_qkv', 'attention_proj', 'mlp', 'patch_reduction', 'feature_head')
MODES = ('twin', 'single', 'none')

PRESETS: Dict[str, FrozenSet[str]] = {
    'attention': frozenset({'attention_qkv'}),
    'attention-feature': frozenset({'attention_qkv', 'feature_head'}),
    'attention-mlp-feature': frozenset({'attention_qkv', 'mlp', 'feature_head'}),
    'attention-mlp-proj-feature': frozenset({'attention_qkv', 'mlp', 'attention_proj', 'feature_head'}),
    'attention-mlp-proj-reduction-feature': frozenset(
        {'attention_qkv', 'mlp', 'attention_proj', 'patch_reduction', 'feature_head'}
    ),
}
PRESETS['paper-best'] = PRESETS['attention-feature']


def site_of(layer_id: str) -> Optional[str]:
    """Injection site a backbone linear belongs to, or None."""
    if layer_id == 'head':
        return 'feature_head'
    if layer_id.endswith('.attn.qkv'):
        return 'attention_qkv'
    if layer_id.endswith('.attn.proj'):
        return 'attention_proj'
    if layer_id.endswith('.mlp.fc1') or layer_id.endswith('.mlp.fc2'):
        return 'mlp'
    if layer_id.startswith('reductions.') and layer_id.endswith('.reduce'):
        return 'patch_reduction'
    return None


@dataclass(frozen=True)
class InjectionConfig:
    sites: FrozenSet[str] = field(default_factory=lambda: PRESETS['paper-best'])
    rank: int = 8
    scale: float = 1.0
    dropout_rate: float = DEFAULT_DROPOUT
    mode: str = 'twin'

    def __post_init__(self):
        object.__setattr__(self, 'sites', frozenset(self.sites))
        unknown = sorted(self.sites - set(SITES))
        if unknown:
            raise ConfigurationError(f"unknown injection site(s) {unknown}; valid sites: {list(SITES)}")
        if self.mode not in MODES:
            raise ConfigurationError(f"injection mode must be one of {list(MODES)}, got '{self.mode}'")
        if self.mode != 'none' and not self.sites:
            raise ConfigurationError("injection sites must be nonempty unless mode is 'none'")
        if not isinstance(self.rank, int) or self.rank < 1:
            raise ConfigurationError(f"rank must be a positive integer, got {self.rank}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.scale < 0:
            raise ConfigurationError(f"scale must be nonnegative, got {self.scale}")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> 'InjectionConfig':
        if name not in PRESETS:
            raise ConfigurationError(f"unknown injection preset '{name}'; available: {sorted(PRESETS)}")
        return cls(sites=PRESETS[name], **overrides)

    def with_mode(self, mode: str) -> 'InjectionConfig':
        return replace(self, mode=mode)

    def to_dict(self) -> Dict:
        return {'sites': sorted(self.sites), 'rank': self.rank, 'scale': self.scale,
                'dropout_rate': self.dropout_rate, 'mode': self.mode}

    @classmethod
    def from_dict(cls, data: Dict) -> 'InjectionConfig':
        return cls(sites=frozenset(data['sites']), rank=int(data['rank']), scale=float(data['scale']),
                   dropout_rate=float(data['dropout_rate']), mode=str(data['mode']))


def _layer_seed(seed: int, layer_id: str) -> int:
    return (int(seed) * 1_000_003 + zlib.crc32(layer_id.encode('utf-8'))) % (2 ** 63)


def _set_submodule(root: nn.Module, dotted: str, module: nn.Module):
    parent_name, _, child = dotted.rpartition('.')
    parent = root.get_submodule(parent_name) if parent_name else root
    setattr(parent, child, module)


def linear_layers(backbone: nn.Module) -> Dict[str, nn.Linear]:
    return {name: m for name, m in backbone.named_modules() if isinstance(m, nn.Linear)}


class AdaptedModel(nn.Module):
    """A backbone carrying adapters at the configured sites.

    ``forward(images, alpha=None)`` computes alpha from the quality gate once
    per batch when the model is twin-adapted and no alpha is given.
    """

    def __init__(self, backbone: ToyBackbone, config: InjectionConfig,
                 gate: Optional[QualityGate], layer_ids: List[str],
                 original_flags: Dict[str, bool]):
        super().__init__()
        self.backbone = backbone
        self.config = config
        self.gate = gate
        self.layer_ids = list(layer_ids)
        self._original_flags = dict(original_flags)
        self._stripped = False

    @property
    def is_twin(self) -> bool:
        return self.config.mode == 'twin'

    def adapter_layers(self) -> Dict[str, TwinAdaptedLinear]:
        return {layer_id: self.backbone.get_submodule(layer_id) for layer_id in self.layer_ids}

    def adapter_parameters(self) -> Iterable[nn.Parameter]:
        for layer in self.adapter_layers().values():
            yield from layer.adapter_hi.parameters()
            if layer.adapter_lo is not None:
                yield from layer.adapter_lo.parameters()

    @property
    def layer_shapes(self) -> Dict[str, List[int]]:
        return {layer_id: [layer.out_features, layer.in_features]
                for layer_id, layer in self.adapter_layers().items()}

    @property
    def injection_digest(self) -> str:
        payload = {
            'sites': sorted(self.config.sites),
            'rank': self.config.rank,
            'scale': self.config.scale,
            'mode': self.config.mode,
            'layers': self.layer_shapes,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode('utf-8')).hexdigest()

    def compute_alpha(self, images: torch.Tensor) -> torch.Tensor:
        if self.gate is None:
            raise GatingError("twin-adapted model has no quality gate; pass alpha explicitly")
        return self.gate.alpha_for_images(images)

    def forward(self, images: torch.Tensor, alpha: Optional[torch.Tensor] = None) -> torch.Tensor:
        if self._stripped:
            raise StateError("adapters were stripped from this model")
        if self.is_twin:
            if alpha is None:
                alpha = self.compute_alpha(images)
        else:
            alpha = None
        return self.backbone(images, alpha)


def inject(backbone: ToyBackbone, config: InjectionConfig,
           gate: Optional[QualityGate] = None, seed: int = 0) -> AdaptedModel:
    """
    Wrap every linear sublayer at the configured sites with adapters.

    The backbone is modified in place and frozen. Each adapted layer draws
    ``adapter_hi`` then ``adapter_lo`` from its own generator seeded by
    ``(seed, layer_id)``, so a single-mode model shares ``adapter_hi`` with the
    twin model built from the same seed.

    Args:
        backbone: Pristine backbone
        config: Sites, rank, scale, dropout and mode
        gate: Quality gate used to compute alpha at model entry
        seed: Adapter initialization seed

    Returns:
        AdaptedModel wrapping the backbone

    Raises:
        ConfigurationError: On double injection, a site absent from the backbone or a rank
            too large for a target layer; the backbone is left untouched
    """
    if getattr(backbone, '_petal_injected', False) or any(
            isinstance(m, TwinAdaptedLinear) for m in backbone.modules()):
        raise ConfigurationError("backbone already carries adapters; strip it before injecting again")

    layers = linear_layers(backbone)
    targets: List[str] = []
    if config.mode != 'none':
        by_site: Dict[str, List[str]] = {site: [] for site in config.sites}
        for layer_id in layers:
            site = site_of(layer_id)
            if site in by_site:
                by_site[site].append(layer_id)
        missing = sorted(site for site, ids in by_site.items() if not ids)
        if missing:
            raise ConfigurationError(f"injection site(s) {missing} not present in this backbone")
        targets = [layer_id for layer_id in layers if site_of(layer_id) in by_site]
        for layer_id in targets:
            m, n = layers[layer_id].out_features, layers[layer_id].in_features
            if not 1 <= config.rank <= min(m, n):
                raise ConfigurationError(
                    f"rank must lie in [1, {min(m, n)}] for a {m}x{n} layer, got {config.rank} ({layer_id})")

    original_flags = {name: p.requires_grad for name, p in backbone.named_parameters()}
    for p in backbone.parameters():
        p.requires_grad_(False)

    replaced: List[str] = []
    try:
        for layer_id in targets:
            base = layers[layer_id]
            m, n = base.out_features, base.in_features
            generator = torch.Generator()
            generator.manual_seed(_layer_seed(seed, layer_id))
            kwargs = dict(rank=config.rank, scale=config.scale, dropout_rate=config.dropout_rate,
                          generator=generator, dtype=base.weight.dtype)
            adapter_hi = init_adapter(m, n, **kwargs)
            adapter_lo = init_adapter(m, n, **kwargs) if config.mode == 'twin' else None
            wrapped = TwinAdaptedLinear(base, adapter_hi, adapter_lo).to(base.weight.device)
            _set_submodule(backbone, layer_id, wrapped)
            replaced.append(layer_id)
    except Exception:
        for layer_id in replaced:
            _set_submodule(backbone, layer_id, layers[layer_id])
        for name, p in backbone.named_parameters():
            p.requires_grad_(original_flags[name])
        raise

    backbone._petal_injected = True
    model = AdaptedModel(backbone, config, gate, targets, original_flags)
    logger.info("Injected adapters", mode=config.mode, rank=config.rank,
                sites=sorted(config.sites), layers=targets, seed=seed)
    return model


def strip(model: AdaptedModel) -> ToyBackbone:
    """Remove adapters and return the pristine backbone with its original trainability."""
    if not isinstance(model, AdaptedModel) or model._stripped:
        raise StateError("model is not an injected model")
    backbone = model.backbone
    for layer_id, layer in model.adapter_layers().items():
        _set_submodule(backbone, layer_id, layer.base)
    for name, p in backbone.named_parameters():
        p.requires_grad_(model._original_flags.get(name, True))
    backbone._petal_injected = False
    model._stripped = True
    logger.info("Stripped adapters", layers=model.layer_ids)
    return backbone

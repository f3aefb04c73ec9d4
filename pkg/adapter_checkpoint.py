"""Adapter-only checkpoints.

An archive is a safetensors file holding float32 adapter tensors (and
optionally the margin head) plus a JSON manifest in the file metadata. Base
backbone weights are never written or loaded.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from errors import CorruptCheckpointError, IncompatibleCheckpointError
from logging_utils import get_logger
from margin_losses import MarginHead
from model_surgery import AdaptedModel, InjectionConfig
from quality_gate import GateCalibration

logger = get_logger('adapter_checkpoint')

CHECKPOINT_FORMAT = 'petal-ckpt/1'
ALPHA_CONVENTION = 'alpha-weights-hi'
HEAD_KEY = 'head.class_weights'


@dataclass
class AdapterCheckpoint:
    tensors: Dict[str, torch.Tensor]
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def injection_digest(self) -> str:
        return self.metadata.get('injection_digest', '')

    @property
    def injection_config(self) -> InjectionConfig:
        return InjectionConfig.from_dict(self.metadata['injection'])

    @property
    def calibration(self) -> Optional[GateCalibration]:
        data = self.metadata.get('calibration')
        return GateCalibration.from_dict(data) if data else None

    def restore_head(self) -> Optional[MarginHead]:
        description = self.metadata.get('head')
        if not description:
            return None
        if HEAD_KEY not in self.tensors:
            raise CorruptCheckpointError(f"checkpoint describes a head but has no '{HEAD_KEY}' tensor")
        head = MarginHead.from_description(description)
        with torch.no_grad():
            head.class_weights.copy_(self.tensors[HEAD_KEY])
        return head


def _adapter_keys(layer_id: str, twin: bool):
    roles = ('hi', 'lo') if twin else ('hi',)
    for role in roles:
        yield role, 'down', f'{layer_id}.{role}.down'
        yield role, 'up', f'{layer_id}.{role}.up'


def save_adapters(model: AdaptedModel, calibration: Optional[GateCalibration] = None,
                  head: Optional[MarginHead] = None) -> AdapterCheckpoint:
    """Collect adapter tensors, the optional head and the manifest of ``model``."""
    tensors: Dict[str, torch.Tensor] = {}
    for layer_id, layer in model.adapter_layers().items():
        for role, part, key in _adapter_keys(layer_id, layer.is_twin):
            adapter = layer.adapter_hi if role == 'hi' else layer.adapter_lo
            weights = adapter.down_weights if part == 'down' else adapter.up_weights
            tensors[key] = weights.detach().clone()
    if calibration is None and model.gate is not None:
        calibration = model.gate.calibration
    metadata = {
        'format': CHECKPOINT_FORMAT,
        'convention': ALPHA_CONVENTION,
        'injection': model.config.to_dict(),
        'injection_digest': model.injection_digest,
        'layers': model.layer_shapes,
        'rank': model.config.rank,
        'scale': model.config.scale,
        'calibration': calibration.to_dict() if calibration else None,
        'head': None,
    }
    if head is not None:
        tensors[HEAD_KEY] = head.class_weights.detach().clone()
        metadata['head'] = head.describe()
    return AdapterCheckpoint(tensors=tensors, metadata=metadata)


def load_adapters(model: AdaptedModel, checkpoint: AdapterCheckpoint) -> AdaptedModel:
    """
    Copy adapter weights from ``checkpoint`` into ``model``.

    Raises:
        IncompatibleCheckpointError: If the injection digest differs from the model's
        CorruptCheckpointError: If a layer's tensors are missing or misshapen
    """
    if checkpoint.injection_digest != model.injection_digest:
        raise IncompatibleCheckpointError(
            "checkpoint injection config does not match the model "
            f"(checkpoint rank={checkpoint.metadata.get('rank')}, model rank={model.config.rank})"
        )
    with torch.no_grad():
        for layer_id, layer in model.adapter_layers().items():
            for role, part, key in _adapter_keys(layer_id, layer.is_twin):
                if key not in checkpoint.tensors:
                    raise CorruptCheckpointError(f"checkpoint is missing tensor '{key}'")
                adapter = layer.adapter_hi if role == 'hi' else layer.adapter_lo
                target = adapter.down_weights if part == 'down' else adapter.up_weights
                source = checkpoint.tensors[key]
                if tuple(source.shape) != tuple(target.shape):
                    raise CorruptCheckpointError(
                        f"tensor '{key}' has shape {tuple(source.shape)}, expected {tuple(target.shape)}"
                    )
                target.copy_(source.to(dtype=target.dtype, device=target.device))
    return model


def write_checkpoint(path: Union[str, Path], checkpoint: AdapterCheckpoint) -> Path:
    path = Path(path)
    tensors = {k: v.detach().to(torch.float32).contiguous().cpu() for k, v in checkpoint.tensors.items()}
    metadata = {
        'format': CHECKPOINT_FORMAT,
        'manifest': json.dumps(checkpoint.metadata, sort_keys=True),
    }
    save_file(tensors, str(path), metadata=metadata)
    logger.info("Wrote adapter checkpoint", path=str(path), tensors=len(tensors))
    return path


def read_checkpoint(path: Union[str, Path]) -> AdapterCheckpoint:
    path = Path(path)
    if not path.exists():
        raise CorruptCheckpointError(f"checkpoint not found: {path}")
    try:
        with safe_open(str(path), framework='pt', device='cpu') as archive:
            header = archive.metadata() or {}
            tensors = {key: archive.get_tensor(key) for key in archive.keys()}
    except Exception as e:
        raise CorruptCheckpointError(f"cannot read checkpoint {path}: {str(e)}") from e
    if header.get('format') != CHECKPOINT_FORMAT:
        raise CorruptCheckpointError(
            f"unsupported checkpoint format {header.get('format')!r}, expected {CHECKPOINT_FORMAT!r}"
        )
    try:
        metadata = json.loads(header['manifest'])
    except (KeyError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"checkpoint manifest is unreadable: {str(e)}") from e
    return AdapterCheckpoint(tensors=tensors, metadata=metadata)


def save_head_only(head: MarginHead, calibration: Optional[GateCalibration] = None) -> AdapterCheckpoint:
    """Checkpoint for runs without adapters (frozen or full fine-tuning)."""
    metadata = {
        'format': CHECKPOINT_FORMAT,
        'convention': ALPHA_CONVENTION,
        'injection': InjectionConfig(sites=frozenset(), mode='none').to_dict(),
        'injection_digest': '',
        'layers': {},
        'rank': None,
        'scale': None,
        'calibration': calibration.to_dict() if calibration else None,
        'head': head.describe(),
    }
    return AdapterCheckpoint(tensors={HEAD_KEY: head.class_weights.detach().clone()}, metadata=metadata)

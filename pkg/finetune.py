"""Margin-loss fine-tuning with frozen base weights, and the first-step gradient probe."""
import copy
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np
import torch
from torch import nn
from torch.optim import AdamW
from torch.optim.lr_scheduler import LambdaLR
from torch.utils.data import DataLoader

from adapter_checkpoint import AdapterCheckpoint, save_adapters, save_head_only
from backbone import ToyBackbone
from benchmark_data import DatasetManifest, ManifestDataset, ManifestImages
from errors import ConfigurationError, InputError, NumericError
from logging_utils import get_logger
from margin_losses import MarginHead, margin_loss
from model_surgery import AdaptedModel, InjectionConfig, inject
from quality_gate import GateCalibration, QualityGate

logger = get_logger('finetune')

MODES = ('petalface', 'single_lora', 'full_ft', 'frozen')
ADAPTER_MODES = {'petalface': 'twin', 'single_lora': 'single'}
DEFAULT_CALIBRATION_SAMPLES = 1000


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    warmup_epochs: int = 2
    batch_size: int = 8
    initial_lr: float = 4e-5
    weight_decay: float = 0.1
    lr_power: float = 1.0
    seed: int = 0
    mode: str = 'petalface'
    grad_clip_norm: Optional[float] = None
    num_workers: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"training mode must be one of {list(MODES)}, got '{self.mode}'")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigurationError("epochs and warmup_epochs must be nonnegative")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ConfigurationError(
                f"warmup_epochs ({self.warmup_epochs}) must be smaller than epochs ({self.epochs})"
            )
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.initial_lr <= 0 or self.lr_power <= 0:
            raise ConfigurationError("initial_lr and lr_power must be positive")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigurationError("grad_clip_norm must be positive when set")


def lr_factor(step: int, warmup_steps: int, total_steps: int, power: float = 1.0) -> float:
    """
    Multiplier on the initial LR for optimizer step ``step`` (0-based).

    With ``u = step + 1`` the factor is ``u / warmup_steps`` during warm-up and
    ``(1 - (u - warmup_steps) / decay_steps) ** power`` afterwards, reaching 1
    on the last warm-up step and 0 on the last step.
    """
    u = step + 1
    if warmup_steps > 0 and u <= warmup_steps:
        return u / warmup_steps
    decay_steps = max(1, total_steps - warmup_steps)
    progress = min(1.0, (u - warmup_steps) / decay_steps)
    return (1.0 - progress) ** power


def build_scheduler(optimizer, warmup_steps: int, total_steps: int, power: float = 1.0) -> LambdaLR:
    return LambdaLR(optimizer, lambda step: lr_factor(step, warmup_steps, total_steps, power))


@dataclass
class TrainReport:
    mode: str
    losses: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    max_grads: List[float] = field(default_factory=list)
    backbone_max_grads: List[float] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    steps_per_epoch: int = 0
    wall_clock_seconds: float = 0.0
    calibration: Optional[GateCalibration] = None
    checkpoint: Optional[AdapterCheckpoint] = None

    @property
    def initial_max_grad(self) -> Optional[float]:
        return self.max_grads[0] if self.max_grads else None

    @property
    def initial_backbone_max_grad(self) -> Optional[float]:
        return self.backbone_max_grads[0] if self.backbone_max_grads else None

    def to_dict(self) -> Dict:
        return {
            'mode': self.mode,
            'losses': self.losses,
            'lrs': self.lrs,
            'max_grads': self.max_grads,
            'backbone_max_grads': self.backbone_max_grads,
            'epoch_losses': self.epoch_losses,
            'steps_per_epoch': self.steps_per_epoch,
            'wall_clock_seconds': self.wall_clock_seconds,
            'initial_max_grad': self.initial_max_grad,
            'initial_backbone_max_grad': self.initial_backbone_max_grad,
            'calibration': self.calibration.to_dict() if self.calibration else None,
        }


def prepare_model(backbone: ToyBackbone, mode: str, injection: Optional[InjectionConfig] = None,
                  gate: Optional[QualityGate] = None, seed: int = 0) -> nn.Module:
    """Set up trainability for ``mode``; adapter modes inject into ``backbone`` in place."""
    if mode not in MODES:
        raise ConfigurationError(f"training mode must be one of {list(MODES)}, got '{mode}'")
    if mode in ADAPTER_MODES:
        config = (injection or InjectionConfig()).with_mode(ADAPTER_MODES[mode])
        return inject(backbone, config, gate=gate, seed=seed)
    for p in backbone.parameters():
        p.requires_grad_(mode == 'full_ft')
    return backbone


def _check_model(model: nn.Module, mode: str):
    if mode in ADAPTER_MODES:
        if not isinstance(model, AdaptedModel) or model.config.mode != ADAPTER_MODES[mode]:
            raise ConfigurationError(f"mode '{mode}' needs a model injected with mode '{ADAPTER_MODES[mode]}'")
    elif isinstance(model, AdaptedModel):
        raise ConfigurationError(f"mode '{mode}' trains a plain backbone, got an adapted model")


def backbone_trainables(model: nn.Module) -> List[Tuple[str, nn.Parameter]]:
    return [(name, p) for name, p in model.named_parameters() if p.requires_grad]


def _ensure_gate(model: nn.Module, gate: Optional[QualityGate], manifest: DatasetManifest,
                 samples: int, seed: int) -> Optional[QualityGate]:
    if not (isinstance(model, AdaptedModel) and model.is_twin):
        return gate
    gate = gate or model.gate
    if gate is None:
        raise ConfigurationError("petalface mode needs a quality gate")
    if not gate.is_calibrated:
        logger.info("Calibrating quality gate before training", l=samples)
        gate = gate.calibrated(ManifestImages(manifest, 'train'), samples, seed)
    model.gate = gate
    return gate


def _loader(dataset: ManifestDataset, config: TrainConfig) -> DataLoader:
    generator = torch.Generator()
    generator.manual_seed(config.seed)
    return DataLoader(dataset, batch_size=config.batch_size, shuffle=True, generator=generator,
                      num_workers=config.num_workers, drop_last=False)


def _forward(model: nn.Module, images: torch.Tensor, gate: Optional[QualityGate]) -> torch.Tensor:
    if isinstance(model, AdaptedModel):
        alpha = gate.alpha_for_images(images) if model.is_twin else None
        return model(images, alpha)
    return model(images)


def _max_abs_grad(params: Sequence[nn.Parameter]) -> float:
    values = [p.grad.detach().abs().max().item() for p in params if p.grad is not None and p.grad.numel()]
    return float(max(values)) if values else 0.0


def finetune(model: nn.Module, manifest: DatasetManifest, gate: Optional[QualityGate],
             head: MarginHead, config: TrainConfig, stream: Optional[TextIO] = None,
             calibration_samples: int = DEFAULT_CALIBRATION_SAMPLES) -> TrainReport:
    """
    Train ``model`` and ``head`` on the manifest's training split.

    Adapter modes train adapters and head; ``full_ft`` trains every backbone
    weight and the head; ``frozen`` trains the head only. The gate is
    calibrated first when it has no calibration yet.

    Args:
        model: AdaptedModel for adapter modes, plain backbone otherwise
        manifest: Dataset manifest with a training split
        gate: Quality gate (twin mode only)
        head: Margin head over the training identities
        config: Training recipe
        stream: Where epoch progress lines go; stdout by default

    Returns:
        TrainReport with per-step series and the resulting checkpoint

    Raises:
        InputError: If the training split is empty
        NumericError: If the loss becomes non-finite
        ConfigurationError: If model and mode disagree or the head has too few classes
    """
    stream = stream or sys.stdout
    _check_model(model, config.mode)
    if config.mode == 'full_ft':
        for p in model.parameters():
            p.requires_grad_(True)
    elif config.mode == 'frozen':
        for p in model.parameters():
            p.requires_grad_(False)

    dataset = ManifestDataset(manifest, 'train')
    if len(dataset) == 0:
        raise InputError("training split is empty")
    if head.num_classes < len(dataset.label_map):
        raise ConfigurationError(
            f"head has {head.num_classes} classes but the training split has {len(dataset.label_map)} identities"
        )
    gate = _ensure_gate(model, gate, manifest, calibration_samples, config.seed)
    run_log = logger.bind(mode=config.mode, seed=config.seed)

    trainables = [p for _, p in backbone_trainables(model)]
    params = trainables + list(head.parameters())
    loader = _loader(dataset, config)
    steps_per_epoch = len(loader)
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = config.warmup_epochs * steps_per_epoch
    optimizer = AdamW(params, lr=config.initial_lr, weight_decay=config.weight_decay)
    scheduler = build_scheduler(optimizer, warmup_steps, total_steps, config.lr_power)

    report = TrainReport(mode=config.mode, steps_per_epoch=steps_per_epoch,
                         calibration=gate.calibration if gate is not None else None)
    run_log.info("Starting fine-tuning", epochs=config.epochs, steps=total_steps,
                 trainable=sum(p.numel() for p in trainables), images=len(dataset))
    started = time.perf_counter()
    model.train()
    head.train()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        for epoch in range(1, config.epochs + 1):
            epoch_losses = []
            epoch_max_grad = 0.0
            for images, labels in loader:
                lr = scheduler.get_last_lr()[0]
                loss = margin_loss(head, _forward(model, images, gate), labels)
                if not torch.isfinite(loss):
                    run_log.error("Non-finite loss", epoch=epoch, step=len(report.losses))
                    raise NumericError(
                        f"non-finite loss {loss.item()} at epoch {epoch}, step {len(report.losses)}"
                    )
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                max_grad = _max_abs_grad(params)
                report.backbone_max_grads.append(_max_abs_grad(trainables))
                if config.grad_clip_norm is not None:
                    torch.nn.utils.clip_grad_norm_(params, config.grad_clip_norm)
                optimizer.step()
                scheduler.step()
                report.losses.append(float(loss.item()))
                report.lrs.append(float(lr))
                report.max_grads.append(max_grad)
                epoch_losses.append(float(loss.item()))
                epoch_max_grad = max(epoch_max_grad, max_grad)
            mean_loss = float(np.mean(epoch_losses))
            report.epoch_losses.append(mean_loss)
            print(f"epoch={epoch} loss={mean_loss:.6f} lr={report.lrs[-1]:.6g} max_grad={epoch_max_grad:.6g}",
                  file=stream, flush=True)
            run_log.info("Finished epoch", epoch=epoch, loss=mean_loss, lr=report.lrs[-1],
                         max_grad=epoch_max_grad)
    model.eval()
    head.eval()
    report.wall_clock_seconds = time.perf_counter() - started

    if isinstance(model, AdaptedModel):
        report.checkpoint = save_adapters(model, calibration=report.calibration, head=head)
    else:
        report.checkpoint = save_head_only(head, calibration=report.calibration)
    run_log.info("Finished fine-tuning", steps=len(report.losses),
                 final_loss=report.losses[-1] if report.losses else None,
                 wall_clock_seconds=report.wall_clock_seconds)
    return report


def pretrain(backbone: ToyBackbone, manifest: DatasetManifest, head: MarginHead,
             config: TrainConfig, stream: Optional[TextIO] = None) -> TrainReport:
    """Full training of a pristine backbone on clean identities."""
    return finetune(backbone, manifest, None, head, replace(config, mode='full_ft'), stream=stream)


@dataclass
class GradientStats:
    mode: str
    max_abs: float
    p99: float
    mean_abs: float
    count: int
    histogram: List[int]
    bin_edges: List[float]

    def to_dict(self) -> Dict:
        return asdict(self)


def first_step_gradients(model: nn.Module, head: MarginHead, images: torch.Tensor,
                         labels: torch.Tensor, gate: Optional[QualityGate], seed: int = 0) -> Dict[str, torch.Tensor]:
    """Gradients of one training-mode loss on the backbone-side trainable parameters."""
    trainables = backbone_trainables(model)
    model.train()
    head.train()
    model.zero_grad(set_to_none=True)
    head.zero_grad(set_to_none=True)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        loss = margin_loss(head, _forward(model, images, gate), labels)
        loss.backward()
    model.eval()
    head.eval()
    return {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for name, p in trainables}


def grad_probe(backbone: ToyBackbone, manifest: DatasetManifest, gate: Optional[QualityGate],
               head: MarginHead, config: TrainConfig, injection: Optional[InjectionConfig] = None,
               modes: Sequence[str] = ('full_ft', 'petalface'), bins: int = 20,
               calibration_samples: int = DEFAULT_CALIBRATION_SAMPLES) -> Dict[str, GradientStats]:
    """
    Compare first-iteration gradient magnitudes across training modes.

    Every mode starts from a copy of the same backbone and head and sees the
    same first batch. Statistics cover the backbone-side trainable parameters;
    the margin head is excluded since it is identical in all modes.
    """
    dataset = ManifestDataset(manifest, 'train')
    if len(dataset) == 0:
        raise InputError("training split is empty")
    images, labels = next(iter(_loader(dataset, config)))

    if 'petalface' in modes:
        if gate is None:
            raise ConfigurationError("petalface mode needs a quality gate")
        if not gate.is_calibrated:
            gate = gate.calibrated(ManifestImages(manifest, 'train'), calibration_samples, config.seed)

    magnitudes: Dict[str, np.ndarray] = {}
    for mode in modes:
        model = prepare_model(copy.deepcopy(backbone), mode, injection, gate, config.seed)
        grads = first_step_gradients(model, copy.deepcopy(head), images, labels, gate, config.seed)
        flat = [g.abs().flatten() for g in grads.values()]
        magnitudes[mode] = torch.cat(flat).double().numpy() if flat else np.zeros(0)

    upper = max((float(m.max()) for m in magnitudes.values() if m.size), default=1.0) or 1.0
    stats = {}
    for mode, values in magnitudes.items():
        counts, edges = np.histogram(values, bins=bins, range=(0.0, upper))
        stats[mode] = GradientStats(
            mode=mode,
            max_abs=float(values.max()) if values.size else 0.0,
            p99=float(np.percentile(values, 99)) if values.size else 0.0,
            mean_abs=float(values.mean()) if values.size else 0.0,
            count=int(values.size),
            histogram=counts.tolist(),
            bin_edges=edges.tolist(),
        )
        logger.info("Gradient probe", mode=mode, max_abs=stats[mode].max_abs, p99=stats[mode].p99,
                    count=stats[mode].count)
    return stats

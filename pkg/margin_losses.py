"""ArcFace and CosFace margin heads."""
import math
from dataclasses import dataclass
from typing import Dict, Optional

import torch
import torch.nn.functional as F
from torch import nn

from errors import ConfigurationError, DimensionError, InputError, NumericError

COS_EPS = 1e-7
VARIANTS = ('arcface', 'cosface')
DEFAULT_MARGINS = {'arcface': 0.5, 'cosface': 0.35}
DEFAULT_LOGIT_SCALE = 64.0


class MarginHead(nn.Module):
    """Class-weight matrix with an angular (ArcFace) or cosine (CosFace) margin.

    Rows of ``class_weights`` are renormalized on every forward.
    """

    def __init__(self, num_classes: int, embedding_dim: int, variant: str = 'arcface',
                 margin: Optional[float] = None, logit_scale: float = DEFAULT_LOGIT_SCALE,
                 seed: int = 0):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigurationError(f"loss variant must be one of {list(VARIANTS)}, got '{variant}'")
        if num_classes < 1 or embedding_dim < 1:
            raise ConfigurationError("num_classes and embedding_dim must be positive")
        margin = DEFAULT_MARGINS[variant] if margin is None else float(margin)
        if margin < 0:
            raise ConfigurationError(f"margin must be nonnegative, got {margin}")
        if logit_scale <= 0:
            raise ConfigurationError(f"logit_scale must be positive, got {logit_scale}")
        self.num_classes = num_classes
        self.embedding_dim = embedding_dim
        self.variant = variant
        self.margin = margin
        self.logit_scale = float(logit_scale)
        generator = torch.Generator()
        generator.manual_seed(seed)
        weights = torch.randn(num_classes, embedding_dim, generator=generator)
        self.class_weights = nn.Parameter(F.normalize(weights, dim=1))

    def forward(self, embeddings: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return margin_logits(self, embeddings, labels)

    def describe(self) -> Dict:
        return {'variant': self.variant, 'margin': self.margin, 'logit_scale': self.logit_scale,
                'num_classes': self.num_classes, 'embedding_dim': self.embedding_dim}

    @classmethod
    def from_description(cls, description: Dict) -> 'MarginHead':
        return cls(num_classes=int(description['num_classes']),
                   embedding_dim=int(description['embedding_dim']),
                   variant=description['variant'], margin=float(description['margin']),
                   logit_scale=float(description['logit_scale']))


def margin_logits(head: MarginHead, embeddings: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """
    Scaled cosine logits with the margin applied to each sample's target class.

    ArcFace targets use ``cos(theta + m)``. Past ``theta + m > pi`` the target
    falls back to ``cos(theta) - m * sin(m)``, which keeps it decreasing in m.
    CosFace targets use ``cos(theta) - m``.

    Raises:
        DimensionError: If embeddings are not ``(p, embedding_dim)``
        NumericError: On zero-norm or non-finite embeddings
        InputError: If a label falls outside ``[0, num_classes)``
    """
    if embeddings.dim() != 2 or embeddings.shape[1] != head.embedding_dim:
        raise DimensionError(
            f"expected embeddings of shape (p, {head.embedding_dim}), got {tuple(embeddings.shape)}"
        )
    labels = torch.as_tensor(labels, device=embeddings.device).long().reshape(-1)
    if labels.shape[0] != embeddings.shape[0]:
        raise DimensionError(f"{labels.shape[0]} labels for {embeddings.shape[0]} embeddings")
    if labels.numel() and (labels.min() < 0 or labels.max() >= head.num_classes):
        raise InputError(f"labels must lie in [0, {head.num_classes})")
    if not torch.isfinite(embeddings).all():
        raise NumericError("embeddings contain non-finite values")
    norms = embeddings.norm(dim=1)
    if (norms == 0).any():
        raise NumericError("zero-norm embedding cannot be normalized")

    cos = F.normalize(embeddings, dim=1) @ F.normalize(head.class_weights, dim=1).t()
    cos = cos.clamp(-1.0 + COS_EPS, 1.0 - COS_EPS)
    if head.margin == 0:
        return head.logit_scale * cos

    target_cos = cos.gather(1, labels[:, None]).squeeze(1)
    m = head.margin
    if head.variant == 'arcface':
        theta = torch.acos(target_cos)
        target = torch.where(theta + m > math.pi,
                             target_cos - m * math.sin(m),
                             torch.cos(theta + m))
    else:
        target = target_cos - m
    is_target = F.one_hot(labels, head.num_classes).bool()
    logits = torch.where(is_target, target[:, None], cos)
    return head.logit_scale * logits


def margin_loss(head: MarginHead, embeddings: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over margin logits."""
    logits = margin_logits(head, embeddings, labels)
    labels = torch.as_tensor(labels, device=embeddings.device).long().reshape(-1)
    return F.cross_entropy(logits, labels)


@dataclass(frozen=True)
class LossConfig:
    variant: str = 'arcface'
    margin: Optional[float] = None
    logit_scale: float = DEFAULT_LOGIT_SCALE

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"loss variant must be one of {list(VARIANTS)}, got '{self.variant}'")


def build_head(num_classes: int, embedding_dim: int, config: Optional[LossConfig] = None, seed: int = 0) -> MarginHead:
    config = config or LossConfig()
    return MarginHead(num_classes, embedding_dim, variant=config.variant, margin=config.margin,
                      logit_scale=config.logit_scale, seed=seed)

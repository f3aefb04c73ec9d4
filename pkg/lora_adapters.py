"""Low-rank adapters and the quality-blended twin linear layer.

An adapter adds ``scale * W_up @ W_dw`` in parallel to a frozen dense weight.
``TwinAdaptedLinear`` carries two of them and mixes them per sample:

    out_i = W0 x_i + b + alpha_i * delta_hi(x_i) + (1 - alpha_i) * delta_lo(x_i)

``alpha`` close to 1 means a high-quality input, so ``adapter_hi`` dominates.
"""
from typing import Optional, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from errors import ConfigurationError, DimensionError, GatingError

ALPHA_TOLERANCE = 1e-6
DEFAULT_DROPOUT = 0.1


def _check_adapter_args(m: int, n: int, rank: int, scale: float, dropout_rate: float):
    if not isinstance(m, int) or not isinstance(n, int) or m < 1 or n < 1:
        raise ConfigurationError(f"adapter dimensions must be positive integers, got m={m}, n={n}")
    if not isinstance(rank, int) or rank < 1 or rank > min(m, n):
        raise ConfigurationError(f"rank must lie in [1, {min(m, n)}] for a {m}x{n} layer, got {rank}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigurationError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
    if scale < 0:
        raise ConfigurationError(f"scale must be nonnegative, got {scale}")


class LowRankAdapter(nn.Module):
    """One ``W_up @ W_dw`` factor pair.

    ``down_weights`` is ``rank x in_features`` and ``up_weights`` is
    ``out_features x rank``. Adapters carry no bias.
    """

    def __init__(self, out_features: int, in_features: int, rank: int,
                 scale: float = 1.0, dropout_rate: float = DEFAULT_DROPOUT,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        _check_adapter_args(out_features, in_features, rank, scale, dropout_rate)
        self.out_features = out_features
        self.in_features = in_features
        self.rank = rank
        self.scale = float(scale)
        self.dropout_rate = float(dropout_rate)
        self.down_weights = nn.Parameter(torch.zeros(rank, in_features, dtype=dtype))
        self.up_weights = nn.Parameter(torch.zeros(out_features, rank, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return adapter_delta(self, x, self.training)

    def extra_repr(self) -> str:
        return (f"in_features={self.in_features}, out_features={self.out_features}, "
                f"rank={self.rank}, scale={self.scale}, dropout_rate={self.dropout_rate}")


def init_adapter(m: int, n: int, rank: int, scale: float = 1.0,
                 dropout_rate: float = DEFAULT_DROPOUT, seed: Optional[int] = None,
                 generator: Optional[torch.Generator] = None,
                 dtype: torch.dtype = torch.float32) -> LowRankAdapter:
    """
    Create an adapter for an ``m x n`` layer.

    ``up_weights`` start at exactly zero, so the adapter contributes nothing
    until trained. ``down_weights`` are drawn from N(0, (1/rank)^2).

    Args:
        m: Output width of the adapted layer
        n: Input width of the adapted layer
        rank: Bottleneck dimension, 1 <= rank <= min(m, n)
        scale: Constant multiplier on the adapter path
        dropout_rate: Dropout applied to the adapter output while training
        seed: Seed for the Gaussian draw (ignored when ``generator`` is given)
        generator: Explicit torch generator, consumed in place
        dtype: Parameter dtype

    Returns:
        A freshly initialized LowRankAdapter

    Raises:
        ConfigurationError: If the rank, dimensions or dropout rate are out of range
    """
    adapter = LowRankAdapter(m, n, rank, scale=scale, dropout_rate=dropout_rate, dtype=dtype)
    if generator is None:
        generator = torch.Generator()
        generator.manual_seed(0 if seed is None else int(seed))
    with torch.no_grad():
        draw = torch.randn(rank, n, generator=generator, dtype=torch.float64) / rank
        adapter.down_weights.copy_(draw.to(dtype))
        adapter.up_weights.zero_()
    return adapter


def adapter_delta(adapter: LowRankAdapter, x: torch.Tensor, training: bool = False) -> torch.Tensor:
    """Return ``scale * W_up (W_dw x)``; dropout hits the adapter output only when training."""
    if x.shape[-1] != adapter.in_features:
        raise DimensionError(
            f"adapter expects input width {adapter.in_features}, got {x.shape[-1]}"
        )
    out = F.linear(F.linear(x, adapter.down_weights), adapter.up_weights)
    if training and adapter.dropout_rate > 0:
        out = F.dropout(out, p=adapter.dropout_rate, training=True)
    return adapter.scale * out


class TwinAdaptedLinear(nn.Module):
    """Frozen ``nn.Linear`` plus a high-quality and a low-quality adapter.

    With ``adapter_lo=None`` the layer is a classical single LoRA layer and
    ignores alpha.
    """

    def __init__(self, base: nn.Linear, adapter_hi: LowRankAdapter,
                 adapter_lo: Optional[LowRankAdapter] = None):
        super().__init__()
        for adapter in (adapter_hi, adapter_lo):
            if adapter is None:
                continue
            if (adapter.out_features, adapter.in_features) != tuple(base.weight.shape):
                raise DimensionError(
                    f"adapter shape {(adapter.out_features, adapter.in_features)} does not "
                    f"match base weight {tuple(base.weight.shape)}"
                )
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.adapter_hi = adapter_hi
        self.adapter_lo = adapter_lo

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    @property
    def is_twin(self) -> bool:
        return self.adapter_lo is not None

    def forward(self, x: torch.Tensor, alpha: Optional[torch.Tensor] = None) -> torch.Tensor:
        return twin_forward(self, x, alpha, self.training)


def _prepare_alpha(alpha, x: torch.Tensor) -> torch.Tensor:
    alpha = torch.as_tensor(alpha, dtype=x.dtype, device=x.device)
    if alpha.dim() != 1 or alpha.shape[0] != x.shape[0]:
        raise DimensionError(
            f"alpha must be a vector of length {x.shape[0]}, got shape {tuple(alpha.shape)}"
        )
    if not torch.isfinite(alpha).all():
        raise GatingError("alpha contains non-finite values")
    if (alpha < -ALPHA_TOLERANCE).any() or (alpha > 1 + ALPHA_TOLERANCE).any():
        raise GatingError(
            f"alpha outside [0, 1]: min={alpha.min().item():.6g}, max={alpha.max().item():.6g}"
        )
    alpha = alpha.clamp(0.0, 1.0)
    # per-sample weight broadcast over every non-batch axis
    return alpha.reshape(x.shape[0], *([1] * (x.dim() - 1)))


def twin_forward(layer: TwinAdaptedLinear, x: torch.Tensor,
                 alpha: Optional[torch.Tensor] = None, training: bool = False) -> torch.Tensor:
    """
    Blended forward of a twin-adapted layer.

    Args:
        layer: The adapted layer
        x: Input of shape ``(p, ..., n)``
        alpha: Per-sample blend weights of length ``p``; weight of ``adapter_hi``
        training: Enables adapter dropout

    Returns:
        Tensor of shape ``(p, ..., m)``

    Raises:
        DimensionError: On width or alpha length mismatch
        GatingError: If alpha is missing for a twin layer or exceeds [0, 1] beyond tolerance
    """
    if x.shape[-1] != layer.in_features:
        raise DimensionError(f"layer expects input width {layer.in_features}, got {x.shape[-1]}")
    out = layer.base(x)
    delta_hi = adapter_delta(layer.adapter_hi, x, training)
    if layer.adapter_lo is None:
        return out + delta_hi
    if alpha is None:
        raise GatingError("twin adapters need a per-sample alpha")
    weight = _prepare_alpha(alpha, x)
    delta_lo = adapter_delta(layer.adapter_lo, x, training)
    return out + weight * delta_hi + (1 - weight) * delta_lo


def apply_linear(layer: nn.Module, x: torch.Tensor, alpha: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Call a linear site, handing alpha to it only when it is adapted."""
    if isinstance(layer, TwinAdaptedLinear):
        return layer(x, alpha)
    return layer(x)


def count_trainable(model: Union[nn.Module, Tuple[nn.Module, ...]]) -> Tuple[int, int]:
    """Return ``(total_params, trainable_params)`` over unique parameters."""
    modules = model if isinstance(model, tuple) else (model,)
    seen = set()
    total = 0
    trainable = 0
    for module in modules:
        for p in module.parameters():
            if id(p) in seen:
                continue
            seen.add(id(p))
            total += p.numel()
            if p.requires_grad:
                trainable += p.numel()
    return total, trainable

"""Small ViT-style image encoder used as the adaptable backbone.

Every linear sublayer has a stable dotted id (``blocks.0.attn.qkv``,
``reductions.0.reduce``, ``head``...) and is invoked through
``apply_linear`` so a per-sample alpha reaches adapted layers.
"""
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import torch
import torch.nn.functional as F
from torch import nn

from errors import ConfigurationError, CorruptCheckpointError, DimensionError
from lora_adapters import apply_linear


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    channels: int = 1
    patch_size: int = 8
    embed_dim: int = 96
    attention_dim: int = 32
    num_heads: int = 2
    mlp_ratio: float = 2.0
    depth: int = 2
    embedding_dim: int = 128
    patch_reduction: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}"
            )
        if self.attention_dim % self.num_heads:
            raise ConfigurationError("attention_dim must be divisible by num_heads")
        if self.depth < 1:
            raise ConfigurationError("depth must be at least 1")
        if self.patch_reduction and self.num_tokens % (2 ** (self.depth - 1)):
            raise ConfigurationError(
                f"{self.num_tokens} tokens cannot be halved {self.depth - 1} times"
            )

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def mlp_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self):
        return asdict(self)


class Attention(nn.Module):
    def __init__(self, dim: int, attention_dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = attention_dim // num_heads
        self.qkv = nn.Linear(dim, 3 * attention_dim)
        self.proj = nn.Linear(attention_dim, dim)

    def forward(self, x: torch.Tensor, alpha: Optional[torch.Tensor] = None) -> torch.Tensor:
        batch, tokens, _ = x.shape
        qkv = apply_linear(self.qkv, x, alpha)
        qkv = qkv.reshape(batch, tokens, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(batch, tokens, self.num_heads * self.head_dim)
        return apply_linear(self.proj, out, alpha)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x: torch.Tensor, alpha: Optional[torch.Tensor] = None) -> torch.Tensor:
        return apply_linear(self.fc2, self.act(apply_linear(self.fc1, x, alpha)), alpha)


class Block(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(config.embed_dim)
        self.attn = Attention(config.embed_dim, config.attention_dim, config.num_heads)
        self.norm2 = nn.LayerNorm(config.embed_dim)
        self.mlp = Mlp(config.embed_dim, config.mlp_dim)

    def forward(self, x: torch.Tensor, alpha: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), alpha)
        return x + self.mlp(self.norm2(x), alpha)


class PatchReduction(nn.Module):
    """Merges adjacent token pairs, halving the sequence length."""

    def __init__(self, dim: int):
        super().__init__()
        self.reduce = nn.Linear(2 * dim, dim)

    def forward(self, x: torch.Tensor, alpha: Optional[torch.Tensor] = None) -> torch.Tensor:
        batch, tokens, dim = x.shape
        return apply_linear(self.reduce, x.reshape(batch, tokens // 2, 2 * dim), alpha)


class ToyBackbone(nn.Module):
    def __init__(self, config: Optional[BackboneConfig] = None):
        super().__init__()
        self.config = config or BackboneConfig()
        c = self.config
        self.patch_embed = nn.Conv2d(c.channels, c.embed_dim, kernel_size=c.patch_size, stride=c.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, c.num_tokens, c.embed_dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList([Block(c) for _ in range(c.depth)])
        if c.patch_reduction:
            self.reductions = nn.ModuleList([PatchReduction(c.embed_dim) for _ in range(c.depth - 1)])
        else:
            self.reductions = nn.ModuleList()
        self.norm = nn.LayerNorm(c.embed_dim)
        self.head = nn.Linear(c.embed_dim, c.embedding_dim)

    def forward(self, images: torch.Tensor, alpha: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Map ``(B, C, H, W)`` images in [0, 1] to ``(B, embedding_dim)`` features."""
        c = self.config
        if images.dim() != 4 or tuple(images.shape[1:]) != (c.channels, c.image_size, c.image_size):
            raise DimensionError(
                f"expected images of shape (B, {c.channels}, {c.image_size}, {c.image_size}), "
                f"got {tuple(images.shape)}"
            )
        x = self.patch_embed((images - 0.5) / 0.5)
        x = x.flatten(2).transpose(1, 2) + self.pos_embed
        for i, block in enumerate(self.blocks):
            x = block(x, alpha)
            if i < len(self.reductions):
                x = self.reductions[i](x, alpha)
        x = self.norm(x).mean(dim=1)
        return apply_linear(self.head, x, alpha)


def build_backbone(config: Optional[BackboneConfig] = None, seed: int = 0) -> ToyBackbone:
    """Construct a backbone whose weights depend only on ``(config, seed)``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ToyBackbone(config or BackboneConfig())


def save_backbone(path: Union[str, Path], backbone: ToyBackbone) -> Path:
    path = Path(path)
    torch.save({'config': backbone.config.to_dict(), 'state_dict': backbone.state_dict()}, path)
    return path


def load_backbone(path: Union[str, Path]) -> ToyBackbone:
    path = Path(path)
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
        backbone = ToyBackbone(BackboneConfig(**payload['config']))
        backbone.load_state_dict(payload['state_dict'])
    except FileNotFoundError:
        raise
    except (KeyError, TypeError, RuntimeError) as e:
        raise CorruptCheckpointError(f"cannot load backbone from {path}: {str(e)}") from e
    return backbone

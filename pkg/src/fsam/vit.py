"""Minimal ViT-style encoder with pluggable Q/K/V projections.

All base parameters are frozen at construction; adaptation modules
(see fsam.lora, fsam.freq_adapter) carry the trainable state.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


def component_seed(base_seed: int, name: str) -> int:
    """Stable per-component seed so init draws are independent of build order."""
    digest = hashlib.blake2s(f"{base_seed}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % (2**63)


def trunc_normal_(tensor: torch.Tensor, std: float, generator: torch.Generator) -> torch.Tensor:
    """Truncated normal init on [-2*std, 2*std] via the inverse-CDF trick."""
    with torch.no_grad():
        lo = 0.5 * (1 + math.erf(-2 / math.sqrt(2)))
        hi = 0.5 * (1 + math.erf(2 / math.sqrt(2)))
        tensor.uniform_(2 * lo - 1, 2 * hi - 1, generator=generator)
        tensor.erfinv_()
        tensor.mul_(std * math.sqrt(2.0))
        tensor.clamp_(-2 * std, 2 * std)
    return tensor


@dataclass
class ViTConfig:
    image_size: int
    patch_size: int
    embed_dim: int
    depth: int
    heads: int
    mlp_ratio: float = 4.0
    in_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size**2


def patchify(x: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, T, patch_size * patch_size * C), non-overlapping."""
    b, c, h, w = x.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"input {h}x{w} not divisible by patch size {p}")
    rows, cols = h // p, w // p
    x = x.reshape(b, c, rows, p, cols, p)
    x = x.permute(0, 2, 4, 3, 5, 1)  # B, rows, cols, p, p, C
    return x.reshape(b, rows * cols, p * p * c)


class PatchEmbed(nn.Module):
    """Flatten non-overlapping patches, project linearly, add positions."""

    def __init__(self, config: ViTConfig, seed: int, trainable: bool):
        super().__init__()
        d = config.embed_dim
        patch_dim = config.patch_size**2 * config.in_channels
        g = torch.Generator().manual_seed(seed)
        self.patch_size = config.patch_size
        self.image_size = config.image_size
        self.weight = nn.Parameter(trunc_normal_(torch.empty(patch_dim, d), 0.02, g))
        self.bias = nn.Parameter(torch.zeros(d))
        self.pos = nn.Parameter(trunc_normal_(torch.empty(config.num_tokens, d), 0.02, g))
        for p in self.parameters():
            p.requires_grad_(trainable)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.image_size or x.shape[-2] != self.image_size:
            raise ValueError(
                f"expected {self.image_size}x{self.image_size} input, got {tuple(x.shape[-2:])}"
            )
        return patchify(x, self.patch_size) @ self.weight + self.bias + self.pos


class FrozenLinear(nn.Module):
    """x @ W with a frozen d x d matrix, row-vector convention."""

    def __init__(self, weight: nn.Parameter):
        super().__init__()
        self.weight = weight

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.weight


def attention_forward(tokens, w_o, q_proj, k_proj, v_proj, heads):
    """Multi-head softmax attention with injected Q/K/V projections."""
    b, t, d = tokens.shape
    if d % heads:
        raise ValueError("token width not divisible by head count")
    dh = d // heads
    q = q_proj(tokens).reshape(b, t, heads, dh).transpose(1, 2)
    k = k_proj(tokens).reshape(b, t, heads, dh).transpose(1, 2)
    v = v_proj(tokens).reshape(b, t, heads, dh).transpose(1, 2)
    attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
    out = (attn @ v).transpose(1, 2).reshape(b, t, d)
    return out @ w_o


class Attention(nn.Module):
    """Frozen base Q/K/V/O matrices; q_proj/k_proj/v_proj are replaceable."""

    def __init__(self, d: int, heads: int, seed: int):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.heads = heads
        self.w_q = nn.Parameter(trunc_normal_(torch.empty(d, d), 0.02, g), requires_grad=False)
        self.w_k = nn.Parameter(trunc_normal_(torch.empty(d, d), 0.02, g), requires_grad=False)
        self.w_v = nn.Parameter(trunc_normal_(torch.empty(d, d), 0.02, g), requires_grad=False)
        self.w_o = nn.Parameter(trunc_normal_(torch.empty(d, d), 0.02, g), requires_grad=False)
        self.q_proj = FrozenLinear(self.w_q)
        self.k_proj = FrozenLinear(self.w_k)
        self.v_proj = FrozenLinear(self.w_v)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return attention_forward(
            tokens, self.w_o, self.q_proj, self.k_proj, self.v_proj, self.heads
        )


class Mlp(nn.Module):
    def __init__(self, d: int, hidden: int, seed: int):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d)
        trunc_normal_(self.fc1.weight, 0.02, g)
        trunc_normal_(self.fc2.weight, 0.02, g)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.bias)
        self.act = nn.GELU()

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block: LN -> attention -> residual; LN -> MLP -> residual."""

    def __init__(self, config: ViTConfig, seed: int):
        super().__init__()
        d = config.embed_dim
        self.norm1 = nn.LayerNorm(d)
        self.attn = Attention(d, config.heads, seed)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = Mlp(d, int(d * config.mlp_ratio), seed + 1)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        tokens = tokens + self.attn(self.norm1(tokens))
        tokens = tokens + self.mlp(self.norm2(tokens))
        return tokens


class Encoder(nn.Module):
    """Spatial pathway: patch embedding plus a stack of frozen blocks."""

    def __init__(self, config: ViTConfig):
        super().__init__()
        self.config = config
        self.patch_embed = PatchEmbed(
            config, component_seed(config.seed, "spatial_embed"), trainable=False
        )
        self.blocks = nn.ModuleList(
            Block(config, component_seed(config.seed, f"block{i}"))
            for i in range(config.depth)
        )

    def block_forward(self, tokens: torch.Tensor, block_index: int) -> torch.Tensor:
        if not 0 <= block_index < len(self.blocks):
            raise IndexError(f"block index {block_index} out of range")
        return self.blocks[block_index](tokens)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.patch_embed(x)
        for block in self.blocks:
            tokens = block(tokens)
        return tokens

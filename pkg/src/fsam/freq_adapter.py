"""Bottleneck adapters over frequency-domain token embeddings.

Each encoder block gets one adapter; all adapters consume the same shared
frequency embedding, and their outputs are added to the block outputs.
The up-projection is zero-initialized so the whole pathway is a no-op at
the start of training.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from . import spectral
from .vit import PatchEmbed, ViTConfig, component_seed, trunc_normal_


class FrequencyAdapter(nn.Module):
    """Linear down-projection -> GELU -> linear up-projection, shape-preserving."""

    def __init__(self, d: int, d_mid: int, seed: int):
        super().__init__()
        if not 1 <= d_mid < d:
            raise ValueError(f"bottleneck width must satisfy 1 <= d_mid < d, got {d_mid}")
        g = torch.Generator().manual_seed(seed)
        self.down = nn.Linear(d, d_mid)
        self.up = nn.Linear(d_mid, d)
        trunc_normal_(self.down.weight, 0.02, g)
        nn.init.zeros_(self.down.bias)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)
        self.act = nn.GELU()

    def forward(self, freq_tokens: torch.Tensor) -> torch.Tensor:
        return self.up(self.act(self.down(freq_tokens)))


def build_adapter_stack(config: ViTConfig, d_mid: int) -> nn.ModuleList:
    """One adapter per encoder block."""
    return nn.ModuleList(
        FrequencyAdapter(config.embed_dim, d_mid, component_seed(config.seed, f"adapter{i}"))
        for i in range(config.depth)
    )


def fuse(vit_out: torch.Tensor, adapter_out: torch.Tensor) -> torch.Tensor:
    """Combine a block output with its adapter output (elementwise sum)."""
    if vit_out.shape != adapter_out.shape:
        raise ValueError(f"shape mismatch {tuple(vit_out.shape)} vs {tuple(adapter_out.shape)}")
    return vit_out + adapter_out


def build_freq_embed(config: ViTConfig) -> PatchEmbed:
    """Trainable patch embedding dedicated to the frequency pathway."""
    return PatchEmbed(config, component_seed(config.seed, "freq_embed"), trainable=True)


def frequency_input(images: torch.Tensor) -> torch.Tensor:
    """Batched image tensor (B, C, H, W) -> normalized amplitude tensor, same shape.

    Runs the numpy transform chain per image; there are no parameters
    upstream of the result, so the break in the autograd graph is harmless.
    """
    out = np.empty(images.shape, dtype=np.float64)
    arr = images.detach().cpu().numpy()
    for i in range(arr.shape[0]):
        hwc = np.moveaxis(arr[i], 0, -1)
        fin = spectral.amplitude_preprocess(spectral.amplitude(spectral.fft2(hwc)))
        out[i] = np.moveaxis(fin.values, -1, 0)
    return torch.from_numpy(out).to(images.dtype)


def frequency_pathway(images: torch.Tensor, freq_embed: PatchEmbed) -> torch.Tensor:
    """fft2 -> amplitude -> preprocess -> patch embed; the shared frequency embedding."""
    return freq_embed(frequency_input(images))

"""Automated dense-prompt generation from a trainable prototype memory bank.

Pipeline per image: pooled instance prototype -> cosine retrieval over the
bank -> softmax-weighted aggregation into a refined prototype -> cosine
activation map over the encoder tokens -> 1x1-conv prompt head over the
concatenated (refined prototype, embedding, activation) channels.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .vit import trunc_normal_


class ZeroNormError(ValueError):
    pass


def instance_prototype(e: torch.Tensor) -> torch.Tensor:
    """(B, T, C) -> (B, C): global average pooling plus global max pooling."""
    if e.numel() == 0 or e.shape[1] == 0:
        raise ValueError("empty token grid")
    return e.mean(dim=1) + e.max(dim=1).values


def similarity(p: torch.Tensor, bank: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity of prototypes (B, C) against the bank (N, C)."""
    p_norm = p.norm(dim=-1, keepdim=True)
    m_norm = bank.norm(dim=-1)
    if (p_norm == 0).any():
        raise ZeroNormError("instance prototype has zero norm")
    if (m_norm == 0).any():
        raise ZeroNormError("memory bank contains a zero row")
    return (p @ bank.T) / (p_norm * m_norm)


def refine(s: torch.Tensor, bank: torch.Tensor):
    """Softmax the similarities and aggregate bank rows.

    Returns (refined prototype (B, C), alpha (B, N)).
    """
    alpha = torch.softmax(s, dim=-1)
    return alpha @ bank, alpha


def activation_map(p_hat: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    """Per-token cosine similarity with the refined prototype: (B, T) in [-1, 1].

    Zero-norm tokens map to 0.
    """
    p_norm = p_hat.norm(dim=-1, keepdim=True)
    if (p_norm == 0).any():
        raise ZeroNormError("refined prototype has zero norm")
    e_norm = e.norm(dim=-1)
    dots = (e @ p_hat.unsqueeze(-1)).squeeze(-1)
    safe = torch.where(e_norm == 0, torch.ones_like(e_norm), e_norm)
    cos = dots / (safe * p_norm)
    return torch.where(e_norm == 0, torch.zeros_like(cos), cos)


def init_memory_bank(n: int, c: int, seed: int) -> torch.Tensor:
    """N x C Gaussian rows; rows with near-zero norm are redrawn."""
    if n < 1:
        raise ValueError("bank needs at least one prototype")
    g = torch.Generator().manual_seed(seed)
    std = 1.0 / c**0.5
    bank = torch.empty(n, c).normal_(0.0, std, generator=g)
    for _ in range(100):
        bad = bank.norm(dim=-1) < 1e-3
        if not bad.any():
            break
        bank[bad] = torch.empty(int(bad.sum()), c).normal_(0.0, std, generator=g)
    return bank


class PromptGenerator(nn.Module):
    """Memory bank plus the 1x1-conv prompt head (2C+1 -> C channels)."""

    def __init__(self, bank_size: int, channels: int, seed: int):
        super().__init__()
        self.bank = nn.Parameter(init_memory_bank(bank_size, channels, seed))
        self.head = nn.Conv2d(2 * channels + 1, channels, kernel_size=1)
        g = torch.Generator().manual_seed(seed + 1)
        trunc_normal_(self.head.weight, 0.02, g)
        nn.init.zeros_(self.head.bias)

    def forward(self, e: torch.Tensor, rows: int, cols: int) -> torch.Tensor:
        """Encoder tokens (B, T, C) -> dense prompt (B, C, rows, cols)."""
        b, t, c = e.shape
        if t != rows * cols:
            raise ValueError(f"token count {t} does not match {rows}x{cols} grid")
        p = instance_prototype(e)
        p_hat, _alpha = refine(similarity(p, self.bank), self.bank)
        a = activation_map(p_hat, e)
        e_grid = e.transpose(1, 2).reshape(b, c, rows, cols)
        p_grid = p_hat.reshape(b, c, 1, 1).expand(b, c, rows, cols)
        a_grid = a.reshape(b, 1, rows, cols)
        return self.head(torch.cat([p_grid, e_grid, a_grid], dim=1))

    def inspect(self, e: torch.Tensor, rows: int, cols: int) -> dict:
        """Intermediate quantities for the inspection CLI."""
        p = instance_prototype(e)
        s = similarity(p, self.bank)
        p_hat, alpha = refine(s, self.bank)
        a = activation_map(p_hat, e)
        return {
            "alpha": alpha,
            "similarity": s,
            "p_hat_norm": p_hat.norm(dim=-1),
            "activation": a.reshape(-1, rows, cols),
        }

"""Low-rank updates for frozen attention projections, plus parameter auditing.

A frozen projection W gains a trainable update delta_W = A @ B applied in
factored order, so the effective weight is W + scaling * A @ B without ever
materializing the product in the forward path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .vit import Attention, component_seed


class InvalidRankError(ValueError):
    pass


class UnregisteredParameterError(RuntimeError):
    pass


class LoRAFactor(nn.Module):
    """A: d x r Gaussian-initialized, B: r x d zero-initialized, so AB = 0 at start."""

    def __init__(self, d: int, r: int, seed: int, scaling: float = 1.0):
        super().__init__()
        if not 1 <= r <= d:
            raise InvalidRankError(f"rank must satisfy 1 <= r <= d, got r={r}, d={d}")
        g = torch.Generator().manual_seed(seed)
        a = torch.empty(d, r)
        with torch.no_grad():
            a.normal_(0.0, 1.0 / r**0.5, generator=g)
        self.A = nn.Parameter(a)
        self.B = nn.Parameter(torch.zeros(r, d))
        self.rank = r
        self.scaling = scaling

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.scaling * ((x @ self.A) @ self.B)


class AdaptedProjection(nn.Module):
    """x @ W + scaling * (x @ A) @ B over a frozen base matrix W."""

    def __init__(self, base: nn.Parameter, factor: LoRAFactor):
        super().__init__()
        if base.requires_grad:
            raise ValueError("base projection must be frozen")
        self.base = base
        self.factor = factor

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.base.shape[0]:
            raise ValueError(
                f"input width {x.shape[-1]} does not match projection dim {self.base.shape[0]}"
            )
        return x @ self.base + self.factor(x)


def wrap_attention(attn: Attention, r: int, seed: int):
    """Attach independent LoRA factors to the Q, K, V projections in place.

    W_O stays frozen and unadapted. Returns the three adapted projections.
    """
    d = attn.w_q.shape[0]
    attn.q_proj = AdaptedProjection(attn.w_q, LoRAFactor(d, r, component_seed(seed, "q")))
    attn.k_proj = AdaptedProjection(attn.w_k, LoRAFactor(d, r, component_seed(seed, "k")))
    attn.v_proj = AdaptedProjection(attn.w_v, LoRAFactor(d, r, component_seed(seed, "v")))
    return attn.q_proj, attn.k_proj, attn.v_proj


# name prefix/pattern -> trainable group, checked in order
_TRAINABLE_GROUPS = (
    ("lora", lambda n: ".factor." in n),
    ("freq_adapter", lambda n: n.startswith("freq_adapters.")),
    ("freq_embed", lambda n: n.startswith("freq_embed.")),
    ("memory_bank", lambda n: n.startswith("prompt_gen.bank")),
    ("prompt_head", lambda n: n.startswith("prompt_gen.head.")),
    ("decoder", lambda n: n.startswith("decoder.")),
)

@dataclass
class ParameterAudit:
    frozen: dict = field(default_factory=dict)  # name -> shape
    trainable: dict = field(default_factory=dict)  # group -> {name -> shape}

    @property
    def frozen_count(self) -> int:
        return sum(math.prod(s) for s in self.frozen.values())

    @property
    def trainable_count(self) -> int:
        return sum(
            math.prod(s) for group in self.trainable.values() for s in group.values()
        )

    def group_count(self, group: str) -> int:
        return sum(
            math.prod(s) for s in self.trainable[group].values()
        )

    def report(self) -> str:
        lines = ["parameter audit", f"frozen tensors: {len(self.frozen)} ({self.frozen_count} values)"]
        for name, shape in sorted(self.frozen.items()):
            lines.append(f"  frozen {name} {list(shape)}")
        for group in sorted(self.trainable):
            lines.append(f"trainable group {group}: {self.group_count(group)} values")
            for name, shape in sorted(self.trainable[group].items()):
                lines.append(f"  {group} {name} {list(shape)}")
        lines.append(f"total trainable: {self.trainable_count}")
        return "\n".join(lines)


def audit_parameters(model: nn.Module) -> ParameterAudit:
    """Partition every parameter into {frozen base} or a named trainable group."""
    audit = ParameterAudit()
    for name, p in model.named_parameters():
        if p.requires_grad:
            for group, match in _TRAINABLE_GROUPS:
                if match(name):
                    audit.trainable.setdefault(group, {})[name] = tuple(p.shape)
                    break
            else:
                raise UnregisteredParameterError(
                    f"trainable parameter {name!r} belongs to no known group"
                )
        else:
            if ".factor." in name:
                raise UnregisteredParameterError(f"LoRA factor {name!r} is unexpectedly frozen")
            audit.frozen[name] = tuple(p.shape)
    return audit


def trainable_parameters(model: nn.Module):
    return [p for p in model.parameters() if p.requires_grad]

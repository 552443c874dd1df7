"""Full network assembly (spatial pathway with LoRA, frequency pathway with
adapters, prompt generator, mask decoder), the hybrid training objective,
and the AdamW training loop with warm-up and polynomial decay.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import data, freq_adapter, lora
from .checkpoint import Checkpoint, save_checkpoint
from .vit import Block, PatchEmbed, ViTConfig, component_seed, trunc_normal_
from .prompt_gen import PromptGenerator

DICE_SMOOTH = 1e-5


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class FSAMConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 16
    depth: int = 2
    heads: int = 2
    mlp_ratio: float = 4.0
    in_channels: int = 1
    lora_rank: int = 4
    adapter_mid: int = 4
    bank_size: int = 8
    num_classes: int = 2
    loss_lambda: float = 0.8
    lr: float = 5e-4
    weight_decay: float = 0.1
    warmup_steps: int = 25
    max_epochs: int = 200
    early_stop_epoch: int = 160
    batch_size: int = 8
    seed: int = 0
    enable_lora: bool = True
    enable_freq: bool = True

    def __post_init__(self):
        if not 0.0 <= self.loss_lambda <= 1.0:
            raise ValueError("loss_lambda must be in [0, 1]")
        if self.early_stop_epoch > self.max_epochs:
            raise ValueError("early_stop_epoch must not exceed max_epochs")
        if self.lora_rank > self.embed_dim:
            raise ValueError("lora_rank must not exceed embed_dim")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")

    @property
    def vit(self) -> ViTConfig:
        return ViTConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            depth=self.depth,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            in_channels=self.in_channels,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FSAMConfig":
        return cls(**d)


class MaskDecoder(nn.Module):
    """Lightweight stand-in decoder: two conv+GELU stages over the
    concatenated (embedding, prompt) grid, bilinear upsample, 1x1 head."""

    def __init__(self, channels: int, num_classes: int, patch_size: int, seed: int):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.patch_size = patch_size
        self.conv1 = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.head = nn.Conv2d(channels, num_classes, 1)
        for conv in (self.conv1, self.conv2, self.head):
            trunc_normal_(conv.weight, 0.02, g)
            nn.init.zeros_(conv.bias)
        self.act = nn.GELU()

    def forward(self, e_grid: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        if e_grid.shape != prompt.shape:
            raise ValueError("embedding and prompt grids must be spatially aligned")
        h = self.act(self.conv1(torch.cat([e_grid, prompt], dim=1)))
        h = self.act(self.conv2(h))
        h = F.interpolate(h, scale_factor=self.patch_size, mode="bilinear", align_corners=False)
        return self.head(h)


class FSAMModel(nn.Module):
    def __init__(self, config: FSAMConfig):
        super().__init__()
        self.config = config
        vit_cfg = config.vit
        self.spatial_embed = PatchEmbed(
            vit_cfg, component_seed(config.seed, "spatial_embed"), trainable=False
        )
        self.blocks = nn.ModuleList(
            Block(vit_cfg, component_seed(config.seed, f"block{i}"))
            for i in range(config.depth)
        )
        if config.enable_lora:
            for i, block in enumerate(self.blocks):
                lora.wrap_attention(
                    block.attn, config.lora_rank, component_seed(config.seed, f"lora{i}")
                )
        if config.enable_freq:
            self.freq_embed = freq_adapter.build_freq_embed(vit_cfg)
            self.freq_adapters = freq_adapter.build_adapter_stack(vit_cfg, config.adapter_mid)
        self.prompt_gen = PromptGenerator(
            config.bank_size, config.embed_dim, component_seed(config.seed, "prompt")
        )
        self.decoder = MaskDecoder(
            config.embed_dim,
            config.num_classes,
            config.patch_size,
            component_seed(config.seed, "decoder"),
        )

    @property
    def grid_size(self) -> int:
        return self.config.image_size // self.config.patch_size

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        tokens = self.spatial_embed(images)
        if self.config.enable_freq:
            freq_tokens = freq_adapter.frequency_pathway(images, self.freq_embed)
        for i, block in enumerate(self.blocks):
            tokens = block(tokens)
            if self.config.enable_freq:
                tokens = freq_adapter.fuse(tokens, self.freq_adapters[i](freq_tokens))
        return tokens

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) images -> (B, K, H, W) mask logits."""
        e = self.encode(images)
        g = self.grid_size
        prompt = self.prompt_gen(e, g, g)
        e_grid = e.transpose(1, 2).reshape(e.shape[0], e.shape[2], g, g)
        return self.decoder(e_grid, prompt)

    @torch.no_grad()
    def predict(self, images: torch.Tensor) -> torch.Tensor:
        return self(images).argmax(dim=1)


def build(config: FSAMConfig) -> FSAMModel:
    model = FSAMModel(config)
    lora.audit_parameters(model)  # raises if the partition is malformed
    return model


# ---------------------------------------------------------------------------
# Objective


def _check_labels(logits: torch.Tensor, gt: torch.Tensor) -> None:
    k = logits.shape[1]
    if logits.shape[0] != gt.shape[0] or logits.shape[2:] != gt.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} do not match labels {tuple(gt.shape)}")
    if gt.min() < 0 or gt.max() >= k:
        raise ValueError(f"labels must lie in [0, {k - 1}]")


def cross_entropy_loss(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _check_labels(logits, gt)
    return F.cross_entropy(logits, gt)


def dice_loss(logits: torch.Tensor, gt: torch.Tensor, eps: float = DICE_SMOOTH) -> torch.Tensor:
    """1 - soft Dice averaged over foreground classes, with smoothing eps."""
    _check_labels(logits, gt)
    probs = torch.softmax(logits, dim=1)
    k = logits.shape[1]
    scores = []
    for c in range(1, k):
        p = probs[:, c]
        g = (gt == c).to(probs.dtype)
        num = 2.0 * (p * g).sum() + eps
        den = p.sum() + g.sum() + eps
        scores.append(num / den)
    return 1.0 - torch.stack(scores).mean()


def hybrid_loss(logits: torch.Tensor, gt: torch.Tensor, lam: float) -> torch.Tensor:
    total, _, _ = hybrid_loss_components(logits, gt, lam)
    return total


def hybrid_loss_components(logits, gt, lam):
    """Returns (total, cross-entropy part, Dice part)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0, 1]")
    ce = cross_entropy_loss(logits, gt)
    dl = dice_loss(logits, gt)
    if lam == 0.0:
        return ce, ce, dl
    if lam == 1.0:
        return dl, ce, dl
    return (1.0 - lam) * ce + lam * dl, ce, dl


# ---------------------------------------------------------------------------
# Training


def lr_at_step(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warm-up to base_lr, then polynomial decay with exponent 0.9."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    frac = min(step / total_steps, 1.0) if total_steps > 0 else 1.0
    return base_lr * (1.0 - frac) ** 0.9


@dataclass
class FitResult:
    best_epoch: int
    best_val_dsc: float
    best_state: dict
    last_state: dict
    epochs_run: int
    history: list


def _state_snapshot(model: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def model_checkpoint(model: FSAMModel, epoch: int, best_val_dsc: float) -> Checkpoint:
    return Checkpoint(
        config=model.config.to_dict(),
        epoch=epoch,
        best_val_dsc=best_val_dsc,
        tensors=_state_snapshot(model),
        rng_state=bytes(torch.get_rng_state().numpy().tobytes()),
    )


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    g = torch.Generator().manual_seed(component_seed(seed, f"order{epoch}"))
    order = torch.randperm(n, generator=g).tolist()
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def evaluate_dsc(model: FSAMModel, samples: list) -> dict:
    """Mean per-class DSC of argmax predictions over (image, mask) tensor pairs."""
    k = model.config.num_classes
    per_class = {c: [] for c in range(1, k)}
    model.eval()
    with torch.no_grad():
        for img, mask in samples:
            pred = model.predict(img.unsqueeze(0))[0]
            for c in per_class:
                per_class[c].append(data.dice(pred.numpy(), mask.numpy(), c))
    return {c: float(torch.tensor(v).mean()) for c, v in per_class.items()}


def fit(
    model: FSAMModel,
    train_set: list,
    val_set: list,
    config: FSAMConfig,
    metrics_path=None,
    max_steps: int | None = None,
) -> FitResult:
    """Train the trainable partition with AdamW; keep the best-validation state.

    train_set / val_set: lists of (image (C, H, W) float tensor, mask (H, W)
    long tensor). Stops at early_stop_epoch (or max_steps, for smoke tests).
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    params = lora.trainable_parameters(model)
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    stop_epoch = min(config.early_stop_epoch, config.max_epochs)
    steps_per_epoch = max(1, (len(train_set) + config.batch_size - 1) // config.batch_size)
    total_steps = steps_per_epoch * stop_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)

    log_file = open(metrics_path, "w") if metrics_path else None
    history = []
    best = (-1.0, -1, None)  # (val dsc, epoch, state)
    step = 0
    epochs_run = 0
    try:
        for epoch in range(stop_epoch):
            model.train()
            for batch_idx in _batches(len(train_set), config.batch_size, config.seed, epoch):
                if max_steps is not None and step >= max_steps:
                    break
                imgs = torch.stack([train_set[i][0] for i in batch_idx])
                masks = torch.stack([train_set[i][1] for i in batch_idx])
                lr = lr_at_step(step, config.lr, config.warmup_steps, total_steps)
                for group in opt.param_groups:
                    group["lr"] = lr
                opt.zero_grad()
                total, ce, dl = hybrid_loss_components(
                    model(imgs), masks, config.loss_lambda
                )
                if not torch.isfinite(total):
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step} (epoch {epoch})"
                    )
                total.backward()
                opt.step()
                record = {
                    "step": step,
                    "epoch": epoch,
                    "train_loss": total.item(),
                    "ce": ce.item(),
                    "dice_loss": dl.item(),
                    "lr": lr,
                    "wall_time": time.time(),
                }
                history.append(record)
                if log_file:
                    log_file.write(json.dumps(record, sort_keys=True) + "\n")
                step += 1
            val_dsc = evaluate_dsc(model, val_set)
            mean_val = float(torch.tensor(list(val_dsc.values())).mean())
            record = {
                "step": step,
                "epoch": epoch,
                "val_dsc": {str(c): v for c, v in val_dsc.items()},
                "val_dsc_mean": mean_val,
                "wall_time": time.time(),
            }
            history.append(record)
            if log_file:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
            if mean_val > best[0]:
                best = (mean_val, epoch, _state_snapshot(model))
            epochs_run = epoch + 1
            if max_steps is not None and step >= max_steps:
                break
    finally:
        if log_file:
            log_file.close()
    best_dsc, best_epoch, best_state = best
    return FitResult(
        best_epoch=best_epoch,
        best_val_dsc=best_dsc,
        best_state=best_state if best_state is not None else _state_snapshot(model),
        last_state=_state_snapshot(model),
        epochs_run=epochs_run,
        history=history,
    )


def save_model(path, model: FSAMModel, epoch: int = 0, best_val_dsc: float = 0.0) -> None:
    save_checkpoint(path, model_checkpoint(model, epoch, best_val_dsc))


def load_model(ckpt: Checkpoint) -> FSAMModel:
    model = build(FSAMConfig.from_dict(ckpt.config))
    state = {k: v.to(next(iter(model.state_dict().values())).dtype) for k, v in ckpt.tensors.items()}
    model.load_state_dict(state)
    return model

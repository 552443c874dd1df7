"""Frequency-adapted segmentation encoder with LoRA and prototype prompts,
plus a single-source domain generalization training/evaluation harness."""

__version__ = "0.1.0"

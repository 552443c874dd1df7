"""Dataset ingestion, the synthetic multi-domain generator, the DSC metric,
and the leave-one-domain-out evaluation harness.

On-disk layout for real and synthetic corpora alike:

    root/<domain>/images/<stem>.<ext>
    root/<domain>/masks/<stem>.png      # integer-labeled masks
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import gaussian_filter

from . import spectral


class DatasetError(RuntimeError):
    pass


@dataclass
class SegSample:
    image_ref: Path
    mask_ref: Path
    domain_id: str


@dataclass
class DatasetManifest:
    domains: dict  # domain_id -> list[SegSample]
    unmatched: list = field(default_factory=list)  # files without a partner

    @property
    def domain_ids(self) -> list:
        return sorted(self.domains)


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    domains = {}
    unmatched = []
    for domain_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        img_dir, mask_dir = domain_dir / "images", domain_dir / "masks"
        if not img_dir.is_dir() or not mask_dir.is_dir():
            continue
        masks = {p.stem: p for p in mask_dir.iterdir() if p.is_file()}
        samples = []
        for img in sorted(img_dir.iterdir()):
            if not img.is_file():
                continue
            mask = masks.pop(img.stem, None)
            if mask is None:
                unmatched.append(img)
            else:
                samples.append(SegSample(img, mask, domain_dir.name))
        unmatched.extend(masks.values())
        if not samples:
            raise DatasetError(f"domain {domain_dir.name!r} has no matched image/mask pairs")
        domains[domain_dir.name] = samples
    if not domains:
        raise DatasetError(f"no domains found under {root}")
    return DatasetManifest(domains=domains, unmatched=sorted(unmatched))


def preprocess(sample: SegSample, target: int):
    """Decode and resize one sample: bilinear for the image, nearest for the mask.

    Returns (image H x W x C float in [0, 1], mask H x W int).
    """
    try:
        img = PILImage.open(sample.image_ref)
        img.load()
        mask = PILImage.open(sample.mask_ref)
        mask.load()
    except OSError as exc:
        raise DatasetError(f"cannot decode {sample.image_ref}: {exc}") from exc
    if img.size != (target, target):
        img = img.resize((target, target), PILImage.BILINEAR)
    if mask.size != (target, target):
        mask = mask.resize((target, target), PILImage.NEAREST)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr, np.asarray(mask, dtype=np.int64)


def split_source(samples: list, ratio: float, seed: int):
    """Deterministic shuffle, then split at ceil(ratio * n) into (train, val)."""
    if len(samples) < 2:
        raise DatasetError("need at least 2 samples to split")
    order = np.random.default_rng(seed).permutation(len(samples))
    cut = math.ceil(ratio * len(samples))
    train = [samples[i] for i in order[:cut]]
    val = [samples[i] for i in order[cut:]]
    return train, val


# ---------------------------------------------------------------------------
# Synthetic multi-domain corpus


@dataclass
class SyntheticSpec:
    num_domains: int
    samples_per_domain: int
    image_size: int
    gains: list  # per-domain low-frequency amplitude gain
    noise: list  # per-domain additive noise sigma
    shape_family: str = "ellipse"  # "ellipse" (K=2) or "disc-in-disc" (K=3)
    seed: int = 0

    def __post_init__(self):
        if self.num_domains < 2:
            raise ValueError("need at least 2 domains")
        if len(self.gains) != self.num_domains or len(self.noise) != self.num_domains:
            raise ValueError("gains and noise must have one entry per domain")
        if any(g <= 0 for g in self.gains):
            raise ValueError("gains must be positive")
        if self.shape_family not in ("ellipse", "disc-in-disc"):
            raise ValueError(f"unknown shape family {self.shape_family!r}")

    @property
    def class_count(self) -> int:
        return 3 if self.shape_family == "disc-in-disc" else 2

    def domain_ids(self) -> list:
        return [f"domain{i}" for i in range(self.num_domains)]


def _ellipse_mask(size, rng, scale=1.0):
    cy, cx = rng.uniform(0.38 * size, 0.62 * size, size=2)
    ry = rng.uniform(0.14 * size, 0.26 * size) * scale
    rx = rng.uniform(0.14 * size, 0.26 * size) * scale
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    y, x = yy - cy, xx - cx
    u = np.cos(theta) * x + np.sin(theta) * y
    v = -np.sin(theta) * x + np.cos(theta) * y
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def render_base(spec: SyntheticSpec, index: int):
    """Domain-independent anatomy: (image H x W float, mask H x W int)."""
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    mask = np.zeros((size, size), dtype=np.int64)
    outer = _ellipse_mask(size, rng)
    mask[outer] = 1
    img = 0.42 + 0.18 * outer.astype(np.float64)
    if spec.shape_family == "disc-in-disc":
        inner = _ellipse_mask(size, rng, scale=0.45) & outer
        mask[inner] = 2
        img += 0.12 * inner
    img = gaussian_filter(img, sigma=size / 32.0)
    return img, mask


def low_band_mask(size: int) -> np.ndarray:
    """Centered low-frequency band: radius <= size/8, DC excluded."""
    yy, xx = np.mgrid[0:size, 0:size]
    r = np.hypot(yy - size // 2, xx - size // 2)
    band = r <= size / 8.0
    band[size // 2, size // 2] = False
    return band


def apply_domain_shift(img: np.ndarray, gain: float, noise: float, rng) -> np.ndarray:
    """Scale the low-frequency amplitude band, then add pixel noise."""
    size = img.shape[0]
    spec2d = np.fft.fftshift(spectral.fft2(img[:, :, None])[:, :, 0])
    spec2d[low_band_mask(size)] *= gain
    shifted = np.fft.ifft2(np.fft.ifftshift(spec2d)).real
    if noise > 0:
        shifted = shifted + rng.normal(0.0, noise, size=shifted.shape)
    return np.clip(shifted, 0.0, 1.0)


def render_sample(spec: SyntheticSpec, domain_idx: int, index: int):
    """(image H x W float in [0, 1], mask H x W int) for one domain's view."""
    img, mask = render_base(spec, index)
    rng = np.random.default_rng([spec.seed, index, domain_idx, 7])
    return apply_domain_shift(img, spec.gains[domain_idx], spec.noise[domain_idx], rng), mask


def low_band_amplitude(img: np.ndarray) -> float:
    """Mean amplitude over the centered low band; the shift-measurement probe."""
    size = img.shape[0]
    amp = np.fft.fftshift(np.abs(spectral.fft2(img[:, :, None])[:, :, 0]))
    return float(amp[low_band_mask(size)].mean())


def generate_dataset(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Materialize the synthetic corpus in the documented layout."""
    out_dir = Path(out_dir)
    for d, domain in enumerate(spec.domain_ids()):
        img_dir = out_dir / domain / "images"
        mask_dir = out_dir / domain / "masks"
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        for i in range(spec.samples_per_domain):
            img, mask = render_sample(spec, d, i)
            stem = f"sample{i:04d}"
            PILImage.fromarray(np.round(img * 255).astype(np.uint8), mode="L").save(
                img_dir / f"{stem}.png"
            )
            PILImage.fromarray(mask.astype(np.uint8), mode="L").save(mask_dir / f"{stem}.png")
    return load_manifest(out_dir)


# ---------------------------------------------------------------------------
# Metric and protocol


def dice(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """2*TP / (2*TP + FP + FN) for one class; 1.0 when both masks are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p = pred == class_id
    g = gt == class_id
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / denom)


def mean_foreground_dice(pred, gt, class_count: int) -> float:
    return float(np.mean([dice(pred, gt, c) for c in range(1, class_count)]))


@dataclass
class DSCReport:
    """Per-source rows of per-target, per-class mean DSC, with row averages."""

    class_count: int
    rows: dict = field(default_factory=dict)  # source -> target -> class -> mean DSC
    counts: dict = field(default_factory=dict)  # source -> target -> sample count

    def row_average(self, source: str) -> dict:
        targets = self.rows[source]
        return {
            c: float(np.mean([targets[t][c] for t in sorted(targets)]))
            for c in range(1, self.class_count)
        }

    def overall_average(self) -> float:
        return float(
            np.mean([v for s in self.rows for v in self.row_average(s).values()])
        )

    def to_csv(self) -> str:
        lines = ["source,target,class,dsc,n"]
        for source in sorted(self.rows):
            for target in sorted(self.rows[source]):
                for c in range(1, self.class_count):
                    lines.append(
                        f"{source},{target},{c},{self.rows[source][target][c]:.4f},"
                        f"{self.counts[source][target]}"
                    )
            for c, v in self.row_average(source).items():
                lines.append(f"{source},average,{c},{v:.4f},")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = []
        for source in sorted(self.rows):
            targets = sorted(self.rows[source])
            header = ["class"] + targets + ["average"]
            lines.append(f"source domain: {source}")
            lines.append("  " + "  ".join(f"{h:>10}" for h in header))
            avg = self.row_average(source)
            for c in range(1, self.class_count):
                cells = [f"{self.rows[source][t][c]:10.4f}" for t in targets]
                lines.append(
                    "  " + f"{c:>10}" + "  " + "  ".join(cells) + f"  {avg[c]:10.4f}"
                )
        lines.append(f"overall average DSC: {self.overall_average():.4f}")
        return "\n".join(lines) + "\n"


def leave_one_out_eval(
    predictors: dict,
    manifest: DatasetManifest,
    class_count: int,
    target_size: int,
    exclude_source: bool = True,
) -> DSCReport:
    """Evaluate each source-domain predictor on every other domain.

    predictors: domain_id -> callable(image H x W x C float) -> mask H x W int.
    With exclude_source=False the source domain itself is also evaluated
    (in-domain sanity checks).
    """
    for source in predictors:
        if source not in manifest.domains:
            raise DatasetError(f"source domain {source!r} not in manifest")
    report = DSCReport(class_count=class_count)
    for source in sorted(predictors):
        predict = predictors[source]
        report.rows[source] = {}
        report.counts[source] = {}
        for target in manifest.domain_ids:
            if exclude_source and target == source:
                continue
            per_class = {c: [] for c in range(1, class_count)}
            for sample in manifest.domains[target]:
                img, gt = preprocess(sample, target_size)
                pred = predict(img)
                for c in per_class:
                    per_class[c].append(dice(pred, gt, c))
            report.rows[source][target] = {
                c: float(np.mean(v)) for c, v in per_class.items()
            }
            report.counts[source][target] = len(manifest.domains[target])
    return report

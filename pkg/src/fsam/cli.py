"""Command-line surface: train / eval / synth / inspect.

Configuration is a flat ``key = value`` text file; resolution order is
built-in defaults -> preset -> config file -> command-line overrides.
Every run echoes its fully resolved config into the output directory.
Exit codes: 0 success, 1 runtime failure, 2 usage or config failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from . import data, model as model_mod, spectral
from .checkpoint import CheckpointError, load_checkpoint
from .lora import audit_parameters
from .model import FSAMConfig, FSAMModel


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig(FSAMConfig):
    data_root: str = ""
    source_domain: str = ""
    out_dir: str = ""
    split_ratio: float = 0.9
    targets: str = ""  # comma-separated target domains; empty = all others

    def fsam(self) -> FSAMConfig:
        fields = {f.name for f in dataclasses.fields(FSAMConfig)}
        return FSAMConfig(**{k: v for k, v in self.to_dict().items() if k in fields})


PRESETS = {
    "toy": {},
    "riga-like": {
        "image_size": 512,
        "patch_size": 16,
        "embed_dim": 768,
        "depth": 12,
        "heads": 12,
        "num_classes": 3,
        "lora_rank": 4,
        "loss_lambda": 0.8,
        "lr": 5e-4,
        "weight_decay": 0.1,
        "warmup_steps": 25,
        "early_stop_epoch": 160,
        "max_epochs": 200,
    },
    "prostate-like": {
        "image_size": 384,
        "patch_size": 16,
        "embed_dim": 768,
        "depth": 12,
        "heads": 12,
        "num_classes": 2,
        "lora_rank": 4,
        "loss_lambda": 0.8,
        "lr": 5e-4,
        "weight_decay": 0.1,
        "warmup_steps": 250,
        "early_stop_epoch": 160,
        "max_epochs": 200,
    },
}


def _coerce(value: str, typ):
    if typ is bool:
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    try:
        return typ(value)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {value!r} as {typ.__name__}") from exc


def parse_kv_file(path) -> dict:
    """Flat ``key = value`` file with '#' comments."""
    result = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        result[key] = value
    return result


def resolve_config(config_file=None, preset="toy", overrides=None) -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    field_types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    _builtin = {"int": int, "float": float, "str": str, "bool": bool}
    values = dataclasses.asdict(RunConfig())
    values.update(PRESETS[preset])
    if config_file:
        for key, raw in parse_kv_file(config_file).items():
            if key not in field_types:
                raise ConfigError(f"unknown config key {key!r}")
            typ = field_types[key]
            typ = _builtin[typ] if isinstance(typ, str) else typ
            values[key] = _coerce(raw, typ)
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def write_resolved_config(config: RunConfig, out_dir: Path) -> None:
    lines = [f"{k} = {v}" for k, v in sorted(config.to_dict().items())]
    (out_dir / "config_resolved.txt").write_text("\n".join(lines) + "\n")


def default_out_dir(explicit) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get("FSAM_OUT_DIR", ".")) / "fsam_run"


def _load_pairs(samples, size):
    pairs = []
    for s in samples:
        img, mask = data.preprocess(s, size)
        pairs.append(
            (
                torch.from_numpy(np.moveaxis(img, -1, 0)).float(),
                torch.from_numpy(mask).long(),
            )
        )
    return pairs


def _predictor(model: FSAMModel):
    def predict(img_hwc: np.ndarray) -> np.ndarray:
        t = torch.from_numpy(np.moveaxis(img_hwc, -1, 0)).float().unsqueeze(0)
        return model.predict(t)[0].numpy()

    return predict


def cmd_train(args) -> int:
    config = resolve_config(
        args.config,
        args.preset,
        {"seed": args.seed, "out_dir": args.out, "max_epochs": args.max_epochs},
    )
    if args.max_epochs is not None and config.early_stop_epoch > config.max_epochs:
        config = dataclasses.replace(config, early_stop_epoch=config.max_epochs)
    if not config.data_root or not config.source_domain:
        raise ConfigError("data_root and source_domain are required for training")
    out_dir = default_out_dir(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(config, out_dir)
    for line in sorted(f"{k} = {v}" for k, v in config.to_dict().items()):
        print(line)

    torch.set_num_threads(1)
    torch.manual_seed(config.seed)
    manifest = data.load_manifest(config.data_root)
    if config.source_domain not in manifest.domains:
        raise ConfigError(f"source domain {config.source_domain!r} not in dataset")
    train_samples, val_samples = data.split_source(
        manifest.domains[config.source_domain], config.split_ratio, config.seed
    )
    train_set = _load_pairs(train_samples, config.image_size)
    val_set = _load_pairs(val_samples, config.image_size)

    fsam_config = config.fsam()
    model = model_mod.build(fsam_config)
    (out_dir / "audit.txt").write_text(audit_parameters(model).report() + "\n")
    result = model_mod.fit(
        model, train_set, val_set, fsam_config, metrics_path=out_dir / "metrics.jsonl"
    )
    model.load_state_dict(result.last_state)
    model_mod.save_model(out_dir / "last.ckpt", model, result.epochs_run, result.best_val_dsc)
    model.load_state_dict(result.best_state)
    model_mod.save_model(out_dir / "best.ckpt", model, result.best_epoch, result.best_val_dsc)
    print(
        f"trained {result.epochs_run} epochs; best val DSC {result.best_val_dsc:.4f} "
        f"at epoch {result.best_epoch}"
    )
    return 0


def cmd_eval(args) -> int:
    for path in (args.checkpoint, args.data_root):
        if not Path(path).exists():
            raise ConfigError(f"missing input: {path}")
    model = model_mod.load_model(load_checkpoint(args.checkpoint))
    manifest = data.load_manifest(args.data_root)
    source = args.source or model.config.__dict__.get("source_domain", "")
    if not source:
        raise ConfigError("--source is required")
    targets = [t for t in args.targets.split(",") if t] if args.targets else []
    for t in targets:
        if t not in manifest.domains:
            raise ConfigError(f"target domain {t!r} not in dataset")
    if targets:
        manifest = data.DatasetManifest(
            domains={d: s for d, s in manifest.domains.items() if d in targets or d == source}
        )
    report = data.leave_one_out_eval(
        {source: _predictor(model)},
        manifest,
        model.config.num_classes,
        model.config.image_size,
        exclude_source=not targets,
    )
    out_dir = default_out_dir(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "dsc_report.csv").write_text(report.to_csv())
    (out_dir / "dsc_report.txt").write_text(report.to_text())
    print(f"overall average DSC: {report.overall_average():.4f}")
    return 0


def cmd_synth(args) -> int:
    raw = parse_kv_file(args.spec)
    known = {
        "num_domains": int,
        "samples_per_domain": int,
        "image_size": int,
        "shape_family": str,
        "seed": int,
    }
    kwargs = {}
    for key, value in raw.items():
        if key in known:
            kwargs[key] = _coerce(value, known[key])
        elif key in ("gains", "noise"):
            kwargs[key] = [float(v) for v in value.split(",")]
        else:
            raise ConfigError(f"unknown spec key {key!r}")
    try:
        spec = data.SyntheticSpec(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    out_dir = default_out_dir(args.out)
    manifest = data.generate_dataset(spec, out_dir)
    n = sum(len(s) for s in manifest.domains.values())
    print(f"wrote {n} samples across {len(manifest.domains)} domains to {out_dir}")
    return 0


def _save_gray_png(arr: np.ndarray, path) -> None:
    lo, hi = float(arr.min()), float(arr.max())
    scaled = np.zeros_like(arr) if hi == lo else (arr - lo) / (hi - lo)
    PILImage.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path)


def cmd_inspect(args) -> int:
    out_dir = default_out_dir(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.kind == "spectrum":
        try:
            img = PILImage.open(args.image)
            img.load()
        except OSError as exc:
            raise ConfigError(f"cannot read image: {exc}") from exc
        arr = np.asarray(img, dtype=np.float64) / 255.0
        if arr.ndim == 2:
            arr = arr[:, :, None]
        spec = spectral.fft2(arr)
        amp = spectral.amplitude(spec)
        pha = spectral.phase(spec)
        fin = spectral.amplitude_preprocess(amp)
        for c in range(arr.shape[2]):
            _save_gray_png(fin.values[:, :, c], out_dir / f"amplitude_c{c}.png")
            _save_gray_png(pha[:, :, c], out_dir / f"phase_c{c}.png")
        meta = {
            "log_min": fin.log_min.tolist(),
            "log_max": fin.log_max.tolist(),
            "degenerate": fin.degenerate.tolist(),
            "shape": list(arr.shape),
        }
        (out_dir / "spectrum_meta.json").write_text(json.dumps(meta, indent=2) + "\n")
        print(f"wrote spectrum report to {out_dir}")
    elif args.kind == "prompt":
        model = model_mod.load_model(load_checkpoint(args.checkpoint))
        sample = data.SegSample(Path(args.image), Path(args.image), "")
        img, _ = data.preprocess(sample, model.config.image_size)
        t = torch.from_numpy(np.moveaxis(img, -1, 0)).float().unsqueeze(0)
        with torch.no_grad():
            e = model.encode(t)
            g = model.grid_size
            info = model.prompt_gen.inspect(e, g, g)
        record = {
            "alpha": info["alpha"][0].tolist(),
            "alpha_sum": float(info["alpha"][0].sum()),
            "p_hat_norm": float(info["p_hat_norm"][0]),
        }
        (out_dir / "prompt_record.json").write_text(json.dumps(record, indent=2) + "\n")
        _save_gray_png(info["activation"][0].numpy(), out_dir / "activation_map.png")
        print(f"wrote prompt report to {out_dir}")
    elif args.kind == "audit":
        model = model_mod.load_model(load_checkpoint(args.checkpoint))
        report = audit_parameters(model).report()
        (out_dir / "audit.txt").write_text(report + "\n")
        print(report)
    else:
        raise ConfigError(f"unknown inspect kind {args.kind!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsam")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train on one source domain")
    p_train.add_argument("--config", help="flat key = value config file")
    p_train.add_argument("--preset", default="toy", choices=sorted(PRESETS))
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", default=None)
    p_train.add_argument("--max-epochs", type=int, default=None, dest="max_epochs")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint across domains")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data-root", required=True, dest="data_root")
    p_eval.add_argument("--source", default="")
    p_eval.add_argument("--targets", default="")
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_synth = sub.add_parser("synth", help="generate the synthetic corpus")
    p_synth.add_argument("--spec", required=True)
    p_synth.add_argument("--out", default=None)
    p_synth.set_defaults(func=cmd_synth)

    p_inspect = sub.add_parser("inspect", help="dump diagnostic artifacts")
    p_inspect.add_argument("kind", choices=["spectrum", "prompt", "audit"])
    p_inspect.add_argument("--image", default=None)
    p_inspect.add_argument("--checkpoint", default=None)
    p_inspect.add_argument("--out", default=None)
    p_inspect.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        return args.func(args)
    except (ConfigError, data.DatasetError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, model_mod.TrainingDivergedError, OSError) as exc:
        print(f"error: runtime: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``ccan <command> [--config FILE] [--key value ...]``.

Configuration is a flat dotted-key namespace resolved as
defaults < config file < command-line flags. Files are line-based
``key = value`` text with ``#`` comments. Unknown keys are errors, so
typos never pass silently. Every command echoes its fully resolved
configuration into the run directory (or next to its output), and that
echo is itself a valid config file that reproduces the run.

The root seed comes from ``seed`` (or the CCAN_SEED environment
variable); each concern derives its own sub-seed by hashing the root
with a purpose string.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass

import numpy as np

from . import bench as bench_mod
from . import explain as explain_mod
from .data import (
    Dataset,
    generate_synthetic,
    load_manifest,
    patient_grouped_kfold,
    read_bag,
    SplitPlan,
    write_bag,
    write_manifest,
)
from .errors import CCANError, ConfigError, UsageError
from .model import CCANConfig, CCANModel, load_checkpoint
from .netpbm import read_pnm
from .preprocess import PreprocessConfig, RasterImage, read_sidecar, run_pipeline
from .training import (
    TrainConfig,
    data_efficiency_sweep,
    derive_seed,
    evaluate_auc,
    train,
    write_sweep_csv,
)

COMMANDS = ("preprocess", "synth", "split", "train", "eval", "sweep", "explain", "bench", "embed")

# key -> (type tag, default); tags: int, float, str, bool, floats, ints
SCHEMA = {
    "model.J": ("int", 6),
    "model.M": ("int", 512),
    "model.C": ("int", 2),
    "model.D_l": ("int", 512),
    "model.D_f": ("int", 2048),
    "model.Z": ("int", 1),
    "model.S": ("int", 2),
    "model.p_do": ("float", 0.9),
    "model.num_classes": ("int", 2),
    "model.I": ("int", 6),
    "model.f_max": ("float", 10.0),
    "model.scale_mode": ("str", "per-paper"),
    "model.heads": ("int", 1),
    "model.append_raw_coords": ("bool", False),
    "train.epochs": ("int", 100),
    "train.batch_size": ("int", 30),
    "train.lr_max": ("float", 5e-6),
    "train.lr_min": ("float", 0.0),
    "train.weight_decay": ("float", 0.01),
    "train.beta1": ("float", 0.9),
    "train.beta2": ("float", 0.999),
    "train.eps": ("float", 1e-8),
    "train.fractions": ("floats", (0.02, 0.05, 0.10, 0.25, 0.50, 0.75, 1.00)),
    "data.n_bags": ("int", 200),
    "data.n_min": ("int", 20),
    "data.n_max": ("int", 50),
    "data.witness_shift": ("float", 4.0),
    "data.witness_min": ("int", 2),
    "data.witness_max": ("int", 5),
    "data.grid_rows": ("int", 16),
    "data.grid_cols": ("int", 16),
    "data.k": ("int", 4),
    "data.val_fraction": ("float", 0.2),
    "preprocess.patch_microns": ("float", 256.0),
    "preprocess.white_threshold": ("float", 224.0),
    "preprocess.blur_fraction": ("float", 0.02),
    "preprocess.canny_sigma": ("float", 1.4),
    "preprocess.canny_low": ("float", 50.0),
    "preprocess.canny_high": ("float", 100.0),
    "bench.ns": ("ints", (250, 500, 1000, 2000, 4000)),
    "bench.repeats": ("int", 7),
    "bench.baseline": ("bool", True),
    "sweep.models": ("strs", ("ccan", "mean-pool", "max-pool")),
    "paths.image": ("str", ""),
    "paths.meta": ("str", ""),
    "paths.data": ("str", ""),
    "paths.plan": ("str", ""),
    "paths.run_dir": ("str", ""),
    "paths.out": ("str", ""),
    "paths.checkpoint": ("str", ""),
    "paths.bag": ("str", ""),
    "seed": ("int", 0),
    "fold": ("int", 0),
    "subset": ("str", "test"),
    "jobs": ("int", 1),
    "top_k": ("int", 5),
}


@dataclass
class RunConfig:
    """Fully resolved flat key/value view of one command invocation."""

    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def model_config(self, seed=None):
        v = self.values
        return CCANConfig(
            n_stages=v["model.J"],
            n_latents=v["model.M"],
            compression=v["model.C"],
            d_latent=v["model.D_l"],
            d_feature=v["model.D_f"],
            block_repeats=v["model.Z"],
            self_layers=v["model.S"],
            p_dropout=v["model.p_do"],
            num_classes=v["model.num_classes"],
            n_frequencies=v["model.I"],
            f_max=v["model.f_max"],
            scale_mode=v["model.scale_mode"],
            heads=v["model.heads"],
            append_raw_coords=v["model.append_raw_coords"],
            seed=v["seed"] if seed is None else seed,
        ).validate()

    def train_config(self, seed=None):
        v = self.values
        return TrainConfig(
            epochs=v["train.epochs"],
            batch_size=v["train.batch_size"],
            lr_max=v["train.lr_max"],
            lr_min=v["train.lr_min"],
            weight_decay=v["train.weight_decay"],
            beta1=v["train.beta1"],
            beta2=v["train.beta2"],
            eps=v["train.eps"],
            fractions=tuple(v["train.fractions"]),
            seed=v["seed"] if seed is None else seed,
        ).validate()

    def preprocess_config(self):
        v = self.values
        return PreprocessConfig(
            patch_microns=v["preprocess.patch_microns"],
            white_threshold=v["preprocess.white_threshold"],
            blur_fraction=v["preprocess.blur_fraction"],
            canny_sigma=v["preprocess.canny_sigma"],
            canny_low=v["preprocess.canny_low"],
            canny_high=v["preprocess.canny_high"],
            d_feature=v["model.D_f"],
        )

    def echo(self, path):
        with open(path, "w") as fh:
            for key in sorted(self.values):
                fh.write(f"{key} = {_format_value(*SCHEMA[key], self.values[key])}\n")


def _format_value(tag, _default, value):
    if tag in ("floats", "ints", "strs"):
        return ",".join(repr(v) if tag == "floats" else str(v) for v in value)
    if tag == "bool":
        return "true" if value else "false"
    if tag == "float":
        return repr(float(value))
    return str(value)


def _parse_value(key, tag, raw):
    raw = raw.strip()
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if tag == "floats":
            return tuple(float(p) for p in raw.split(",") if p.strip())
        if tag == "ints":
            return tuple(int(p) for p in raw.split(",") if p.strip())
        if tag == "strs":
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {tag}") from None


def _read_config_file(path):
    pairs = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            pairs[key] = raw
    return pairs


def parse_config(file_path=None, flag_overrides=None):
    """Resolve defaults < environment seed < config file < flags."""
    values = {key: default for key, (_, default) in SCHEMA.items()}
    env_seed = os.environ.get("CCAN_SEED")
    if env_seed is not None:
        values["seed"] = _parse_value("seed", "int", env_seed)
    layers = []
    if file_path:
        layers.append(_read_config_file(file_path))
    if flag_overrides:
        layers.append(dict(flag_overrides))
    for layer in layers:
        for key, raw in layer.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown configuration key {key!r}")
            values[key] = _parse_value(key, SCHEMA[key][0], raw)
    return RunConfig(values=values)


def _parse_argv(argv):
    if not argv:
        raise UsageError(f"usage: ccan <command> [--config FILE] [--key value ...]; commands: {', '.join(COMMANDS)}")
    command = argv[0]
    if command not in COMMANDS:
        raise UsageError(f"unknown command {command!r}; commands: {', '.join(COMMANDS)}")
    config_file = None
    overrides = []
    i = 1
    while i < len(argv):
        arg = argv[i]
        if not arg.startswith("--"):
            raise UsageError(f"expected --key value, got {arg!r}")
        if i + 1 >= len(argv):
            raise UsageError(f"flag {arg!r} is missing a value")
        key, value = arg[2:], argv[i + 1]
        if key == "config":
            config_file = value
        else:
            overrides.append((key, value))
        i += 2
    return command, config_file, overrides


def _require(cfg, key, command):
    value = cfg[key]
    if value in ("", None):
        raise UsageError(f"command {command!r} requires --{key}")
    return value


def _load_dataset(cfg, command):
    data = _require(cfg, "paths.data", command)
    manifest = data if data.endswith(".csv") else os.path.join(data, "manifest.csv")
    return load_manifest(manifest)


def _load_plan(cfg, command):
    return SplitPlan.read_csv(_require(cfg, "paths.plan", command))


# ---------------------------------------------------------------------------
# commands


def _cmd_preprocess(cfg):
    image_path = _require(cfg, "paths.image", "preprocess")
    meta = read_sidecar(_require(cfg, "paths.meta", "preprocess"))
    out = _require(cfg, "paths.out", "preprocess")
    pixels, _ = read_pnm(image_path)
    image = RasterImage(pixels=pixels, microns_per_pixel=meta["microns_per_pixel"])
    bag, qc = run_pipeline(
        image,
        out,
        label=meta["label"],
        bag_id=meta["bag_id"],
        patient_id=meta["patient_id"],
        seed=cfg["seed"],
        config=cfg.preprocess_config(),
    )
    qc.write_csv(out + ".qc.csv")
    cfg.echo(out + ".config.txt")
    print(f"wrote {out}: N={bag.n_tokens} (total {qc.total}, white {qc.white_rejected}, blur {qc.blur_rejected})")
    return 0


def _cmd_synth(cfg):
    out_dir = _require(cfg, "paths.out", "synth")
    os.makedirs(out_dir, exist_ok=True)
    dataset = generate_synthetic(
        n_bags=cfg["data.n_bags"],
        n_per_bag_range=(cfg["data.n_min"], cfg["data.n_max"]),
        d_feature=cfg["model.D_f"],
        witness_shift=cfg["data.witness_shift"],
        witness_count_range=(cfg["data.witness_min"], cfg["data.witness_max"]),
        grid=(cfg["data.grid_rows"], cfg["data.grid_cols"]),
        n_classes=cfg["model.num_classes"],
        seed=derive_seed(cfg["seed"], "synth"),
    )
    paths = {}
    for bag in dataset.bags:
        write_bag(bag, os.path.join(out_dir, f"{bag.bag_id}.ccfb"))
        paths[bag.bag_id] = f"{bag.bag_id}.ccfb"  # relative: keeps the dir relocatable
    write_manifest(dataset, paths, os.path.join(out_dir, "manifest.csv"))
    with open(os.path.join(out_dir, "witnesses.csv"), "w") as fh:
        fh.write("bag_id,token_index\n")
        for bag in dataset.bags:
            for idx in dataset.witness_indices[bag.bag_id]:
                fh.write(f"{bag.bag_id},{idx}\n")
    cfg.echo(os.path.join(out_dir, "config.txt"))
    print(f"wrote {len(dataset.bags)} bags to {out_dir}")
    return 0


def _cmd_split(cfg):
    dataset = _load_dataset(cfg, "split")
    out = _require(cfg, "paths.out", "split")
    plan = patient_grouped_kfold(
        dataset.bags,
        k=cfg["data.k"],
        val_fraction=cfg["data.val_fraction"],
        seed=derive_seed(cfg["seed"], "split"),
    )
    plan.write_csv(out)
    cfg.echo(out + ".config.txt")
    print(f"wrote {plan.k}-fold plan to {out}")
    return 0


def _cmd_train(cfg):
    dataset = _load_dataset(cfg, "train")
    plan = _load_plan(cfg, "train")
    fold_idx = cfg["fold"]
    if not 0 <= fold_idx < plan.k:
        raise UsageError(f"fold {fold_idx} outside 0..{plan.k - 1}")
    run_dir = _require(cfg, "paths.run_dir", "train")
    os.makedirs(run_dir, exist_ok=True)
    model = CCANModel(cfg.model_config(seed=derive_seed(cfg["seed"], f"model-fold{fold_idx}")))
    train_cfg = cfg.train_config(seed=derive_seed(cfg["seed"], f"train-fold{fold_idx}"))
    cfg.echo(os.path.join(run_dir, "config.txt"))
    checkpoint = os.path.join(run_dir, "best.ckpt")
    _, history = train(
        model, dataset, plan.folds[fold_idx], train_cfg,
        checkpoint_path=checkpoint, log=lambda msg: print(msg, flush=True),
    )
    history.write_csv(os.path.join(run_dir, "history.csv"))
    print(
        f"best epoch {history.best_epoch}: val_auc={history.best_val_auc:.4f} "
        f"test_auc={history.test_auc_at_best:.4f}"
    )
    return 0


def _cmd_eval(cfg):
    model = load_checkpoint(_require(cfg, "paths.checkpoint", "eval"))
    dataset = _load_dataset(cfg, "eval")
    plan = _load_plan(cfg, "eval")
    fold = plan.folds[cfg["fold"]]
    subset = cfg["subset"]
    ids = {"train": fold.train_ids, "val": fold.val_ids, "test": fold.test_ids}.get(subset)
    if ids is None:
        raise UsageError(f"subset must be train/val/test, got {subset!r}")
    auc = evaluate_auc(model, [dataset.by_id(i) for i in ids])
    print(f"{subset} auc: {auc:.6f}")
    return 0


def _cmd_sweep(cfg):
    dataset = _load_dataset(cfg, "sweep")
    plan = _load_plan(cfg, "sweep")
    run_dir = _require(cfg, "paths.run_dir", "sweep")
    os.makedirs(run_dir, exist_ok=True)
    cfg.echo(os.path.join(run_dir, "config.txt"))
    rows = data_efficiency_sweep(
        dataset,
        plan,
        list(cfg["train.fractions"]),
        cfg.train_config(),
        cfg.model_config(),
        models=tuple(cfg["sweep.models"]),
        jobs=cfg["jobs"],
        log=lambda msg: print(msg, flush=True),
    )
    out = os.path.join(run_dir, "sweep.csv")
    write_sweep_csv(rows, out)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def _cmd_explain(cfg):
    model = load_checkpoint(_require(cfg, "paths.checkpoint", "explain"))
    bag = read_bag(_require(cfg, "paths.bag", "explain"))
    out = _require(cfg, "paths.out", "explain")
    attention_map = explain_mod.explain_bag(model, bag)
    csv_path, pgm_path = explain_mod.export_heatmap(attention_map, out)
    k = min(cfg["top_k"], bag.n_tokens)
    lowest, highest = explain_mod.top_k_patches(attention_map, k)
    cfg.echo(out + ".config.txt")
    print(f"wrote {csv_path} and {pgm_path}")
    print(f"lowest-{k} tokens: {lowest}")
    print(f"highest-{k} tokens: {highest}")
    return 0


def _cmd_bench(cfg):
    report = bench_mod.bench_scaling(
        cfg.model_config(),
        list(cfg["bench.ns"]),
        repeats=cfg["bench.repeats"],
        seed=derive_seed(cfg["seed"], "bench"),
        include_baseline=cfg["bench.baseline"],
        log=lambda msg: print(msg, flush=True),
    )
    out = cfg["paths.out"]
    if out:
        report.write_csv(out)
        cfg.echo(out + ".config.txt")
    print(report.summary())
    return 0


def _cmd_embed(cfg):
    model = load_checkpoint(_require(cfg, "paths.checkpoint", "embed"))
    dataset = _load_dataset(cfg, "embed")
    out = _require(cfg, "paths.out", "embed")
    explain_mod.export_class_embeddings(model, dataset.bags, out)
    cfg.echo(out + ".config.txt")
    print(f"wrote embeddings for {len(dataset.bags)} bags to {out}")
    return 0


_DISPATCH = {
    "preprocess": _cmd_preprocess,
    "synth": _cmd_synth,
    "split": _cmd_split,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "explain": _cmd_explain,
    "bench": _cmd_bench,
    "embed": _cmd_embed,
}


def dispatch(command, run_config):
    if command not in _DISPATCH:
        raise UsageError(f"unknown command {command!r}; commands: {', '.join(COMMANDS)}")
    return _DISPATCH[command](run_config)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        command, config_file, overrides = _parse_argv(argv)
        run_config = parse_config(config_file, overrides)
        return dispatch(command, run_config)
    except CCANError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

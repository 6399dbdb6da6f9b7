"""Command-line entry point: JSON configs in, artifacts plus run manifest out.

Precedence is flags > config file > published defaults. Parsing is strict:
an unknown or mistyped key fails fast with its JSON path rather than being
silently ignored. Every run directory receives a manifest (resolved config,
seeds, version, artifact checksums) sufficient to reproduce the run bitwise.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__, pipelines as pl
from .dataio import MaskSpec
from .deeponet import ReceiverSet, load_deeponet
from .errors import (
    ConfigError,
    ContractViolation,
    DataError,
    DegenerateKernelError,
    DimensionError,
    FormatError,
    NumericError,
    ParameterError,
    ResourceError,
    SolverError,
    SpecError,
    StabilityError,
)
from .fluids import FluidConfig, dataset_workers, generate_dataset, load_dataset
from .losses import LossWeights, PhysicsConfig
from .ntk import NtkSchedule, adapt_lr, assemble_gram, report_row, write_report
from .tensorcore import Rng

TASKS = ("datagen", "train-fluids", "train-images", "evaluate", "ablation", "ntk-report")

MANIFEST_NAME = "run_manifest.json"

# leaf schema: dotted JSON path -> (default, type). Defaults are the published
# training settings; None marks optional values that tasks fill in or require.
_LEAF: dict[str, tuple] = {
    "seed": (0, int),
    "out": (None, str),
    "dataset": (None, str),
    "images": (None, str),
    "labels": (None, str),
    "checkpoint": (None, str),
    "limit": (None, int),
    "max_steps": (None, int),
    "eval_task": ("localization", str),
    "train_fraction": (1.0, float),
    "observe_ntk": (True, bool),
    "fluid.nx": (64, int),
    "fluid.ny": (64, int),
    "fluid.viscosity": (0.01, float),
    "fluid.dt": (0.004, float),
    "fluid.n_steps": (500, int),
    "fluid.poisson_tol": (1e-8, float),
    "fluid.sigma_cells": (2.0, float),
    "fluid.bc": ("noslip", str),
    "fluid.max_poisson_iters": (20000, int),
    "datagen.n_samples": (16, int),
    "datagen.n_sources": (1, int),
    "datagen.t_receivers": (64, int),
    "datagen.strength_min": (0.5, float),
    "datagen.strength_max": (2.0, float),
    "datagen.workers": (None, int),
    "optimizer.lr": (0.001, float),
    "optimizer.beta1": (0.9, float),
    "optimizer.beta2": (0.999, float),
    "optimizer.eps": (1e-8, float),
    "optimizer.batch": (64, int),
    "optimizer.epochs": (100, int),
    "weights.alpha": (1.0, float),
    "weights.beta": (0.5, float),
    "weights.gamma": (0.2, float),
    "weights.delta": (0.3, float),
    "ntk.period": (100, int),
    "ntk.base_lr": (0.001, float),
    "ntk.safety": (0.9, float),
    "ntk.lr_floor": (1e-6, float),
    "ntk.lr_ceiling": (1.0, float),
    "mask.side": (8, int),
    "mask.seed": (0, int),
    "flags.use_ntk": (True, bool),
    "flags.use_se": (True, bool),
    "model.latent_dim": (64, int),
    "model.width": (128, int),
    "model.n_max": (4, int),
    "model.obs_feature_scale": (None, float),
    "model.recon_latent_dim": (128, int),
    "model.recon_width": (256, int),
    "model.freq_cutoff": (10, int),
    "physics.wavenumber": (1.0, float),
    "physics.fd_step": (1e-3, float),
    "physics.sigma": (2.0 / 64.0, float),
}

# convenience flags mapped onto schema paths
_FLAG_TO_LEAF = {
    "seed": "seed",
    "out": "out",
    "dataset": "dataset",
    "images": "images",
    "labels": "labels",
    "checkpoint": "checkpoint",
    "limit": "limit",
    "max_steps": "max_steps",
    "eval_task": "eval_task",
    "lr": "optimizer.lr",
    "batch": "optimizer.batch",
    "epochs": "optimizer.epochs",
    "alpha": "weights.alpha",
    "beta": "weights.beta",
    "gamma": "weights.gamma",
    "delta": "weights.delta",
    "period": "ntk.period",
    "mask_side": "mask.side",
}


def _check(path: str, value):
    """Validate one leaf against the schema; returns the coerced value."""
    default, kind = _LEAF[path]
    if value is None:
        if default is None:
            return None
        raise ConfigError(f"{path} may not be null")
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} expects true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} expects an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} expects a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{path} expects a string, got {value!r}")
    return value


def _flatten(prefix: str, obj: dict, out: dict) -> None:
    for key, value in obj.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if path in _LEAF:
            if isinstance(value, dict):
                raise ConfigError(f"{path} expects a value, got an object")
            out[path] = value
        elif any(k.startswith(path + ".") for k in _LEAF):
            if not isinstance(value, dict):
                raise ConfigError(f"{path} expects an object with fields")
            _flatten(path, value, out)
        else:
            raise ConfigError(f"unknown config key: {path}")


def load_config_file(path) -> dict:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"malformed JSON in {path}: {err}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    flat: dict = {}
    _flatten("", raw, flat)
    return {p: _check(p, v) for p, v in flat.items()}


def _parse_set(entry: str) -> tuple[str, object]:
    if "=" not in entry:
        raise ConfigError(f"--set expects path=value, got {entry!r}")
    path, text = entry.split("=", 1)
    path = path.strip()
    if path not in _LEAF:
        raise ConfigError(f"unknown config key: {path}")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return path, value


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then command-line overrides."""
    resolved = {path: default for path, (default, _) in _LEAF.items()}
    if args.config is not None:
        resolved.update(load_config_file(args.config))
    for entry in args.set or ():
        path, value = _parse_set(entry)
        resolved[path] = _check(path, value)
    for flag, path in _FLAG_TO_LEAF.items():
        value = getattr(args, flag, None)
        if value is not None:
            resolved[path] = _check(path, value)
    if resolved["out"] is None:
        resolved["out"] = os.path.join("runs", args.task)
    return resolved


def _nested(resolved: dict) -> dict:
    tree: dict = {}
    for path, value in sorted(resolved.items()):
        parts = path.split(".")
        node = tree
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return tree


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(task: str, resolved: dict, derived: dict | None = None) -> str:
    """Checksum everything in the run directory and record the resolved run."""
    out_dir = resolved["out"]
    os.makedirs(out_dir, exist_ok=True)
    artifacts = {}
    for root, _, names in os.walk(out_dir):
        for name in sorted(names):
            if name == MANIFEST_NAME:
                continue
            full = os.path.join(root, name)
            artifacts[os.path.relpath(full, out_dir)] = _sha256(full)
    manifest = {
        "format": 1,
        "task": task,
        "version": f"opinet-{__version__}",
        "seed": resolved["seed"],
        "streams": {
            "shuffle": pl.STREAM_SHUFFLE,
            "init": pl.STREAM_INIT,
            "mask": pl.STREAM_MASK,
            "eval_mask": pl.STREAM_EVAL_MASK,
        },
        "config": _nested(resolved),
        "derived": derived or {},
        "artifacts": artifacts,
    }
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def _section(resolved: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in resolved.items() if k.startswith(prefix)}


def _optimizer(resolved) -> pl.OptimizerConfig:
    return pl.OptimizerConfig(**_section(resolved, "optimizer"))


def _weights(resolved) -> LossWeights:
    return LossWeights(**_section(resolved, "weights"))


def _schedule(resolved) -> NtkSchedule:
    return NtkSchedule(**_section(resolved, "ntk"))


def _flags(resolved) -> pl.AblationFlags:
    return pl.AblationFlags(**_section(resolved, "flags"))


def _mask(resolved) -> MaskSpec | None:
    # side 0 is the documented "no corruption" setting
    side = resolved["mask.side"]
    if side == 0:
        return None
    return MaskSpec(side, resolved["mask.seed"])


def _physics(resolved) -> PhysicsConfig:
    sec = _section(resolved, "physics")
    return PhysicsConfig(
        wavenumber=sec["wavenumber"], fd_step=sec["fd_step"], sigma=sec["sigma"]
    )


def _require(resolved: dict, key: str, why: str):
    value = resolved[key]
    if value is None:
        raise ConfigError(f"{key} is required {why}")
    return value


def _load_images(resolved) -> "pl.ImageBatch":
    return pl.load_digits(
        resolved["images"], resolved["labels"], limit=resolved["limit"], seed=resolved["seed"]
    )


def _train_records(resolved):
    records, _ = load_dataset(_require(resolved, "dataset", "to locate the fluids dataset"))
    fraction = resolved["train_fraction"]
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"train_fraction must lie in (0, 1], got {fraction}")
    n_train = int(fraction * len(records))
    if n_train < 1:
        raise DataError(f"train_fraction {fraction} leaves no training samples")
    return records[:n_train]


def run_datagen(resolved: dict) -> dict:
    sec = _section(resolved, "datagen")
    fluid = FluidConfig(**_section(resolved, "fluid"))
    cap = dataset_workers()
    workers = cap if sec["workers"] is None else max(1, min(sec["workers"], cap))
    records, manifest = generate_dataset(
        fluid,
        sec["n_samples"],
        sec["n_sources"],
        sec["t_receivers"],
        resolved["seed"],
        out_dir=resolved["out"],
        strength_range=(sec["strength_min"], sec["strength_max"]),
        workers=workers,
    )
    print(
        f"wrote {len(records)} samples ({len(manifest['failures'])} failures) "
        f"to {resolved['out']}"
    )
    return {"n_written": len(records), "workers": workers}


def run_train_fluids(resolved: dict) -> dict:
    cfg, sched = _optimizer(resolved), _schedule(resolved)
    weights, phys = _weights(resolved), _physics(resolved)
    train = _train_records(resolved)
    scale = resolved["model.obs_feature_scale"]
    if scale is None:
        obs = np.stack([rec.values[:, 0] for rec in train])
        scale = float(1.0 / max(obs.std(), 1e-12))
    flags = _flags(resolved)
    model = pl.localization_model(
        Rng(resolved["seed"], stream=pl.STREAM_INIT),
        flags,
        latent_dim=resolved["model.latent_dim"],
        width=resolved["model.width"],
        n_max=resolved["model.n_max"],
        obs_feature_scale=scale,
    )
    model, history = pl.train_source_localization(
        train,
        model,
        cfg,
        sched,
        weights,
        flags,
        phys_cfg=phys,
        seed=resolved["seed"],
        out_dir=resolved["out"],
        observe_ntk=resolved["observe_ntk"],
        max_steps=resolved["max_steps"],
    )
    print(f"trained {len(history)} steps; final total loss {history[-1]['total']:.6g}")
    return {"obs_feature_scale": scale, "steps": len(history)}


def run_train_images(resolved: dict) -> dict:
    cfg, sched = _optimizer(resolved), _schedule(resolved)
    weights, mask = _weights(resolved), _mask(resolved)
    batch = _load_images(resolved)
    _, channels, height, width = batch.images.shape
    flags = _flags(resolved)
    model = pl.reconstruction_model(
        Rng(resolved["seed"], stream=pl.STREAM_INIT),
        height,
        width,
        channels=channels,
        flags=flags,
        latent_dim=resolved["model.recon_latent_dim"],
        net_width=resolved["model.recon_width"],
        freq_cutoff=resolved["model.freq_cutoff"],
    )
    model, history = pl.train_reconstruction(
        batch,
        model,
        cfg,
        sched,
        weights,
        flags,
        mask=mask,
        seed=resolved["seed"],
        out_dir=resolved["out"],
        observe_ntk=resolved["observe_ntk"],
    )
    print(f"trained {len(history)} steps; final total loss {history[-1]['total']:.6g}")
    return {"images": int(batch.images.shape[0]), "steps": len(history)}


def run_evaluate(resolved: dict) -> dict:
    model, _ = load_deeponet(_require(resolved, "checkpoint", "to load the trained model"))
    task = resolved["eval_task"]
    if task == "localization":
        records, _ = load_dataset(_require(resolved, "dataset", "to locate the fluids dataset"))
        summary = pl.evaluate(model, records, task="localization", out_dir=resolved["out"])
        print(
            f"location error {summary['location_error_mean']:.4f} "
            f"± {summary['location_error_std']:.4f} over {summary['n_samples']} samples"
        )
        return summary
    if task == "reconstruction":
        batch = _load_images(resolved)
        reports = pl.evaluate(
            model,
            batch,
            task="reconstruction",
            mask=_mask(resolved),
            seed=resolved["seed"],
            out_dir=resolved["out"],
        )
        rec, cor = reports["reconstructed"], reports["corrupted"]
        print(
            f"psnr {rec.psnr_mean:.4f} ± {rec.psnr_std:.4f} "
            f"(corrupted baseline {cor.psnr_mean:.4f})"
        )
        return {"psnr_mean": rec.psnr_mean, "baseline_psnr_mean": cor.psnr_mean}
    raise ConfigError(f"eval_task must be localization or reconstruction, got {task!r}")


def run_ablation_task(resolved: dict) -> dict:
    cfg, sched = _optimizer(resolved), _schedule(resolved)
    weights, mask = _weights(resolved), _mask(resolved)
    batch = _load_images(resolved)
    rows = pl.run_ablation(
        batch,
        cfg,
        sched,
        weights,
        mask=mask,
        seed=resolved["seed"],
        out_dir=resolved["out"],
        latent_dim=resolved["model.recon_latent_dim"],
        net_width=resolved["model.recon_width"],
    )
    for row in rows:
        print(
            f"ntk={row['use_ntk']} se={row['use_se']}: "
            f"psnr={row['psnr']:.4f} ssim={row['ssim']:.4f} mse={row['mse']:.6g}"
        )
    return {"rows": len(rows)}


def run_ntk_report(resolved: dict) -> dict:
    model, _ = load_deeponet(_require(resolved, "checkpoint", "to load the trained model"))
    records, _ = load_dataset(_require(resolved, "dataset", "to locate the fluids dataset"))
    probe = records[0]
    gram = assemble_gram(model, list(probe.labels), ReceiverSet(probe.receivers))
    schedule = _schedule(resolved)
    note = ""
    try:
        lr = adapt_lr(gram, schedule)
    except DegenerateKernelError as err:
        lr = schedule.base_lr
        note = str(err)
    row = report_row(gram, 0.0, lr)
    out_dir = resolved["out"]
    os.makedirs(out_dir, exist_ok=True)
    write_report(os.path.join(out_dir, "ntk_report.csv"), [row])
    with open(os.path.join(out_dir, "spectrum.csv"), "w") as f:
        f.write("index,eigenvalue\n")
        for i, lam in enumerate(gram.eigenvalues):
            f.write(f"{i},{lam!r}\n")
    print(
        f"lambda_max={row['lambda_max']:.6g} lambda_min_pos={row['lambda_min_pos']:.6g} "
        f"adapted_lr={lr:.6g}" + (f" ({note})" if note else "")
    )
    return {"lambda_max": row["lambda_max"], "adapted_lr": lr}


_RUNNERS = {
    "datagen": run_datagen,
    "train-fluids": run_train_fluids,
    "train-images": run_train_images,
    "evaluate": run_evaluate,
    "ablation": run_ablation_task,
    "ntk-report": run_ntk_report,
}

# exception class -> (exit code, category); first match wins, so subclasses
# must precede their parents (FileNotFoundError before OSError)
_EXIT_MAP: tuple[tuple[type, int, str], ...] = (
    (ConfigError, 2, "config"),
    (ParameterError, 2, "config"),
    (SpecError, 2, "config"),
    (DataError, 3, "data"),
    (FormatError, 3, "data"),
    (DimensionError, 3, "data"),
    (FileNotFoundError, 3, "data"),
    (NumericError, 4, "numeric"),
    (StabilityError, 4, "numeric"),
    (SolverError, 4, "numeric"),
    (DegenerateKernelError, 4, "numeric"),
    (ContractViolation, 4, "numeric"),
    (FloatingPointError, 4, "numeric"),
    (ResourceError, 5, "resource"),
    (MemoryError, 5, "resource"),
    (OSError, 5, "resource"),
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="opinet",
        description="Operator-network training, evaluation, and diagnostics.",
    )
    sub = parser.add_subparsers(dest="task", required=True)
    for task in TASKS:
        p = sub.add_parser(task)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help="output directory")
        p.add_argument(
            "--set",
            action="append",
            metavar="PATH=VALUE",
            help="override any config leaf, e.g. --set ntk.period=50",
        )
        p.add_argument("--dataset", help="fluids dataset directory")
        p.add_argument("--images", help="IDX image file")
        p.add_argument("--labels", help="IDX label file")
        p.add_argument("--checkpoint", help="model checkpoint path")
        p.add_argument("--limit", type=int, help="cap on images loaded")
        p.add_argument("--max-steps", dest="max_steps", type=int)
        p.add_argument("--eval-task", dest="eval_task", choices=("localization", "reconstruction"))
        p.add_argument("--lr", type=float)
        p.add_argument("--batch", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--gamma", type=float)
        p.add_argument("--delta", type=float)
        p.add_argument("--period", type=int)
        p.add_argument("--mask-side", dest="mask_side", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        resolved = resolve_config(args)
        derived = _RUNNERS[args.task](resolved)
        write_manifest(args.task, resolved, derived)
        return 0
    except tuple(cls for cls, _, _ in _EXIT_MAP) as err:
        for cls, code, category in _EXIT_MAP:
            if isinstance(err, cls):
                print(f"error[{category}]: {err}", file=sys.stderr)
                return code
        raise  # unreachable


if __name__ == "__main__":
    sys.exit(main())

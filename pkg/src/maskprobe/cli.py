"""Command-line entry point: ``maskprobe <verb> [--config run.toml] [flags]``.

Configuration precedence, lowest to highest: built-in defaults, the TOML
file, ``MASKPROBE_SEED`` (seed only), explicit flags.  Unknown keys in the
file are rejected before any work starts.

Every verb except ``gen-data`` and ``verify`` writes into
``<runs_dir>/<run_id>/`` and records a ``run_manifest.json`` listing each
artifact with its SHA-256.  stdout carries machine-readable paths only;
human messages go to stderr.

Exit codes::

    0  success
    1  verification or analysis failure
    2  configuration error
    3  I/O error (including a held run lock)
    4  divergence
    5  freeze-contract violation (or missing target checkpoint for train-mask)
    6  missing dependency (dataset, checkpoint, sweep table)
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import platform
import re
import sys
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, analysis
from .core import DEFAULT_EPS, Image, Mask, apply_mask, binarize, sparseness
from .errors import (
    AnalysisError,
    ConfigError,
    ContractViolation,
    DependencyError,
    DivergenceError,
    MaskProbeError,
    ParameterError,
)
from .io import ArtifactIOError, sha256_file, write_blob, write_png
from .losses import LOSS_COMBOS, l_depth, l_dif, l_grad, l_normal
from .models import (
    CheckpointError,
    build_depth_net,
    build_mask_net,
    freeze,
    load_checkpoint,
    parameter_digest,
    save_checkpoint,
)
from .optimize import (
    DEFAULT_EPOCHS,
    DEFAULT_LAMBDA,
    DEFAULT_LR,
    DEFAULT_WD,
    optimize_mask_direct,
    train_depth_net,
    train_mask_net,
)
from .synthgen import SyntheticDataset, build_dataset, config_hash, dataset_config

log = logging.getLogger("maskprobe")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_FREEZE, EXIT_MISSING = 0, 1, 2, 3, 4, 5, 6
SEED_ENV = "MASKPROBE_SEED"


class FreezeContractExit(ContractViolation):
    """Raised for train-mask preconditions that map to the freeze-contract exit code."""


def _floats(value) -> tuple[float, ...]:
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    if isinstance(value, (int, float)):
        value = [value]
    try:
        return tuple(float(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"expected a list of numbers, got {value!r}") from exc


def _ints(value) -> tuple[int, ...]:
    vals = _floats(value)
    if any(v != int(v) for v in vals):
        raise ConfigError(f"expected a list of integers, got {value!r}")
    return tuple(int(v) for v in vals)


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
        return value.lower() in ("true", "1")
    raise ConfigError(f"expected a boolean, got {value!r}")


COMMON = {
    "seed": (int, 0, "random seed (MASKPROBE_SEED overrides the file value)"),
    "runs_dir": (str, "runs", "parent directory of run directories"),
    "resume": (_bool, False, "reuse the latest run with the same config; skip if its artifacts are intact"),
}
DATA = {"data": (str, "data", "dataset directory produced by gen-data")}
TARGET = {"target": (str, None, "target-network checkpoint directory")}
MASK_TRAIN = {
    "epochs": (int, DEFAULT_EPOCHS, "training epochs"),
    "lr": (float, DEFAULT_LR, "Adam learning rate"),
    "wd": (float, DEFAULT_WD, "Adam weight decay"),
    "batch_size": (int, 16, "minibatch size"),
    "eps": (float, DEFAULT_EPS, "binarization threshold"),
}

SCHEMAS = {
    "gen-data": {
        "seed": (int, 1, "dataset seed"),
        "n": (int, 200, "number of samples"),
        "out": (str, "data", "output directory"),
        "split": (_floats, (0.8, 0.1, 0.1), "train,val,test ratios"),
        "difficulty": (str, "corridor", "planes, corridor, cluttered or mixed"),
        "height": (int, 64, "image height"),
        "width": (int, 64, "image width"),
    },
    "train-target": {
        **COMMON, **DATA,
        "arch": (str, "depthnet-small", "depth architecture id"),
        "loss_combo": (str, "d+g+n", f"one of {list(LOSS_COMBOS)}"),
        "epochs": (int, analysis.DEFAULT_TARGET_TRAINING["epochs"], "training epochs"),
        "lr": (float, analysis.DEFAULT_TARGET_TRAINING["lr"], "Adam learning rate"),
        "wd": (float, 0.0, "Adam weight decay"),
        "batch_size": (int, 16, "minibatch size"),
    },
    "train-mask": {
        **COMMON, **DATA, **TARGET, **MASK_TRAIN,
        "lambda": (float, DEFAULT_LAMBDA, "sparsity weight"),
        "variant": (str, "preserve", "preserve or delete"),
        "arch": (str, "masknet-small", "mask architecture id"),
    },
    "optimize-direct": {
        **COMMON, **DATA, **TARGET,
        "lambda": (float, DEFAULT_LAMBDA, "sparsity weight"),
        "steps": (int, 300, "Adam steps per image"),
        "lr": (float, 0.05, "learning rate on mask logits"),
        "wd": (float, 0.0, "weight decay on mask logits"),
        "eps": (float, DEFAULT_EPS, "binarization threshold"),
        "input": (str, None, "sample id (e.g. 00003 or sample_003); default: whole test split"),
    },
    "sweep": {
        **COMMON, **DATA, **TARGET,
        "lambdas": (_floats, analysis.DEFAULT_LAMBDAS, "comma-separated lambda values"),
        "seeds": (_ints, (0,), "comma-separated mask-network seeds"),
        "epochs": (int, analysis.DEFAULT_MASK_TRAINING["epochs"], "training epochs per cell"),
        "lr": (float, analysis.DEFAULT_MASK_TRAINING["lr"], "Adam learning rate"),
        "wd": (float, analysis.DEFAULT_MASK_TRAINING["weight_decay"], "Adam weight decay"),
        "batch_size": (int, 16, "minibatch size"),
        "eps": (float, DEFAULT_EPS, "binarization threshold"),
    },
    "edge-baseline": {
        **COMMON, **DATA, **TARGET,
        "sweep": (str, None, "sweep.csv with learned-mask rows"),
        "thresholds": (_floats, analysis.DEFAULT_EDGE_GRID, "edge-map thresholds"),
        "tolerance": (float, 0.05, "maximum sparseness gap for a matched pair"),
    },
    "ablation": {
        **COMMON, **DATA,
        "lambda": (float, 2.0, "sparsity weight for every combination"),
        "seeds": (_ints, (0,), "mask-network seeds"),
        "target_epochs": (int, analysis.DEFAULT_TARGET_TRAINING["epochs"], "epochs per target network"),
        "target_lr": (float, analysis.DEFAULT_TARGET_TRAINING["lr"], "target learning rate"),
        "epochs": (int, analysis.DEFAULT_MASK_TRAINING["epochs"], "mask-network epochs"),
        "lr": (float, analysis.DEFAULT_MASK_TRAINING["lr"], "mask-network learning rate"),
        "eps": (float, DEFAULT_EPS, "binarization threshold"),
    },
    "visualize": {
        **COMMON, **DATA, **TARGET,
        "mask": (str, None, "mask-network checkpoint directory"),
        "input": (str, None, "sample id (e.g. 00003 or sample_003)"),
        "colormap": (str, "heat", f"depth colormap: {sorted(analysis.COLORMAPS)}"),
    },
    "verify": {
        "data": (str, None, "optional dataset directory whose file digests are checked"),
        "checkpoint": (str, None, "optional checkpoint directory whose digest is checked"),
    },
}


def load_config(verb: str, path=None, overrides: dict | None = None, env=None) -> dict:
    """Resolve the configuration for ``verb``; raises ConfigError on unknown or malformed keys."""
    schema = SCHEMAS[verb]
    raw: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys for {verb}: {unknown}")
    env = os.environ if env is None else env
    if "seed" in schema and env.get(SEED_ENV):
        raw["seed"] = env[SEED_ENV]
    for key, value in (overrides or {}).items():
        if key not in schema:
            raise ConfigError(f"unknown option for {verb}: {key}")
        if value is not None:
            raw[key] = value
    cfg = {}
    for key, (kind, default, _) in schema.items():
        value = raw.get(key, default)
        if value is None:
            cfg[key] = None
            continue
        try:
            cfg[key] = kind(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: cannot interpret {value!r}") from exc
    _validate(verb, cfg)
    return cfg


def _validate(verb, cfg):
    for key in ("epochs", "steps", "n", "batch_size", "height", "width", "target_epochs"):
        if key in cfg and cfg[key] is not None and cfg[key] < 1:
            raise ConfigError(f"{key} must be >= 1")
    for key in ("lr", "target_lr"):
        if key in cfg and not (math.isfinite(cfg[key]) and cfg[key] > 0):
            raise ConfigError(f"{key} must be > 0")
    if "wd" in cfg and cfg["wd"] < 0:
        raise ConfigError("wd must be >= 0")
    if "lambda" in cfg and not (math.isfinite(cfg["lambda"]) and cfg["lambda"] >= 0):
        raise ConfigError("lambda must be >= 0")
    if "eps" in cfg and not 0 <= cfg["eps"] <= 1:
        raise ConfigError("eps must lie in [0, 1]")
    if verb == "gen-data":
        split = cfg["split"]
        if len(split) != 3 or any(r < 0 for r in split) or abs(sum(split) - 1) > 1e-9:
            raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {split}")
        if cfg["difficulty"] not in ("planes", "corridor", "cluttered", "mixed"):
            raise ConfigError(f"unknown difficulty {cfg['difficulty']!r}")
    if verb == "train-target" and cfg["loss_combo"] not in LOSS_COMBOS:
        raise ConfigError(f"loss_combo must be one of {list(LOSS_COMBOS)}")
    if verb == "train-mask" and cfg["variant"] not in ("preserve", "delete"):
        raise ConfigError("variant must be 'preserve' or 'delete'")
    if verb == "sweep" and (not cfg["lambdas"] or not cfg["seeds"]):
        raise ConfigError("sweep needs at least one lambda and one seed")
    if verb == "visualize" and cfg["colormap"] not in analysis.COLORMAPS:
        raise ConfigError(f"colormap must be one of {sorted(analysis.COLORMAPS)}")


# run directories

@contextmanager
def file_lock(directory: Path):
    """Exclusive lock file; a second process on the same directory gets an I/O error."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise ArtifactIOError(f"{directory} is locked by another process (remove {lock} if stale)") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


class Run:
    """A run directory plus the manifest entries collected while it executes."""

    def __init__(self, verb: str, cfg: dict):
        self.verb, self.cfg = verb, cfg
        identity = {k: v for k, v in _jsonable(cfg).items() if k not in ("resume", "runs_dir")}
        self.hash = config_hash({"verb": verb, **identity})
        root = Path(cfg["runs_dir"])
        prefix = f"{verb}-{self.hash[:10]}-"
        existing = sorted(p for p in root.glob(prefix + "*") if p.is_dir()) if root.exists() else []
        if cfg.get("resume") and existing:
            self.dir = existing[-1]
        else:
            self.dir = root / f"{prefix}{len(existing):03d}"
        self.id = self.dir.name
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.started = time.time()

    @property
    def manifest_path(self) -> Path:
        return self.dir / "run_manifest.json"

    def up_to_date(self) -> bool:
        if not (self.cfg.get("resume") and self.manifest_path.exists()):
            return False
        doc = json.loads(self.manifest_path.read_text())
        if doc.get("config_hash") != self.hash:
            return False
        for item in doc["outputs"]:
            p = self.dir / item["path"]
            if not p.exists() or sha256_file(p) != item["sha256"]:
                return False
        return True

    def add_input(self, path: Path):
        """Record the digest of an input file, or of a checkpoint/dataset manifest and blob."""
        path = Path(path)
        files = [path] if path.is_file() else [path / n for n in ("manifest.json", "params.bin") if (path / n).exists()]
        for f in files:
            self.inputs[str(f)] = sha256_file(f)

    def add_output(self, path: Path) -> Path:
        self.outputs.append(Path(path))
        return Path(path)

    def write_manifest(self) -> Path:
        outputs = []
        for p in self.outputs:
            files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
            outputs += [{"path": str(f.relative_to(self.dir)), "sha256": sha256_file(f)} for f in files]
        doc = {
            "run_id": self.id,
            "verb": self.verb,
            "config": _jsonable(self.cfg),
            "config_hash": self.hash,
            "versions": {"maskprobe": __version__, "torch": torch.__version__, "numpy": np.__version__,
                         "python": platform.python_version()},
            "inputs": self.inputs,
            "outputs": outputs,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(self.started)),
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        }
        self.manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return self.manifest_path


def _jsonable(cfg: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}


@contextmanager
def run_context(verb: str, cfg: dict):
    run = Run(verb, cfg)
    with file_lock(run.dir):
        yield run
        run.write_manifest()


def _say(msg: str):
    print(msg, file=sys.stderr)


# loading helpers

def _load_dataset(path, with_cues: bool = False) -> SyntheticDataset:
    if path is None or not (Path(path) / "manifest.json").exists():
        raise DependencyError(f"missing dataset: {Path(path or '?') / 'manifest.json'}")
    return SyntheticDataset.load(path, with_cues=with_cues)


def _load_target(path, freeze_exit: bool = False):
    manifest = Path(path or "?") / "manifest.json"
    exc_type = FreezeContractExit if freeze_exit else DependencyError
    if path is None or not manifest.exists():
        raise exc_type(f"missing target checkpoint: {manifest}")
    if not json.loads(manifest.read_text()).get("digest"):
        raise exc_type(f"target checkpoint has no parameter digest: {manifest}")
    net, meta = load_checkpoint(path)
    if meta["role"] != "depth":
        raise exc_type(f"{path} is a {meta['role']} checkpoint, expected a target (depth) network")
    return freeze(net), meta


def _sample_index(dataset: SyntheticDataset, name: str) -> int:
    if name in dataset.ids:
        return dataset.ids.index(name)
    m = re.search(r"(\d+)$", name)
    if m and int(m.group(1)) < len(dataset):
        return int(m.group(1))
    raise DependencyError(f"missing sample {name!r} in dataset {dataset.root}")


def _sample_tensors(dataset: SyntheticDataset, idx: int):
    x_all, y_all = dataset.tensors("all")
    return x_all[idx:idx + 1], y_all[idx:idx + 1]


# commands

def cmd_gen_data(cfg: dict) -> Path:
    """Render a synthetic dataset; a no-op when an intact copy already exists."""
    out = Path(cfg["out"])
    wanted = dataset_config(cfg["n"], cfg["seed"], cfg["split"], cfg["difficulty"], cfg["height"], cfg["width"])
    manifest = out / "manifest.json"
    if manifest.exists():
        doc = json.loads(manifest.read_text())
        if doc.get("config_hash") == config_hash(wanted) and _dataset_intact(out, doc):
            _say(f"dataset {out} is up-to-date")
            return manifest
    with file_lock(out):
        path = build_dataset(out, cfg["n"], cfg["seed"], cfg["split"], cfg["difficulty"], cfg["height"],
                             cfg["width"])
    _say(f"wrote {cfg['n']} samples to {out}")
    return path


def _dataset_intact(root: Path, doc: dict) -> bool:
    for sid, digests in doc["files"].items():
        for kind, name in (("image", f"samples/{sid}.img.bin"), ("depth", f"samples/{sid}.depth.bin"),
                           ("cues", f"cues/{sid}.json")):
            p = root / name
            if not p.exists() or sha256_file(p) != digests[kind]:
                return False
    return True


def cmd_train_target(cfg: dict) -> Path:
    """Train the target depth network with the selected loss sum."""
    dataset = _load_dataset(cfg["data"])
    with run_context("train-target", cfg) as run:
        if run.up_to_date():
            _say(f"{run.dir} is up-to-date")
            return run.dir / "target"
        run.add_input(Path(cfg["data"]) / "manifest.json")
        x, y = dataset.tensors("train")
        xv, yv = dataset.tensors("val")
        net = build_depth_net({"arch": cfg["arch"], "seed": cfg["seed"], "init_depth": float(y.mean())})
        net, report = train_depth_net(net, x, y, cfg["loss_combo"], epochs=cfg["epochs"], lr=cfg["lr"],
                                      seed=cfg["seed"], batch_size=cfg["batch_size"], weight_decay=cfg["wd"],
                                      val_images=xv if len(xv) else None, val_depths=yv if len(yv) else None,
                                      metrics_csv=run.dir / "metrics.csv")
        ckpt = save_checkpoint(net, run.dir / "target", "depth", cfg["epochs"], report.config)
        report.to_json(run.dir / "train_report.json")
        for p in (ckpt, run.dir / "metrics.csv", run.dir / "train_report.json"):
            run.add_output(p)
    _say(f"target network trained; final train RMSE {report.epochs[-1]['train_rmse']:.4f}")
    return ckpt


def cmd_train_mask(cfg: dict) -> Path:
    """Train G against a frozen target checkpoint; returns the run directory."""
    target, _ = _load_target(cfg["target"], freeze_exit=True)
    dataset = _load_dataset(cfg["data"])
    with run_context("train-mask", cfg) as run:
        if run.up_to_date():
            _say(f"{run.dir} is up-to-date")
            return run.dir
        run.add_input(Path(cfg["target"]))
        run.add_input(Path(cfg["data"]) / "manifest.json")
        x, _ = dataset.tensors("train")
        g = build_mask_net({"arch": cfg["arch"], "seed": cfg["seed"]})
        g, report = train_mask_net(g, target, x, lam=cfg["lambda"], epochs=cfg["epochs"], lr=cfg["lr"],
                                   weight_decay=cfg["wd"], seed=cfg["seed"], batch_size=cfg["batch_size"],
                                   variant=cfg["variant"], eps=cfg["eps"], metrics_csv=run.dir / "metrics.csv")
        ckpt = save_checkpoint(g, run.dir / "mask", "mask", cfg["epochs"],
                               {**report.config, "target_digest": report.target_digest_before})
        report.to_json(run.dir / "train_report.json")
        xt, yt = dataset.tensors("test")
        rows = [analysis.evaluate_mask_net(target, g, xt, yt, cfg["lambda"], cfg["seed"], cfg["eps"])] if len(xt) else []
        analysis.write_sweep_csv(rows, run.dir / "sweep.csv")
        for p in (ckpt, run.dir / "metrics.csv", run.dir / "train_report.json", run.dir / "sweep.csv"):
            run.add_output(p)
    _say(f"mask network trained; final sparseness {report.final_sparseness:.3f}")
    return run.dir


def cmd_optimize_direct(cfg: dict) -> Path:
    """Optimize one mask per image directly against the frozen target."""
    target, _ = _load_target(cfg["target"])
    dataset = _load_dataset(cfg["data"])
    if cfg["input"] is not None:
        idx = [_sample_index(dataset, cfg["input"])]
    else:
        idx = dataset.indices("test")
    with run_context("optimize-direct", cfg) as run:
        run.add_input(Path(cfg["target"]))
        x_all, _ = dataset.tensors("all")
        results = []
        for i in idx:
            res = optimize_mask_direct(target, x_all[i:i + 1], cfg["lambda"], steps=cfg["steps"], lr=cfg["lr"],
                                       weight_decay=cfg["wd"])
            m = res.mask[0, 0].double().clamp(0, 1).numpy()
            sid = dataset.ids[i]
            run.add_output(write_blob(Mask(m), run.dir / "masks" / f"{sid}.mask.bin"))
            run.add_output(run.dir / "masks" / f"{sid}.mask.json")
            run.add_output(write_png(m, run.dir / "masks" / f"{sid}.png"))
            results.append({"id": sid, "objective": res.objective, "initial_objective": res.initial_objective,
                            "sparseness": sparseness(binarize(Mask(m), cfg["eps"])).fraction_nonzero})
        report = analysis.write_report({"lambda": cfg["lambda"], "results": results}, run.dir / "direct.json", cfg)
        run.add_output(report)
    return run.dir


def cmd_sweep(cfg: dict) -> Path:
    """Train one mask network per (lambda, seed) and tabulate RMSE against sparseness."""
    target, _ = _load_target(cfg["target"])
    dataset = _load_dataset(cfg["data"])
    with run_context("sweep", cfg) as run:
        if run.up_to_date():
            _say(f"{run.dir} is up-to-date")
            return run.dir / "sweep.csv"
        run.add_input(Path(cfg["target"]))
        training = {"epochs": cfg["epochs"], "lr": cfg["lr"], "weight_decay": cfg["wd"],
                    "batch_size": cfg["batch_size"]}
        nets = analysis.train_sweep_masks(target, dataset, cfg["lambdas"], cfg["seeds"], training)
        for (lam, seed), g in nets.items():
            run.add_output(save_checkpoint(g, run.dir / "masks" / f"lam{lam:g}_seed{seed}", "mask", cfg["epochs"],
                                           {**training, "lambda": lam}))
        rows = analysis.lambda_sweep(target, dataset, cfg["lambdas"], cfg["eps"], cfg["seeds"], mask_nets=nets,
                                     csv_path=run.dir / "sweep.csv")
        run.add_output(run.dir / "sweep.csv")
        run.add_output(analysis.write_report({"summary": analysis.summarize_sweep(rows)},
                                             run.dir / "sweep_summary.json", cfg))
    return run.dir / "sweep.csv"


def cmd_edge_baseline(cfg: dict) -> Path:
    """Compare learned masks with thresholded Sobel edge masks at matched sparseness."""
    target, _ = _load_target(cfg["target"])
    dataset = _load_dataset(cfg["data"])
    if cfg["sweep"] is None or not Path(cfg["sweep"]).exists():
        raise DependencyError(f"missing sweep table: {cfg['sweep']}")
    rows = analysis.read_sweep_csv(cfg["sweep"])
    with run_context("edge-baseline", cfg) as run:
        run.add_input(Path(cfg["target"]))
        run.add_input(Path(cfg["sweep"]))
        cmp = analysis.edge_baseline(target, dataset, rows, cfg["thresholds"], cfg["tolerance"])
        path = analysis.write_report(cmp.to_dict(), run.dir / "edge_baseline.json", cfg)
        run.add_output(path)
    return path


def cmd_ablation(cfg: dict) -> Path:
    """Learn masks for targets trained with each loss combination."""
    dataset = _load_dataset(cfg["data"])
    with run_context("ablation", cfg) as run:
        run.add_input(Path(cfg["data"]) / "manifest.json")
        targets = analysis.train_ablation_targets(dataset, cfg["seed"], {"epochs": cfg["target_epochs"],
                                                                         "lr": cfg["target_lr"]})
        for combo, net in targets.items():
            run.add_output(save_checkpoint(net, run.dir / "targets" / combo.replace("+", "_"), "depth",
                                           cfg["target_epochs"], {"loss_combo": combo}))
        report = analysis.loss_ablation(dataset, cfg["lambda"], cfg["seeds"], targets,
                                        mask_training={"epochs": cfg["epochs"], "lr": cfg["lr"]}, eps=cfg["eps"])
        xt, yt = dataset.tensors("test")
        first = dataset.indices("test")[0]
        for (combo, seed), masks in report.masks.items():
            with torch.no_grad():
                pred = targets[combo](xt[:1] * torch.from_numpy(masks[:1, None]).float())[0, 0].double().numpy()
            fig = analysis.render_overlay(dataset.images[first], masks[0], pred, yt[0, 0].double().numpy(),
                                          run.dir / "figures" / f"ablation_{combo.replace('+', '_')}_seed{seed}.png")
            run.add_output(fig.path)
        run.add_output(analysis.write_report(report.to_dict(), run.dir / "ablation.json", cfg))
    return run.dir / "ablation.json"


def cmd_visualize(cfg: dict) -> Path:
    """Write a four-panel overlay and cue statistics for one sample."""
    target, _ = _load_target(cfg["target"])
    if cfg["mask"] is None or not (Path(cfg["mask"]) / "manifest.json").exists():
        raise DependencyError(f"missing mask checkpoint: {Path(cfg['mask'] or '?') / 'manifest.json'}")
    g, _ = load_checkpoint(cfg["mask"])
    dataset = _load_dataset(cfg["data"], with_cues=True)
    idx = _sample_index(dataset, cfg["input"]) if cfg["input"] else dataset.indices("test")[0]
    x, y = _sample_tensors(dataset, idx)
    with run_context("visualize", cfg) as run:
        with torch.no_grad():
            m = g(x)
            pred = target(x * m)
        mask = m[0, 0].double().clamp(0, 1).numpy()
        sid = dataset.ids[idx]
        fig = analysis.render_overlay(dataset.images[idx], mask, pred[0, 0].double().numpy(),
                                      y[0, 0].double().numpy(), run.dir / "figures" / f"{sid}.png", cfg["colormap"])
        run.add_output(fig.path)
        stats = analysis.mask_statistics(mask, dataset.cues[idx])
        run.add_output(analysis.write_report({"sample": sid, **stats}, run.dir / f"mask_stats_{sid}.json", cfg))
    return fig.path


def verify_invariants() -> list[tuple[str, bool, str]]:
    """Fast self-checks of the core contracts; returns (name, ok, detail) triples."""
    checks = []
    rng = np.random.default_rng(0)
    y = torch.from_numpy(rng.uniform(1, 5, size=(3, 8, 8)))
    ln_half = math.log(0.5)
    for name, fn, expected in (("l_depth(Y,Y)", l_depth, ln_half), ("l_grad(Y,Y)", l_grad, 2 * ln_half),
                               ("l_normal(Y,Y)", l_normal, 0.0), ("l_dif(Y,Y)", lambda a, b: l_dif(a, b).l_dif,
                                                                  3 * ln_half)):
        err = abs(float(fn(y, y)) - expected)
        checks.append((name, err < 1e-9, f"error {err:.2e}"))
    img = Image(rng.normal(size=(8, 8, 3)))
    checks.append(("identity mask", apply_mask(img, Mask.ones(8, 8)).data.tobytes() == img.data.tobytes(), ""))
    m = np.zeros((8, 8))
    m[0, 0] = DEFAULT_EPS
    checks.append(("binarize tie", binarize(Mask(m)).data[0, 0] == 1.0, "value equal to eps maps to 1"))
    rows = [analysis.SweepRow(0.5, 1.0 / 3, 2.0 / 7, 0.1, 0)]
    text = analysis.sweep_csv_text(rows)
    with tempfile.TemporaryDirectory() as tmp:
        p = analysis.write_sweep_csv(rows, Path(tmp) / "s.csv")
        ok = analysis.sweep_csv_text(analysis.read_sweep_csv(p)) == text
    checks.append(("sweep csv round trip", ok, ""))
    n = freeze(build_depth_net({"arch": "depthnet-small", "seed": 0, "widths": (4, 4, 4, 4)}))
    g = build_mask_net({"arch": "masknet-small", "seed": 0, "widths": (4, 4, 4, 4)})
    before = parameter_digest(n)
    x = torch.from_numpy(rng.normal(size=(4, 3, 16, 16)).astype(np.float32))
    train_mask_net(g, n, x, lam=1.0, epochs=1, lr=1e-3, batch_size=2)
    checks.append(("freeze contract", parameter_digest(n) == before, "target digest unchanged after training G"))
    return checks


def cmd_verify(cfg: dict) -> bool:
    """Run the built-in invariant checks and optional digest checks."""
    checks = verify_invariants()
    if cfg["data"] is not None:
        doc_path = Path(cfg["data"]) / "manifest.json"
        if not doc_path.exists():
            raise DependencyError(f"missing dataset: {doc_path}")
        checks.append(("dataset digests", _dataset_intact(Path(cfg["data"]), json.loads(doc_path.read_text())), ""))
    if cfg["checkpoint"] is not None:
        try:
            load_checkpoint(cfg["checkpoint"])
            checks.append(("checkpoint digest", True, ""))
        except ContractViolation as exc:
            checks.append(("checkpoint digest", False, str(exc)))
    for name, ok, detail in checks:
        _say(f"{'PASS' if ok else 'FAIL'} {name}{' (' + detail + ')' if detail else ''}")
    return all(ok for _, ok, _ in checks)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-target": cmd_train_target,
    "train-mask": cmd_train_mask,
    "optimize-direct": cmd_optimize_direct,
    "sweep": cmd_sweep,
    "edge-baseline": cmd_edge_baseline,
    "ablation": cmd_ablation,
    "visualize": cmd_visualize,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskprobe", description=__doc__.split("\n\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, schema in SCHEMAS.items():
        p = sub.add_parser(verb, help=(COMMANDS[verb].__doc__ or verb).split("\n")[0])
        p.add_argument("--config", help="TOML file with keys for this command")
        for key, (kind, default, help_text) in schema.items():
            flag = "--" + key.replace("_", "-")
            if kind is _bool:
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=help_text)
            else:
                p.add_argument(flag, dest=key, default=None, help=f"{help_text} (default: {default})")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k in SCHEMAS[args.verb]}
    try:
        cfg = load_config(args.verb, args.config, overrides)
        result = COMMANDS[args.verb](cfg)
    except (ConfigError, ParameterError) as exc:
        _say(f"config error: {exc}")
        return EXIT_CONFIG
    except DivergenceError as exc:
        _say(f"diverged: {exc}")
        return EXIT_DIVERGED
    except ContractViolation as exc:
        _say(f"freeze contract: {exc}")
        return EXIT_FREEZE
    except DependencyError as exc:
        _say(f"missing dependency: {exc}")
        return EXIT_MISSING
    except (ArtifactIOError, CheckpointError, OSError) as exc:
        _say(f"I/O error: {exc}")
        return EXIT_IO
    except (AnalysisError, MaskProbeError) as exc:
        _say(f"error: {exc}")
        return EXIT_FAIL
    if args.verb == "verify":
        return EXIT_OK if result else EXIT_FAIL
    print(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

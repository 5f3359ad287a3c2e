"""Experiment protocols run on top of a trained target network.

* ``lambda_sweep``: accuracy against sparseness for several values of lambda;
* ``edge_baseline``: learned masks against thresholded Sobel edge maps at
  matched sparseness;
* ``loss_ablation``: masks learned for targets trained with different loss sums;
* ``render_overlay`` and ``mask_statistics`` for figures and cue reports.

Everything here reads networks and never updates a target network.  JSON
reports carry ``REPORT_NOTE``: at desk scale only the direction of a trend
is meaningful.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from .core import DEFAULT_EPS, Image, Mask, edge_map, total_variation
from .errors import AnalysisError, DependencyError, DimensionError, ParameterError
from .io import ArtifactIOError, to_uint
from .losses import LOSS_COMBOS, rmse
from .models import build_depth_net, build_mask_net, freeze, is_frozen, parameter_digest
from .optimize import DEFAULT_WD, train_depth_net, train_mask_net
from .synthgen import config_hash

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("lambda", "rmse_m", "rmse_mprime", "sparseness", "seed")
DEFAULT_LAMBDAS = (0.5, 1.0, 2.0, 4.0, 8.0)
DEFAULT_EDGE_GRID = tuple(round(k / 100, 2) for k in range(101))
REPORT_NOTE = ("Desk-scale synthetic run: absolute values are trend templates only; "
               "compare directions (sparseness against lambda, RMSE against sparseness), not magnitudes.")

# Mask-network training used by the protocols.  The learning rate is ten times
# the single-run default so that ten epochs on a few hundred images move G.
DEFAULT_MASK_TRAINING = {
    "arch": "masknet-small",
    "epochs": 10,
    "lr": 1e-3,
    "weight_decay": DEFAULT_WD,
    "batch_size": 16,
    "variant": "preserve",
}
DEFAULT_TARGET_TRAINING = {
    "arch": "depthnet-small",
    "epochs": 60,
    "lr": 3e-3,
    "batch_size": 16,
}


@dataclass(frozen=True)
class SweepRow:
    lam: float
    rmse_m: float
    rmse_mprime: float
    sparseness: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.sparseness <= 1.0:
            raise ParameterError(f"sparseness must lie in [0, 1], got {self.sparseness}")
        if not (self.rmse_m >= 0 and self.rmse_mprime >= 0):
            raise ParameterError("RMSE values must be >= 0")

    def as_record(self) -> dict:
        return {"lambda": self.lam, "rmse_m": self.rmse_m, "rmse_mprime": self.rmse_mprime,
                "sparseness": self.sparseness, "seed": self.seed}


def _fmt(v) -> str:
    # repr of a Python float is the shortest string that parses back to the same value
    return repr(float(v)) if isinstance(v, float) else str(v)


def sweep_csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for row in rows:
        rec = row.as_record()
        writer.writerow([_fmt(rec[c]) for c in SWEEP_COLUMNS])
    return buf.getvalue()


def write_sweep_csv(rows, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(sweep_csv_text(rows))
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc
    return path


def read_sweep_csv(path) -> list[SweepRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SWEEP_COLUMNS:
            raise ArtifactIOError(f"{path}: expected columns {SWEEP_COLUMNS}, got {reader.fieldnames}")
        return [SweepRow(float(r["lambda"]), float(r["rmse_m"]), float(r["rmse_mprime"]),
                         float(r["sparseness"]), int(r["seed"])) for r in reader]


def summarize_sweep(rows) -> list[dict]:
    """Per-lambda means over seeds, sorted by lambda."""
    by_lam: dict[float, list[SweepRow]] = {}
    for r in rows:
        by_lam.setdefault(r.lam, []).append(r)
    out = []
    for lam in sorted(by_lam):
        group = by_lam[lam]
        out.append({
            "lambda": lam,
            "rmse_m": float(np.mean([r.rmse_m for r in group])),
            "rmse_mprime": float(np.mean([r.rmse_mprime for r in group])),
            "sparseness": float(np.mean([r.sparseness for r in group])),
            "seeds": sorted(r.seed for r in group),
        })
    return out


@torch.no_grad()
def predict_masks(mask_net, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    was_training = mask_net.training
    mask_net.eval()
    out = torch.cat([mask_net(images[i:i + batch_size]) for i in range(0, images.shape[0], batch_size)])
    mask_net.train(was_training)
    return out


@torch.no_grad()
def masked_rmse(target_net, images: torch.Tensor, depths: torch.Tensor, masks: torch.Tensor,
                batch_size: int = 64) -> float:
    """Mean per-image RMSE of ``N(x * m)`` against ``depths``."""
    if masks.shape[0] != images.shape[0] or masks.shape[-2:] != images.shape[-2:]:
        raise DimensionError(f"masks {tuple(masks.shape)} do not match images {tuple(images.shape)}")
    vals = []
    for i in range(0, images.shape[0], batch_size):
        sl = slice(i, i + batch_size)
        pred = target_net(images[sl] * masks[sl].to(images.dtype))
        vals.append(rmse(depths[sl], pred, per_image=True))
    return float(torch.cat(vals).mean())


def evaluate_mask_net(target_net, mask_net, images, depths, lam: float, seed: int,
                      eps: float = DEFAULT_EPS) -> SweepRow:
    m = predict_masks(mask_net, images)
    mb = (m >= eps).to(m.dtype)
    return SweepRow(float(lam), masked_rmse(target_net, images, depths, m),
                    masked_rmse(target_net, images, depths, mb), float(mb.double().mean()), int(seed))


def _require_frozen(target_net):
    if not is_frozen(target_net):
        raise DependencyError("target network must be a frozen, trained checkpoint")


def train_sweep_masks(target_net, dataset, lambdas=DEFAULT_LAMBDAS, seeds=(0,), training=None,
                      split: str = "train") -> dict:
    """Train one mask network per (lambda, seed) cell; returns ``{(lam, seed): G}``."""
    _require_frozen(target_net)
    cfg = {**DEFAULT_MASK_TRAINING, **(training or {})}
    arch_kwargs = dict(cfg.pop("model", {}))
    x, _ = dataset.tensors(split)
    nets = {}
    for lam in lambdas:
        for seed in seeds:
            g = build_mask_net({"arch": cfg["arch"], "seed": int(seed), **arch_kwargs})
            g, report = train_mask_net(g, target_net, x, lam=float(lam), epochs=cfg["epochs"], lr=cfg["lr"],
                                       weight_decay=cfg["weight_decay"], seed=int(seed),
                                       batch_size=cfg["batch_size"], variant=cfg["variant"])
            log.info("sweep cell lambda=%s seed=%s final sparseness %.3f", lam, seed, report.final_sparseness)
            nets[(float(lam), int(seed))] = g
    return nets


def lambda_sweep(target_net, dataset, lambdas=DEFAULT_LAMBDAS, eps: float = DEFAULT_EPS, seeds=(0,),
                 mask_nets: dict | None = None, training=None, split: str = "test", csv_path=None) -> list[SweepRow]:
    """One SweepRow per (lambda, seed), evaluated on ``split``.

    ``mask_nets`` maps ``(lam, seed)`` to a trained G; when it is omitted the
    networks are trained here with ``training`` overrides.
    """
    _require_frozen(target_net)
    if mask_nets is None:
        mask_nets = train_sweep_masks(target_net, dataset, lambdas, seeds, training)
    x, y = dataset.tensors(split)
    rows = []
    for lam in lambdas:
        for seed in seeds:
            key = (float(lam), int(seed))
            if key not in mask_nets:
                raise DependencyError(f"no trained mask network for lambda={lam}, seed={seed}")
            rows.append(evaluate_mask_net(target_net, mask_nets[key], x, y, lam, seed, eps))
    if csv_path is not None:
        write_sweep_csv(rows, csv_path)
    return rows


def sparseness_violations(means) -> list[float]:
    """Increases between consecutive per-lambda mean sparseness values."""
    return [b - a for a, b in zip(means, means[1:]) if b > a]


# edge-map baseline

@dataclass
class EdgeRow:
    threshold: float
    sparseness: float
    rmse: float


@dataclass
class EdgePair:
    threshold: float
    edge_sparseness: float
    edge_rmse: float
    lam: float
    seed: int
    learned_sparseness: float
    learned_rmse_m: float
    learned_rmse_mprime: float

    @property
    def gap(self) -> float:
        return abs(self.edge_sparseness - self.learned_sparseness)


@dataclass
class EdgeComparison:
    edge_rows: list[EdgeRow]
    pairs: list[EdgePair]
    tolerance: float

    def closest(self) -> EdgePair:
        return min(self.pairs, key=lambda p: (p.gap, p.threshold))

    def to_dict(self) -> dict:
        return {"note": REPORT_NOTE, "tolerance": self.tolerance,
                "edge_rows": [asdict(r) for r in self.edge_rows],
                "pairs": [{**asdict(p), "gap": p.gap} for p in self.pairs]}


def edge_maps_for(dataset, split: str = "test") -> np.ndarray:
    """Max-normalized Sobel magnitude of each raw image's luminance, (B, H, W)."""
    idx = dataset.indices(split)
    return np.stack([edge_map(Image(dataset.images[i].astype(np.float64))).data for i in idx])


def pair_nearest(edge_sparseness: float, learned_rows) -> SweepRow:
    """Learned row with the closest sparseness; ties go to the smaller lambda, then seed."""
    return min(learned_rows, key=lambda r: (abs(r.sparseness - edge_sparseness), r.lam, r.seed))


def edge_baseline(target_net, dataset, learned_rows, thresholds=DEFAULT_EDGE_GRID, tolerance: float = 0.05,
                  split: str = "test", edge_maps=None) -> EdgeComparison:
    """Compare thresholded edge masks with learned masks at matched sparseness.

    An edge mask keeps pixels whose normalized edge strength is >= the
    threshold, so threshold 0 keeps every pixel.  Pairs whose sparseness
    differs by more than ``tolerance`` are dropped.
    """
    _require_frozen(target_net)
    learned_rows = list(learned_rows)
    if not learned_rows:
        raise DependencyError("edge baseline needs at least one learned-mask SweepRow")
    x, y = dataset.tensors(split)
    maps = edge_maps_for(dataset, split) if edge_maps is None else np.asarray(edge_maps, dtype=np.float64)
    if maps.shape != (x.shape[0], *x.shape[-2:]):
        raise DimensionError(f"edge maps {maps.shape} do not match split images {tuple(x.shape)}")
    rows, pairs = [], []
    for thr in thresholds:
        m = torch.from_numpy((maps >= float(thr)).astype(np.float32))[:, None]
        row = EdgeRow(float(thr), float(m.double().mean()), masked_rmse(target_net, x, y, m))
        rows.append(row)
        match = pair_nearest(row.sparseness, learned_rows)
        pair = EdgePair(row.threshold, row.sparseness, row.rmse, match.lam, match.seed, match.sparseness,
                        match.rmse_m, match.rmse_mprime)
        if pair.gap <= tolerance:
            pairs.append(pair)
    if not pairs:
        raise AnalysisError(f"no edge threshold reaches a learned sparseness within {tolerance}")
    return EdgeComparison(rows, pairs, tolerance)


# loss ablation

@dataclass
class AblationEntry:
    combo: str
    seed: int
    target_digest: str
    sparseness: float
    rmse_m: float
    rmse_mprime: float
    mean_tv: float


@dataclass
class AblationReport:
    lam: float
    entries: list[AblationEntry] = field(default_factory=list)
    masks: dict = field(default_factory=dict)

    def mean_tv(self) -> dict:
        out = {}
        for combo in LOSS_COMBOS:
            vals = [e.mean_tv for e in self.entries if e.combo == combo]
            if vals:
                out[combo] = float(np.mean(vals))
        return out

    def to_dict(self) -> dict:
        return {"note": REPORT_NOTE, "lambda": self.lam, "combos": list(LOSS_COMBOS),
                "entries": [asdict(e) for e in self.entries], "mean_tv": self.mean_tv()}


def train_ablation_targets(dataset, seed: int = 0, training=None) -> dict:
    """One target network per loss combination, identical seed and data."""
    cfg = {**DEFAULT_TARGET_TRAINING, **(training or {})}
    x, y = dataset.tensors("train")
    targets = {}
    for combo in LOSS_COMBOS:
        net = build_depth_net({"arch": cfg["arch"], "seed": int(seed), "init_depth": float(y.mean())})
        net, _ = train_depth_net(net, x, y, combo, epochs=cfg["epochs"], lr=cfg["lr"], seed=int(seed),
                                 batch_size=cfg["batch_size"])
        targets[combo] = freeze(net)
    return targets


def loss_ablation(dataset, lam: float = 2.0, seeds=(0,), targets: dict | None = None, target_training=None,
                  mask_training=None, eps: float = DEFAULT_EPS, split: str = "test") -> AblationReport:
    """Train G at a fixed lambda against each loss-combination target and compare the masks."""
    if targets is None:
        targets = train_ablation_targets(dataset, seeds[0] if seeds else 0, target_training)
    missing = [c for c in LOSS_COMBOS if c not in targets]
    if missing:
        raise DependencyError(f"missing target networks for loss combinations {missing}")
    x, y = dataset.tensors(split)
    report = AblationReport(float(lam))
    for combo in LOSS_COMBOS:
        target = targets[combo]
        _require_frozen(target)
        nets = train_sweep_masks(target, dataset, (lam,), seeds, mask_training)
        for seed in seeds:
            g = nets[(float(lam), int(seed))]
            row = evaluate_mask_net(target, g, x, y, lam, seed, eps)
            masks = predict_masks(g, x)[:, 0].double().numpy()
            tv = float(np.mean([total_variation(Mask(np.clip(m, 0, 1))) for m in masks]))
            report.entries.append(AblationEntry(combo, int(seed), parameter_digest(target), row.sparseness,
                                                row.rmse_m, row.rmse_mprime, tv))
            report.masks[(combo, int(seed))] = masks
    return report


# figures

COLORMAPS = {
    "gray": np.array([[0, 0, 0], [255, 255, 255]], dtype=np.float64),
    "heat": np.array([[0, 0, 0], [160, 0, 0], [255, 120, 0], [255, 230, 60], [255, 255, 255]], dtype=np.float64),
}
PANEL_GAP = 2


@dataclass
class OverlayFigure:
    path: Path
    panels: dict  # name -> (row0, col0, height, width) inside the PNG
    colormap: str
    value_range: tuple[float, float]


def apply_colormap(values: np.ndarray, name: str, vmin: float, vmax: float) -> np.ndarray:
    if name not in COLORMAPS:
        raise ParameterError(f"unknown colormap {name!r}; expected one of {sorted(COLORMAPS)}")
    lut = COLORMAPS[name]
    t = to_uint(values, 8, vmin, vmax).astype(np.float64) / 255.0
    knots = np.linspace(0.0, 1.0, len(lut))
    rgb = np.stack([np.interp(t, knots, lut[:, c]) for c in range(3)], axis=-1)
    return np.rint(rgb).astype(np.uint8)


def render_overlay(image, mask, prediction, ground_truth, path, colormap: str = "heat") -> OverlayFigure:
    """Four panels side by side: input, mask, masked prediction, ground truth.

    The mask panel is always grayscale with 1 = white; the two depth panels
    share one value range so they are directly comparable.
    """
    img = np.asarray(getattr(image, "data", image), dtype=np.float64)
    m = np.asarray(getattr(mask, "data", mask), dtype=np.float64)
    pred = np.asarray(getattr(prediction, "data", prediction), dtype=np.float64)
    gt = np.asarray(getattr(ground_truth, "data", ground_truth), dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w = img.shape[:2]
    for name, arr in (("mask", m), ("prediction", pred), ("ground_truth", gt)):
        if arr.shape != (h, w):
            raise DimensionError(f"{name} panel has shape {arr.shape}, expected {(h, w)}")
    vmin, vmax = float(min(pred.min(), gt.min())), float(max(pred.max(), gt.max()))
    gray = to_uint(m, 8)
    panels = [
        ("image", np.repeat(to_uint(img, 8), 3 // img.shape[2], axis=2)),
        ("mask", np.repeat(gray[:, :, None], 3, axis=2)),
        ("prediction", apply_colormap(pred, colormap, vmin, vmax)),
        ("ground_truth", apply_colormap(gt, colormap, vmin, vmax)),
    ]
    canvas = np.zeros((h, 4 * w + 3 * PANEL_GAP, 3), dtype=np.uint8)
    boxes = {}
    for k, (name, rgb) in enumerate(panels):
        c0 = k * (w + PANEL_GAP)
        canvas[:, c0:c0 + w] = rgb
        boxes[name] = (0, c0, h, w)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        PILImage.fromarray(canvas).save(path, format="PNG")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc
    return OverlayFigure(path, boxes, colormap, (vmin, vmax))


def read_panel(figure: OverlayFigure, name: str) -> np.ndarray:
    with PILImage.open(figure.path) as im:
        arr = np.array(im)
    r0, c0, h, w = figure.panels[name]
    return arr[r0:r0 + h, c0:c0 + w]


# cue statistics

def mask_statistics(mask, cues: dict) -> dict:
    """Mean mask value inside each cue region relative to the global mean."""
    m = np.asarray(getattr(mask, "data", mask), dtype=np.float64)
    global_mean = float(m.mean())
    report = {"global_mean": global_mean, "cues": {}, "notes": []}
    for name, region in cues.items():
        region = np.asarray(region, dtype=bool)
        if region.shape != m.shape:
            raise DimensionError(f"cue {name!r} has shape {region.shape}, mask has {m.shape}")
        if not region.any():
            report["notes"].append(f"cue region {name!r} is empty; skipped")
            continue
        inside = float(m[region].mean())
        ratio = inside / global_mean if global_mean > 0 else None
        if ratio is None:
            report["notes"].append(f"cue {name!r}: global mask mean is zero, ratio undefined")
        report["cues"][name] = {"mean": inside, "ratio": ratio, "pixels": int(region.sum())}
    return report


def summarize_cue_ratios(reports) -> dict:
    """Mean and normal-approximation 95% interval of each cue ratio across reports (e.g. seeds)."""
    values: dict[str, list[float]] = {}
    for rep in reports:
        for name, stats in rep["cues"].items():
            if stats["ratio"] is not None:
                values.setdefault(name, []).append(stats["ratio"])
    out = {}
    for name, vals in values.items():
        arr = np.asarray(vals)
        half = 1.96 * float(arr.std(ddof=1)) / math.sqrt(arr.size) if arr.size > 1 else float("nan")
        out[name] = {"mean": float(arr.mean()), "ci95": half, "n": int(arr.size)}
    return {"note": REPORT_NOTE, "ratios": out}


def write_report(payload: dict, path, config=None) -> Path:
    """JSON report with the standard note and the hash of the producing config."""
    doc = {"note": REPORT_NOTE, **payload}
    if config is not None:
        doc["config_hash"] = config_hash(config)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc
    return path


def _json_default(obj):
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")

"""Mask objectives, per-image mask optimization, and the two training loops.

Tensors are NCHW: images (B, C, H, W), depths and masks (B, 1, H, W).
The sparsity term is averaged per image then over the batch, which for
equal-sized images equals the mean over all mask entries.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .core import DEFAULT_EPS
from .errors import ContractViolation, DimensionError, DivergenceError, ParameterError
from .losses import LOSS_COMBOS, combined_loss, l_dif, rmse
from .models import build_optimizer, is_frozen, parameter_digest

log = logging.getLogger(__name__)

VARIANTS = ("preserve", "delete", "direct")
METRIC_COLUMNS = ("epoch", "objective", "l_depth", "l_grad", "l_normal", "l1_term", "sparseness")

DEFAULT_LR = 1e-4
DEFAULT_WD = 1e-4
DEFAULT_LAMBDA = 5.0
DEFAULT_EPOCHS = 10


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = DEFAULT_LAMBDA
    variant: str = "preserve"

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ParameterError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.variant not in VARIANTS:
            raise ParameterError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass
class TrainReport:
    seed: int
    epochs: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    final_sparseness: float | None = None
    final_l_dif: float | None = None
    target_digest_before: str | None = None
    target_digest_after: str | None = None
    config: dict = field(default_factory=dict)

    @property
    def objectives(self) -> list[float]:
        return [row["objective"] for row in self.epochs]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objectives"] = self.objectives
        return d

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def apply_mask(x: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Batched pointwise masking; the single mask channel broadcasts over colour channels."""
    if x.shape[0] != m.shape[0] or x.shape[-2:] != m.shape[-2:] or m.shape[1] != 1:
        raise DimensionError(f"image batch {tuple(x.shape)} incompatible with mask batch {tuple(m.shape)}")
    return x * m


def l1_term(m: torch.Tensor) -> torch.Tensor:
    """(1/n) ||M||_1 per image, averaged over the batch (float64)."""
    return m.to(torch.float64).abs().flatten(1).mean(dim=1).mean()


def objective_terms(net, y, x, m, lam: float, variant: str = "preserve") -> dict:
    """All terms of the preserve/direct (``l_dif + lam*l1``) or delete objective.

    ``y`` is the reference prediction ``N(x)``.  Returns tensors keyed like
    ``METRIC_COLUMNS`` (minus epoch/sparseness).
    """
    if variant not in VARIANTS:
        raise ParameterError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if y.shape[-2:] != x.shape[-2:]:
        raise DimensionError(f"reference depth {tuple(y.shape)} does not match image {tuple(x.shape)}")
    yhat = net(apply_mask(x, m))
    parts = l_dif(y, yhat)
    if variant == "delete":
        sparsity = l1_term(1.0 - m)
        objective = -parts.l_dif + lam * sparsity
    else:
        sparsity = l1_term(m)
        objective = parts.l_dif + lam * sparsity
    return {"objective": objective, "l_depth": parts.l_depth, "l_grad": parts.l_grad,
            "l_normal": parts.l_normal, "l_dif": parts.l_dif, "l1_term": sparsity}


def objective_preserve(net, y, x, m, lam: float) -> torch.Tensor:
    return objective_terms(net, y, x, m, lam, "preserve")["objective"]


def objective_delete(net, y, x, m, lam: float) -> torch.Tensor:
    return objective_terms(net, y, x, m, lam, "delete")["objective"]


@dataclass
class DirectResult:
    mask: torch.Tensor
    objective: float
    initial_objective: float
    trace: list[float]


def optimize_mask_direct(net, x, lam: float, steps: int = 1000, lr: float = DEFAULT_LR,
                         weight_decay: float = DEFAULT_WD, y=None, init_logit: float = 0.0) -> DirectResult:
    """Minimize ``l_dif(N(x), N(x*M)) + lam*|M|_1/n`` over per-pixel mask logits.

    ``M = sigmoid(logits)``.  The best mask seen (including the initial one)
    is returned, so the final objective never exceeds the initial one.
    """
    if not is_frozen(net):
        raise ContractViolation("direct mask optimization requires a frozen target network")
    ObjectiveConfig(lam, "direct")
    if y is None:
        with torch.no_grad():
            y = net(x)
    logits = torch.full((x.shape[0], 1, *x.shape[-2:]), float(init_logit), dtype=x.dtype, requires_grad=True)
    opt = torch.optim.Adam([logits], lr=lr, weight_decay=weight_decay)
    trace = []
    best_val, best_logits = math.inf, logits.detach().clone()
    for step in range(steps + 1):
        opt.zero_grad()
        obj = objective_preserve(net, y, x, torch.sigmoid(logits), lam)
        val = float(obj.detach())
        trace.append(val)
        if not math.isfinite(val):
            raise DivergenceError(f"non-finite objective at step {step}", trace)
        if val < best_val:
            best_val, best_logits = val, logits.detach().clone()
        if step == steps:
            break
        obj.backward()
        opt.step()
    return DirectResult(torch.sigmoid(best_logits), best_val, trace[0], trace)


def batch_order(n: int, batch_size: int, generator: torch.Generator, shuffle: bool = True):
    perm = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _write_metrics(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in METRIC_COLUMNS})


def train_mask_net(mask_net, target_net, images: torch.Tensor, lam: float = DEFAULT_LAMBDA,
                   epochs: int = DEFAULT_EPOCHS, lr: float = DEFAULT_LR, weight_decay: float = DEFAULT_WD,
                   seed: int = 0, batch_size: int = 16, variant: str = "preserve", eps: float = DEFAULT_EPS,
                   metrics_csv=None):
    """Train G against a frozen N by minibatch Adam on the mask objective.

    Per batch: ``Y = N(x)``; ``L = l_dif(Y, N(x * G(x))) + lam * |G(x)|_1 / n``
    (or the delete objective); backpropagate; update G only.  Returns
    ``(mask_net, TrainReport)``.
    """
    if not is_frozen(target_net):
        raise ContractViolation("target network must be frozen before training the mask network")
    if variant not in ("preserve", "delete"):
        raise ParameterError(f"mask network variant must be 'preserve' or 'delete', got {variant!r}")
    ObjectiveConfig(lam, variant)
    if images.shape[0] == 0:
        raise ParameterError("training set is empty")
    digest_before = parameter_digest(target_net)
    report = TrainReport(seed=int(seed), target_digest_before=digest_before, config={
        "lambda": lam, "epochs": epochs, "lr": lr, "weight_decay": weight_decay, "batch_size": batch_size,
        "variant": variant, "eps": eps, "optimizer": "adam"})
    opt = build_optimizer(mask_net, lr=lr, weight_decay=weight_decay)
    gen = torch.Generator().manual_seed(int(seed))
    mask_net.train()
    t0 = time.perf_counter()
    trace = []
    for epoch in range(epochs):
        sums = dict.fromkeys(("objective", "l_depth", "l_grad", "l_normal", "l_dif", "l1_term", "sparseness"), 0.0)
        count = 0
        for idx in batch_order(images.shape[0], batch_size, gen):
            x = images[idx]
            opt.zero_grad()
            with torch.no_grad():
                y = target_net(x)
            m = mask_net(x)
            terms = objective_terms(target_net, y, x, m, lam, variant)
            loss = terms["objective"]
            trace.append(float(loss.detach()))
            if not math.isfinite(trace[-1]):
                raise DivergenceError(f"non-finite objective in epoch {epoch}", trace)
            loss.backward()
            opt.step()
            b = x.shape[0]
            for k in ("objective", "l_depth", "l_grad", "l_normal", "l_dif", "l1_term"):
                sums[k] += float(terms[k].detach()) * b
            sums["sparseness"] += float((m.detach() >= eps).float().mean()) * b
            count += b
        row = {"epoch": epoch, **{k: v / count for k, v in sums.items()}}
        report.epochs.append(row)
        log.info("mask epoch %d objective %.5f sparseness %.3f", epoch, row["objective"], row["sparseness"])
    report.wall_clock = time.perf_counter() - t0
    mask_net.eval()
    report.target_digest_after = parameter_digest(target_net)
    if report.target_digest_after != digest_before:
        raise ContractViolation("target network parameters changed during mask training")
    if report.epochs:
        report.final_sparseness = report.epochs[-1]["sparseness"]
        report.final_l_dif = report.epochs[-1]["l_dif"]
    if metrics_csv is not None:
        _write_metrics(metrics_csv, report.epochs)
    return mask_net, report


@torch.no_grad()
def evaluate_rmse(net, images: torch.Tensor, depths: torch.Tensor, batch_size: int = 64) -> float:
    """Mean per-image RMSE of ``net(images)`` against ``depths``."""
    vals = []
    for i in range(0, images.shape[0], batch_size):
        vals.append(rmse(depths[i:i + batch_size], net(images[i:i + batch_size]), per_image=True))
    return float(torch.cat(vals).mean())


def train_depth_net(net, images: torch.Tensor, depths: torch.Tensor, loss_combo: str = "d+g+n",
                    epochs: int = 30, lr: float = 1e-3, seed: int = 0, batch_size: int = 16,
                    weight_decay: float = 0.0, val_images=None, val_depths=None, metrics_csv=None):
    """Supervised training of the target network with the selected loss sum.

    Records per-epoch train loss, train RMSE and (if given) validation RMSE.
    """
    if loss_combo not in LOSS_COMBOS:
        raise ParameterError(f"loss_combo must be one of {list(LOSS_COMBOS)}, got {loss_combo!r}")
    if is_frozen(net):
        raise ContractViolation("cannot train a frozen network")
    opt = build_optimizer(net, lr=lr, weight_decay=weight_decay)
    gen = torch.Generator().manual_seed(int(seed))
    report = TrainReport(seed=int(seed), config={"loss_combo": loss_combo, "epochs": epochs, "lr": lr,
                                                 "batch_size": batch_size, "weight_decay": weight_decay})
    t0 = time.perf_counter()
    trace = []
    for epoch in range(epochs):
        net.train()
        total, count = 0.0, 0
        for idx in batch_order(images.shape[0], batch_size, gen):
            opt.zero_grad()
            loss = combined_loss(depths[idx], net(images[idx]), loss_combo)
            trace.append(float(loss.detach()))
            if not math.isfinite(trace[-1]):
                raise DivergenceError(f"non-finite loss in epoch {epoch}", trace)
            loss.backward()
            opt.step()
            total += trace[-1] * len(idx)
            count += len(idx)
        net.eval()
        row = {"epoch": epoch, "objective": total / count, "train_rmse": evaluate_rmse(net, images, depths)}
        if val_images is not None:
            row["val_rmse"] = evaluate_rmse(net, val_images, val_depths)
        report.epochs.append(row)
        log.info("depth epoch %d loss %.4f train rmse %.4f val rmse %s", epoch, row["objective"],
                 row["train_rmse"], row.get("val_rmse"))
    report.wall_clock = time.perf_counter() - t0
    if metrics_csv is not None:
        path = Path(metrics_csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = ["epoch", "objective", "train_rmse"] + (["val_rmse"] if val_images is not None else [])
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            w.writerows({k: r[k] for k in cols} for r in report.epochs)
    return net, report

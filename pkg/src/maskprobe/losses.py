"""Depth, gradient and surface-normal losses, their sum, and RMSE.

Every loss accepts depth maps shaped (H, W), (B, H, W) or (B, 1, H, W) as
torch tensors, numpy arrays or :class:`~maskprobe.core.DepthMap`.  Values
are accumulated in float64; autograd flows through the cast, so the same
functions serve as training objectives.

Discrete operators (recorded in run configs as ``grad_operator``):

* image gradients of the error map are absolute forward differences with
  replicate padding, so the last row/column difference is zero;
* surface normals are ``(-dd/dx, -dd/dy, 1) / norm`` in pixel units,
  using the same forward differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import DepthMap, Mask
from .errors import DimensionError, DomainError, ParameterError

GRAD_OPERATORS = ("forward", "sobel")
LOSS_COMBOS = {
    "d": ("l_depth",),
    "d+g": ("l_depth", "l_grad"),
    "d+g+n": ("l_depth", "l_grad", "l_normal"),
}


@dataclass
class LossBreakdown:
    l_depth: torch.Tensor
    l_grad: torch.Tensor
    l_normal: torch.Tensor
    l_dif: torch.Tensor

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in ("l_depth", "l_grad", "l_normal", "l_dif")}


def _tensor(x) -> torch.Tensor:
    if isinstance(x, (DepthMap, Mask)):
        x = x.data
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    return torch.as_tensor(x).to(torch.float64)


def _pair(y, yhat) -> tuple[torch.Tensor, torch.Tensor]:
    y, yhat = _tensor(y), _tensor(yhat)
    if y.shape != yhat.shape:
        raise DimensionError(f"shape mismatch: {tuple(y.shape)} vs {tuple(yhat.shape)}")
    return _batched(y), _batched(yhat)


def _batched(d: torch.Tensor) -> torch.Tensor:
    if d.dim() == 2:
        return d.unsqueeze(0)
    if d.dim() == 4:
        if d.shape[1] != 1:
            raise DimensionError(f"depth batch must have one channel, got {tuple(d.shape)}")
        return d[:, 0]
    if d.dim() != 3:
        raise DimensionError(f"unsupported depth shape {tuple(d.shape)}")
    return d


def _reduce(per_pixel: torch.Tensor, per_image: bool) -> torch.Tensor:
    per_img = per_pixel.flatten(1).mean(dim=1)
    return per_img if per_image else per_img.mean()


def f_transform(e):
    """ln(e + 0.5); defined for e >= 0."""
    if isinstance(e, torch.Tensor):
        if torch.any(e < 0):
            raise DomainError("F is defined for e >= 0 only")
        return torch.log(e + 0.5)
    if e < 0:
        raise DomainError(f"F is defined for e >= 0 only, got {e}")
    return math.log(e + 0.5)


def forward_differences(d: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Signed forward differences along x (columns) and y (rows); zero at the far border."""
    dx = F.pad(d[..., :, 1:] - d[..., :, :-1], (0, 1, 0, 0))
    dy = F.pad(d[..., 1:, :] - d[..., :-1, :], (0, 0, 0, 1))
    return dx, dy


def _sobel(d: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    kx = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=d.dtype)
    ky = kx.t().contiguous()
    x = F.pad(d.unsqueeze(1), (1, 1, 1, 1), mode="replicate")
    gx = F.conv2d(x, kx.view(1, 1, 3, 3))[:, 0]
    gy = F.conv2d(x, ky.view(1, 1, 3, 3))[:, 0]
    return gx, gy


def error_gradients(y, yhat, operator: str = "forward") -> tuple[torch.Tensor, torch.Tensor]:
    """Absolute x/y gradients of the error map e = |y - yhat|, batched (B, H, W)."""
    y, yhat = _pair(y, yhat)
    e = (y - yhat).abs()
    if operator == "forward":
        gx, gy = forward_differences(e)
    elif operator == "sobel":
        gx, gy = _sobel(e)
    else:
        raise ParameterError(f"unknown gradient operator {operator!r}; expected one of {GRAD_OPERATORS}")
    return gx.abs(), gy.abs()


def l_depth(y, yhat, per_image: bool = False) -> torch.Tensor:
    y, yhat = _pair(y, yhat)
    return _reduce(torch.log((y - yhat).abs() + 0.5), per_image)


def l_grad(y, yhat, per_image: bool = False, operator: str = "forward") -> torch.Tensor:
    gx, gy = error_gradients(y, yhat, operator)
    return _reduce(torch.log(gx + 0.5) + torch.log(gy + 0.5), per_image)


def surface_normals(d) -> torch.Tensor:
    """Unit normals with a trailing axis of 3; z-component is always positive."""
    d = _batched(_tensor(d))
    dx, dy = forward_differences(d)
    n = torch.stack((-dx, -dy, torch.ones_like(d)), dim=-1)
    return n / torch.linalg.vector_norm(n, dim=-1, keepdim=True)


def l_normal(y, yhat, per_image: bool = False) -> torch.Tensor:
    y, yhat = _pair(y, yhat)
    cos = (surface_normals(y) * surface_normals(yhat)).sum(dim=-1).clamp(-1.0, 1.0)
    return _reduce(1.0 - cos, per_image)


def l_dif(y, yhat, per_image: bool = False, operator: str = "forward") -> LossBreakdown:
    d = l_depth(y, yhat, per_image)
    g = l_grad(y, yhat, per_image, operator)
    n = l_normal(y, yhat, per_image)
    return LossBreakdown(d, g, n, d + g + n)


def combined_loss(y, yhat, combo: str = "d+g+n", operator: str = "forward") -> torch.Tensor:
    """Sum of the loss terms selected by ``combo`` (one of ``LOSS_COMBOS``)."""
    if combo not in LOSS_COMBOS:
        raise ParameterError(f"unknown loss combination {combo!r}; expected one of {list(LOSS_COMBOS)}")
    total = l_depth(y, yhat)
    if "l_grad" in LOSS_COMBOS[combo]:
        total = total + l_grad(y, yhat, operator=operator)
    if "l_normal" in LOSS_COMBOS[combo]:
        total = total + l_normal(y, yhat)
    return total


def rmse(y, yhat, per_image: bool = False) -> torch.Tensor:
    y, yhat = _pair(y, yhat)
    per_img = ((y - yhat) ** 2).flatten(1).mean(dim=1).sqrt()
    return per_img if per_image else per_img.mean()

"""Target depth network N, mask network G, and their checkpoint plumbing.

Both networks take NCHW float32 tensors.  Architectures are looked up by id
in ``DEPTH_ARCHS`` / ``MASK_ARCHS``; a model config is a plain dict with an
``arch`` key plus constructor keywords and a ``seed``.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractViolation, MaskProbeError

LE_F32 = np.dtype("<f4")


class CheckpointError(MaskProbeError, OSError):
    pass


def conv_block(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.ReLU(inplace=True))


class DepthNet(nn.Module):
    """4-level encoder-decoder with skip connections and a softplus head."""

    def __init__(self, in_channels=3, widths=(16, 32, 64, 96), init_depth=1.0, min_depth=1e-3):
        super().__init__()
        w = tuple(widths)
        self.min_depth = float(min_depth)
        self.enc = nn.ModuleList()
        cin = in_channels
        for i, cout in enumerate(w):
            self.enc.append(nn.Sequential(conv_block(cin, cout, 1 if i == 0 else 2), conv_block(cout, cout)))
            cin = cout
        self.dec = nn.ModuleList()
        for i in range(len(w) - 1, 0, -1):
            self.dec.append(conv_block(w[i] + w[i - 1], w[i - 1]))
        self.head = nn.Conv2d(w[0], 1, 3, 1, 1)
        nn.init.zeros_(self.head.bias)
        with torch.no_grad():
            target = max(init_depth - self.min_depth, 1e-3)
            self.head.bias.fill_(target + math.log(-math.expm1(-target)))  # softplus^-1

    @property
    def stride(self) -> int:
        return 2 ** (len(self.enc) - 1)

    def forward(self, x):
        skips = []
        for stage in self.enc:
            x = stage(x)
            skips.append(x)
        x = skips.pop()
        for block in self.dec:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = block(torch.cat((x, skip), dim=1))
        return F.softplus(self.head(x)) + self.min_depth


class LinearDepthNet(nn.Module):
    """y = A vec(x) + b, reshaped to (B, 1, H, W).  Used for tiny oracle instances."""

    def __init__(self, in_channels=1, height=4, width=4, offset=5.0, scale=0.5):
        super().__init__()
        self.shape = (height, width)
        n_in = in_channels * height * width
        self.linear = nn.Linear(n_in, height * width)
        with torch.no_grad():
            self.linear.weight.mul_(scale * math.sqrt(n_in))
            self.linear.bias.fill_(offset)

    def forward(self, x):
        return self.linear(x.flatten(1)).view(x.shape[0], 1, *self.shape)


class UpProjection(nn.Module):
    """x2 upsampling followed by a residual 5x5/3x3 pair with a 5x5 projection branch."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 5, 1, 2)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.proj = nn.Conv2d(cin, cout, 5, 1, 2)

    def forward(self, x, size=None):
        x = F.interpolate(x, size=size, scale_factor=None if size else 2, mode="nearest")
        return F.relu(self.conv2(F.relu(self.conv1(x))) + self.proj(x))


class MaskNet(nn.Module):
    """Encoder with three stride-2 stages, three up-projection blocks, 3x3 conv, sigmoid.

    With ``skips=True`` each up-projection also receives the encoder feature
    map of matching resolution (concatenated).
    """

    def __init__(self, in_channels=3, widths=(16, 32, 48, 64), skips=True, init_mask=0.5):
        super().__init__()
        w = tuple(widths)
        if len(w) != 4:
            raise ConfigError("MaskNet expects four widths (stem + three stride-2 stages)")
        self.skips = bool(skips)
        self.stem = conv_block(in_channels, w[0])
        self.down = nn.ModuleList(
            nn.Sequential(conv_block(w[i], w[i + 1], 2), conv_block(w[i + 1], w[i + 1])) for i in range(3)
        )
        self.up = nn.ModuleList()
        for i in range(3, 0, -1):
            self.up.append(UpProjection(w[i], w[i - 1]))
        self.fuse = nn.ModuleList(
            conv_block(2 * w[i - 1], w[i - 1]) for i in range(3, 0, -1)
        ) if self.skips else None
        self.head = nn.Conv2d(w[0], 1, 3, 1, 1)
        with torch.no_grad():
            p = min(max(float(init_mask), 1e-4), 1 - 1e-4)
            self.head.bias.fill_(math.log(p / (1 - p)))

    def logits(self, x):
        feats = [self.stem(x)]
        for stage in self.down:
            feats.append(stage(feats[-1]))
        y = feats.pop()
        for k, block in enumerate(self.up):
            skip = feats.pop()
            y = block(y, size=skip.shape[-2:])
            if self.skips:
                y = self.fuse[k](torch.cat((y, skip), dim=1))
        return self.head(y)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


DEPTH_ARCHS = {"depthnet-small": DepthNet, "linear": LinearDepthNet}
MASK_ARCHS = {"masknet-small": MaskNet}


def _build(registry, config, kind):
    config = dict(config)
    arch = config.pop("arch", None)
    seed = int(config.pop("seed", 0))
    if arch not in registry:
        raise ConfigError(f"unknown {kind} architecture {arch!r}; registered: {sorted(registry)}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        try:
            net = registry[arch](**config)
        except TypeError as exc:
            raise ConfigError(f"bad parameters for {arch}: {exc}") from exc
    net.arch = arch
    net.config = {"arch": arch, "seed": seed, **config}
    return net


def build_depth_net(config) -> nn.Module:
    return _build(DEPTH_ARCHS, config, "depth")


def build_mask_net(config) -> nn.Module:
    return _build(MASK_ARCHS, config, "mask")


def parameter_blob(net: nn.Module) -> bytes:
    """Canonical serialization: every state_dict tensor as little-endian float32, in order."""
    parts = [t.detach().cpu().contiguous().numpy().astype(LE_F32).tobytes() for t in net.state_dict().values()]
    return b"".join(parts)


def parameter_digest(net: nn.Module) -> str:
    return hashlib.sha256(parameter_blob(net)).hexdigest()


def freeze(net: nn.Module) -> nn.Module:
    """Disable gradient flow into ``net``'s parameters; gradients w.r.t. its input still flow."""
    for p in net.parameters():
        p.requires_grad_(False)
        p._maskprobe_frozen = True
    net.eval()
    net._maskprobe_frozen = True
    return net


def is_frozen(net: nn.Module) -> bool:
    return bool(getattr(net, "_maskprobe_frozen", False)) and not any(p.requires_grad for p in net.parameters())


def build_optimizer(params, lr: float = 1e-4, weight_decay: float = 1e-4) -> torch.optim.Optimizer:
    """Adam over ``params`` (a module or an iterable); refuses frozen parameters."""
    if isinstance(params, nn.Module):
        if getattr(params, "_maskprobe_frozen", False):
            raise ContractViolation("cannot register parameters of a frozen network with an optimizer")
        params = params.parameters()
    params = list(params)
    if any(getattr(p, "_maskprobe_frozen", False) for p in params):
        raise ContractViolation("cannot register parameters of a frozen network with an optimizer")
    return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def save_checkpoint(net: nn.Module, directory, role: str, epoch: int = 0, train_config=None) -> Path:
    """Write ``params.bin`` and ``manifest.json`` into ``directory``."""
    if role not in ("depth", "mask"):
        raise ValueError("role must be 'depth' or 'mask'")
    directory = Path(directory)
    blob = parameter_blob(net)
    manifest = {
        "architecture": net.arch,
        "role": role,
        "model_config": net.config,
        "epoch": int(epoch),
        "digest": hashlib.sha256(blob).hexdigest(),
        "config": train_config or {},
    }
    try:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "params.bin").write_bytes(blob)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {directory}: {exc}") from exc
    return directory


def load_checkpoint(directory):
    """Rebuild the network from its manifest and load the parameter blob.

    Returns ``(net, manifest)``.  The digest is recomputed and must match.
    """
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        blob = (directory / "params.bin").read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {directory}: {exc}") from exc
    if hashlib.sha256(blob).hexdigest() != manifest["digest"]:
        raise ContractViolation(f"{directory}: parameter blob does not match stored digest")
    builder = build_depth_net if manifest["role"] == "depth" else build_mask_net
    net = builder(manifest["model_config"])
    values = np.frombuffer(blob, dtype=LE_F32)
    state = net.state_dict()
    offset = 0
    for name, tensor in state.items():
        n = tensor.numel()
        chunk = values[offset:offset + n]
        if chunk.size != n:
            raise CheckpointError(f"{directory}: blob too short for {name}")
        state[name] = torch.from_numpy(chunk.copy()).view_as(tensor).to(tensor.dtype)
        offset += n
    if offset != values.size:
        raise CheckpointError(f"{directory}: {values.size - offset} trailing values in blob")
    net.load_state_dict(state)
    if parameter_digest(net) != manifest["digest"]:
        raise ContractViolation(f"{directory}: digest mismatch after load")
    return net, manifest

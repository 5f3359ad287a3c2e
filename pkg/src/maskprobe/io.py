"""Exact float32 round-trip blobs with JSON sidecars, and PNG export.

A blob ``<stem>.bin`` stores raw little-endian float32 values in C order;
its sidecar ``<stem>.json`` holds ``{"shape": [H, W, C], "dtype": "f32",
"kind": "image|depth|mask"}``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .core import DepthMap, Image, Mask
from .errors import DimensionError, MaskProbeError

KINDS = ("image", "depth", "mask")
LE_F32 = np.dtype("<f4")


class ArtifactIOError(MaskProbeError, OSError):
    """Reading or writing an on-disk artifact failed."""


def sidecar_path(blob_path) -> Path:
    return Path(blob_path).with_suffix(".json")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _as_hwc(obj) -> tuple[np.ndarray, str]:
    if isinstance(obj, Image):
        return obj.data, "image"
    if isinstance(obj, DepthMap):
        return obj.data[:, :, None], "depth"
    if isinstance(obj, Mask):
        return obj.data[:, :, None], "mask"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_blob(obj, blob_path) -> Path:
    data, kind = _as_hwc(obj)
    blob_path = Path(blob_path)
    try:
        blob_path.parent.mkdir(parents=True, exist_ok=True)
        blob_path.write_bytes(np.ascontiguousarray(data, dtype=LE_F32).tobytes())
        meta = {"shape": list(data.shape), "dtype": "f32", "kind": kind}
        sidecar_path(blob_path).write_text(json.dumps(meta, sort_keys=True) + "\n")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {blob_path}: {exc}") from exc
    return blob_path


def read_blob(blob_path):
    """Read a blob back into an ``Image``, ``DepthMap`` or ``Mask``."""
    blob_path = Path(blob_path)
    try:
        meta = json.loads(sidecar_path(blob_path).read_text())
        raw = blob_path.read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {blob_path}: {exc}") from exc
    if meta.get("dtype") != "f32" or meta.get("kind") not in KINDS:
        raise ArtifactIOError(f"{sidecar_path(blob_path)}: unsupported sidecar {meta}")
    shape = tuple(meta["shape"])
    data = np.frombuffer(raw, dtype=LE_F32)
    if data.size != int(np.prod(shape)):
        raise DimensionError(f"{blob_path}: {data.size} values, sidecar says {shape}")
    data = data.reshape(shape).astype(np.float32)
    if meta["kind"] == "image":
        return Image(data)
    if meta["kind"] == "depth":
        return DepthMap(data[:, :, 0])
    return Mask(data[:, :, 0])


def to_uint(values: np.ndarray, bits: int = 8, vmin: float = 0.0, vmax: float = 1.0) -> np.ndarray:
    """Linearly quantize ``[vmin, vmax]`` to unsigned 8- or 16-bit integers."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    top = (1 << bits) - 1
    scale = (vmax - vmin) if vmax > vmin else 1.0
    q = np.rint(np.clip((np.asarray(values, dtype=np.float64) - vmin) / scale, 0, 1) * top)
    return q.astype(np.uint8 if bits == 8 else np.uint16)


def write_png(values: np.ndarray, path, bits: int = 8, vmin: float = 0.0, vmax: float = 1.0) -> Path:
    q = to_uint(values, bits, vmin, vmax)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if q.ndim == 3 and q.shape[2] == 1:
        q = q[:, :, 0]
    if bits == 16:
        if q.ndim != 2:
            raise ValueError("16-bit PNG export supports single-channel data only")
        img = PILImage.fromarray(q.astype("<u2"))  # inferred as I;16
    else:
        img = PILImage.fromarray(q)
    try:
        img.save(path, format="PNG")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc
    return path


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as img:
        return np.array(img)

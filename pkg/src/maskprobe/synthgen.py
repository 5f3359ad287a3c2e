"""Procedural scenes with analytic ground-truth depth.

Camera frame: origin at the camera centre, X right, Y down, Z forward.  A
pixel (row i, col j) casts the ray ``((j - cx)/f, (i - cy)/f, 1)``, so the
ray parameter at a hit equals its Z coordinate and the depth map stores
Z-depth directly.  Rays parallel to the corridor axis converge at the
principal point, which is therefore the vanishing point.

Primitives: floor ``Y = floor``, ceiling ``Y = -ceiling``, walls
``X = -left_wall`` / ``X = right_wall``, a fronto-parallel back plane
``Z = back`` that every ray hits, and axis-aligned boxes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import DepthMap, Image, NormStats, zscore
from .errors import GeometryError, ParameterError
from .io import read_blob, sha256_file, write_blob

DIFFICULTIES = ("planes", "corridor", "cluttered")
SURFACES = ("back", "floor", "ceiling", "left_wall", "right_wall")
BOX_ID0 = len(SURFACES)
CUE_NAMES = ("edges", "object_interior", "background", "vanishing_point")

DEFAULT_CONFIG = {
    "near": 0.5,
    "far": 25.0,
    "cluttered_boxes": (3, 8),
    "corridor_boxes": (0, 2),
    "vp_radius": 0.12,  # fraction of image width
    "fog": 40.0,
    "ambient": 0.35,
    "texture_contrast": 0.25,
}


@dataclass
class Surface:
    albedo: tuple[float, float, float]
    texture: int = 0  # 0 plain, 1 checker, 2 stripes
    texture_scale: float = 0.5


@dataclass
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    surface: Surface = field(default_factory=lambda: Surface((0.6, 0.6, 0.6)))


@dataclass
class Scene:
    focal: float
    cx: float
    cy: float
    back: float
    floor: float | None = None
    ceiling: float | None = None
    left_wall: float | None = None
    right_wall: float | None = None
    boxes: list[Box] = field(default_factory=list)
    surfaces: dict[str, Surface] = field(default_factory=dict)
    light: tuple[float, float, float] = (0.3, -0.8, -0.5)
    near: float = DEFAULT_CONFIG["near"]
    far: float = DEFAULT_CONFIG["far"]
    difficulty: str = "planes"
    seed: int = 0

    @property
    def vanishing_point(self) -> tuple[float, float]:
        """(x, y) pixel coordinates where lines parallel to Z converge."""
        return (self.cx, self.cy)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        def surface(s):
            return Surface(tuple(s["albedo"]), int(s["texture"]), float(s["texture_scale"]))

        d = dict(d)
        d["boxes"] = [Box(tuple(b["lo"]), tuple(b["hi"]), surface(b["surface"])) for b in d.get("boxes", [])]
        d["surfaces"] = {k: surface(v) for k, v in d.get("surfaces", {}).items()}
        d["light"] = tuple(d["light"])
        return cls(**d)


@dataclass
class Sample:
    image: Image
    depth: DepthMap
    scene: Scene
    cues: dict[str, np.ndarray]
    surface_id: np.ndarray | None = None


def _gray_albedo(rng, lo=0.25, hi=0.9):
    g = rng.uniform(lo, hi)
    tint = rng.uniform(-0.06, 0.06, size=3)
    return tuple(float(v) for v in np.clip(g + tint, 0.05, 1.0))


def _surface(rng) -> Surface:
    return Surface(_gray_albedo(rng), int(rng.integers(0, 3)), float(rng.uniform(0.3, 0.9)))


def generate_scene(seed: int, difficulty: str = "corridor", config: dict | None = None) -> Scene:
    """Deterministic scene for ``(seed, difficulty)``.

    Image-size independent: focal length and principal point are stored as
    fractions of a 64-pixel reference and rescaled by :func:`render`.
    """
    if difficulty not in DIFFICULTIES:
        raise ParameterError(f"difficulty must be one of {DIFFICULTIES}, got {difficulty!r}")
    cfg = {**DEFAULT_CONFIG, **(config or {})}
    rng = np.random.default_rng([int(seed), DIFFICULTIES.index(difficulty)])
    ref = 64.0
    focal = float(ref * rng.uniform(0.8, 1.1))
    cx = float(ref * rng.uniform(0.3, 0.7))
    cy = float(ref * rng.uniform(0.3, 0.6))
    cam_h = float(rng.uniform(1.2, 1.8))
    scene = Scene(focal=focal, cx=cx, cy=cy, back=0.0, floor=cam_h, near=cfg["near"], far=cfg["far"],
                  difficulty=difficulty, seed=int(seed))
    scene.light = tuple(float(v) for v in np.array([rng.uniform(-0.5, 0.5), -0.8, -0.6]))
    names = ["back", "floor"]
    if difficulty == "corridor":
        scene.back = float(rng.uniform(12.0, min(20.0, cfg["far"])))
        scene.ceiling = float(rng.uniform(1.0, 1.6))
        scene.left_wall = float(rng.uniform(1.2, 2.5))
        scene.right_wall = float(rng.uniform(1.2, 2.5))
        names += ["ceiling", "left_wall", "right_wall"]
        n_boxes = int(rng.integers(cfg["corridor_boxes"][0], cfg["corridor_boxes"][1] + 1))
        x_range = (-scene.left_wall, scene.right_wall)
    elif difficulty == "planes":
        scene.back = float(rng.uniform(6.0, 15.0))
        if rng.random() < 0.5:
            scene.left_wall = float(rng.uniform(1.0, 3.0))
            names.append("left_wall")
        else:
            scene.right_wall = float(rng.uniform(1.0, 3.0))
            names.append("right_wall")
        n_boxes = 0
        x_range = (-3.0, 3.0)
    else:
        scene.back = float(rng.uniform(8.0, min(18.0, cfg["far"])))
        if rng.random() < 0.5:
            scene.left_wall = float(rng.uniform(2.0, 4.0))
            scene.right_wall = float(rng.uniform(2.0, 4.0))
            names += ["left_wall", "right_wall"]
        lo, hi = cfg["cluttered_boxes"]
        n_boxes = int(rng.integers(lo, hi + 1))
        x_range = (-(scene.left_wall or 3.0), scene.right_wall or 3.0)
    scene.surfaces = {name: _surface(rng) for name in names}
    for _ in range(n_boxes):
        sx, sy, sz = rng.uniform(0.3, 1.2), rng.uniform(0.3, 1.4), rng.uniform(0.3, 1.2)
        sx = min(sx, 0.9 * (x_range[1] - x_range[0]))
        x0 = float(rng.uniform(x_range[0], x_range[1] - sx))
        z0 = float(rng.uniform(max(2.5, cfg["near"]), scene.back - sz - 0.5))
        y1 = cam_h
        y0 = y1 - min(sy, cam_h + (scene.ceiling or 10.0) - 0.1)
        scene.boxes.append(Box((x0, y0, z0), (x0 + sx, y1, z0 + sz), _surface(rng)))
    return scene


def _rays(scene: Scene, height: int, width: int):
    scale = width / 64.0
    f = scene.focal * scale
    cx, cy = scene.cx * width / 64.0, scene.cy * height / 64.0
    if not (math.isfinite(f) and f > 0):
        raise GeometryError(f"focal length must be positive and finite, got {f}")
    jj, ii = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return (jj - cx) / f, (ii - cy) / f, (cx, cy)


def _plane_hits(scene: Scene, dx, dy):
    """Candidate depths per primitive, ``inf`` where the ray misses."""
    inf = np.full(dx.shape, np.inf)
    out = [np.full(dx.shape, float(scene.back))]
    with np.errstate(divide="ignore", invalid="ignore"):
        out.append(np.where(dy > 0, scene.floor / dy, inf) if scene.floor is not None else inf)
        out.append(np.where(dy < 0, -scene.ceiling / dy, inf) if scene.ceiling is not None else inf)
        out.append(np.where(dx < 0, -scene.left_wall / dx, inf) if scene.left_wall is not None else inf)
        out.append(np.where(dx > 0, scene.right_wall / dx, inf) if scene.right_wall is not None else inf)
    return out


def _box_hit(box: Box, dx, dy):
    """Entry depth and entry axis (0=x, 1=y, 2=z) of rays from the origin into ``box``."""
    dirs = (dx, dy, np.ones_like(dx))
    t_near = np.full(dx.shape, -np.inf)
    t_far = np.full(dx.shape, np.inf)
    axis = np.full(dx.shape, 2, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        for a in range(3):
            d = dirs[a]
            lo, hi = box.lo[a], box.hi[a]
            t0 = np.where(d != 0, lo / d, np.where(lo <= 0, -np.inf, np.inf))
            t1 = np.where(d != 0, hi / d, np.where(hi >= 0, np.inf, -np.inf))
            ta, tb = np.minimum(t0, t1), np.maximum(t0, t1)
            axis = np.where(ta > t_near, a, axis)
            t_near = np.maximum(t_near, ta)
            t_far = np.minimum(t_far, tb)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf), axis


def _texture(kind, scale, a, b):
    if kind == 1:
        return ((np.floor(a / scale) + np.floor(b / scale)) % 2) * 2 - 1
    if kind == 2:
        return (np.floor(b / scale) % 2) * 2 - 1
    return np.zeros_like(a)


def render(scene: Scene, height: int = 64, width: int = 64, config: dict | None = None) -> Sample:
    """Ray-cast depth and a Lambertian, textured, fogged RGB image in [0, 1]."""
    if height < 16 or width < 16:
        raise ParameterError(f"render size must be at least 16x16, got {height}x{width}")
    if not scene.back > 0:
        raise GeometryError(f"back plane must lie in front of the camera, got {scene.back}")
    cfg = {**DEFAULT_CONFIG, **(config or {})}
    dx, dy, (cx, cy) = _rays(scene, height, width)
    cands = _plane_hits(scene, dx, dy)
    box_axes = []
    for box in scene.boxes:
        t, axis = _box_hit(box, dx, dy)
        cands.append(t)
        box_axes.append(axis)
    stack = np.stack(cands)
    sid = np.argmin(stack, axis=0)
    depth = np.take_along_axis(stack, sid[None], axis=0)[0]
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise GeometryError("some rays hit nothing in front of the camera")

    X, Y, Z = dx * depth, dy * depth, depth
    normals = np.zeros(depth.shape + (3,))
    albedo = np.zeros(depth.shape + (3,))
    tex = np.zeros(depth.shape)
    plane_normals = {"back": (0, 0, -1), "floor": (0, -1, 0), "ceiling": (0, 1, 0),
                     "left_wall": (1, 0, 0), "right_wall": (-1, 0, 0)}
    plane_coords = {"back": (X, Y), "floor": (X, Z), "ceiling": (X, Z), "left_wall": (Z, Y), "right_wall": (Z, Y)}
    default = Surface((0.6, 0.6, 0.6))
    for k, name in enumerate(SURFACES):
        sel = sid == k
        if not sel.any():
            continue
        surf = scene.surfaces.get(name, default)
        normals[sel] = plane_normals[name]
        albedo[sel] = surf.albedo
        a, b = plane_coords[name]
        tex[sel] = _texture(surf.texture, surf.texture_scale, a, b)[sel]
    dirs = np.stack((dx, dy, np.ones_like(dx)), axis=-1)
    for k, (box, axis) in enumerate(zip(scene.boxes, box_axes)):
        sel = sid == BOX_ID0 + k
        if not sel.any():
            continue
        ax = axis[sel]
        n = np.zeros((ax.size, 3))
        n[np.arange(ax.size), ax] = -np.sign(dirs[sel][np.arange(ax.size), ax])
        normals[sel] = n
        albedo[sel] = box.surface.albedo
        coords = np.stack((X, Y, Z), axis=-1)[sel]
        a = np.where(ax == 0, coords[:, 2], coords[:, 0])
        b = np.where(ax == 1, coords[:, 2], coords[:, 1])
        tex[sel] = _texture(box.surface.texture, box.surface.texture_scale, a, b)

    light = -np.asarray(scene.light, dtype=np.float64)
    light /= np.linalg.norm(light)
    lambert = np.clip(normals @ light, 0.0, None)
    shade = cfg["ambient"] + (1 - cfg["ambient"]) * lambert
    shade = shade * (1 + cfg["texture_contrast"] * tex) * np.exp(-depth / cfg["fog"])
    image = np.clip(albedo * shade[:, :, None], 0.0, 1.0).astype(np.float32)

    cues = cue_annotations(sid, (cx, cy), cfg["vp_radius"] * width)
    return Sample(Image(image), DepthMap(depth, ground_truth=True), scene, cues, surface_id=sid)


def cue_annotations(surface_id: np.ndarray, vp_xy, vp_radius: float) -> dict[str, np.ndarray]:
    """Boolean pixel sets for geometric edges, box interiors, background and the VP neighbourhood."""
    sid = surface_id
    edges = np.zeros(sid.shape, dtype=bool)
    diff_x = sid[:, 1:] != sid[:, :-1]
    diff_y = sid[1:, :] != sid[:-1, :]
    edges[:, 1:] |= diff_x
    edges[:, :-1] |= diff_x
    edges[1:, :] |= diff_y
    edges[:-1, :] |= diff_y
    is_box = sid >= BOX_ID0
    ii, jj = np.indices(sid.shape)
    vp = (jj - vp_xy[0]) ** 2 + (ii - vp_xy[1]) ** 2 <= vp_radius ** 2
    return {
        "edges": edges,
        "object_interior": is_box & ~edges,
        "background": ~is_box,
        "vanishing_point": vp,
    }


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def generate_samples(n: int, seed: int, difficulty: str = "corridor", height: int = 64, width: int = 64,
                     config: dict | None = None) -> list[Sample]:
    return [render(generate_scene(sample_seed(seed, i), difficulty, config), height, width, config)
            for i in range(n)]


def split_counts(n: int, ratios) -> tuple[int, int, int]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ParameterError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    return n - n_val - n_test, n_val, n_test


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def dataset_config(n_samples, seed, split_ratios=(0.8, 0.1, 0.1), difficulty="corridor", height=64, width=64,
                   scene_config=None) -> dict:
    return {
        "n_samples": int(n_samples),
        "seed": int(seed),
        "split_ratios": [float(r) for r in split_ratios],
        "difficulty": difficulty,
        "height": int(height),
        "width": int(width),
        "scene_config": {**DEFAULT_CONFIG, **(scene_config or {})},
    }


def build_dataset(out_dir, n_samples: int, seed: int, split_ratios=(0.8, 0.1, 0.1), difficulty="corridor",
                  height: int = 64, width: int = 64, scene_config=None) -> Path:
    """Render ``n_samples`` scenes into ``out_dir`` and write ``manifest.json``.

    ``difficulty="mixed"`` cycles through all difficulties.  Returns the
    manifest path.
    """
    if n_samples < 1:
        raise ParameterError("n_samples must be >= 1")
    counts = split_counts(n_samples, split_ratios)
    config = dataset_config(n_samples, seed, split_ratios, difficulty, height, width, scene_config)
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    (out_dir / "cues").mkdir(parents=True, exist_ok=True)

    ids = [f"{i:05d}" for i in range(n_samples)]
    order = np.random.default_rng([int(seed), 7919]).permutation(n_samples)
    splits = {
        "train": sorted(ids[k] for k in order[:counts[0]]),
        "val": sorted(ids[k] for k in order[counts[0]:counts[0] + counts[1]]),
        "test": sorted(ids[k] for k in order[counts[0] + counts[1]:]),
    }
    files = {}
    train_images = []
    for i, sid in enumerate(ids):
        diff = DIFFICULTIES[i % 3] if difficulty == "mixed" else difficulty
        sample = render(generate_scene(sample_seed(seed, i), diff, config["scene_config"]), height, width,
                        config["scene_config"])
        img_path = write_blob(sample.image, out_dir / "samples" / f"{sid}.img.bin")
        dep_path = write_blob(sample.depth, out_dir / "samples" / f"{sid}.depth.bin")
        cue_doc = {
            "scene": sample.scene.to_dict(),
            "cues": {k: np.flatnonzero(v).tolist() for k, v in sample.cues.items()},
        }
        cue_path = out_dir / "cues" / f"{sid}.json"
        cue_path.write_text(json.dumps(cue_doc, sort_keys=True) + "\n")
        files[sid] = {"image": sha256_file(img_path), "depth": sha256_file(dep_path), "cues": sha256_file(cue_path)}
        if sid in splits["train"]:
            train_images.append(sample.image.data)
    stats = NormStats.from_images(train_images) if train_images else NormStats((0.0,) * 3, (1.0,) * 3)
    manifest = {
        "seed": int(seed),
        "config": config,
        "config_hash": config_hash(config),
        "splits": splits,
        "norm_stats": stats.to_dict(),
        "files": files,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


class SyntheticDataset:
    """In-memory view of a dataset: raw images, depths, splits and normalization stats."""

    def __init__(self, ids, images, depths, splits, stats: NormStats, cues=None, scenes=None, root=None):
        self.ids = list(ids)
        self.images = np.asarray(images, dtype=np.float32)  # (N, H, W, C) raw
        self.depths = np.asarray(depths, dtype=np.float32)  # (N, H, W)
        self.splits = {k: list(v) for k, v in splits.items()}
        self.stats = stats
        self.cues = cues
        self.scenes = scenes
        self.root = root
        self._index = {sid: k for k, sid in enumerate(self.ids)}

    @classmethod
    def from_samples(cls, samples: list[Sample], split_ratios=(0.8, 0.1, 0.1), seed: int = 0):
        ids = [f"{i:05d}" for i in range(len(samples))]
        n_train, n_val, _ = split_counts(len(samples), split_ratios)
        order = np.random.default_rng([int(seed), 7919]).permutation(len(samples))
        splits = {
            "train": sorted(ids[k] for k in order[:n_train]),
            "val": sorted(ids[k] for k in order[n_train:n_train + n_val]),
            "test": sorted(ids[k] for k in order[n_train + n_val:]),
        }
        train = [samples[int(s)].image.data for s in splits["train"]] or [s.image.data for s in samples]
        return cls(ids, [s.image.data for s in samples], [s.depth.data for s in samples], splits,
                   NormStats.from_images(train), cues=[s.cues for s in samples], scenes=[s.scene for s in samples])

    @classmethod
    def load(cls, root, with_cues: bool = False):
        root = Path(root)
        manifest = json.loads((root / "manifest.json").read_text())
        ids = sorted(manifest["files"])
        images, depths, cues, scenes = [], [], [], []
        h, w = manifest["config"]["height"], manifest["config"]["width"]
        for sid in ids:
            images.append(read_blob(root / "samples" / f"{sid}.img.bin").data)
            depths.append(read_blob(root / "samples" / f"{sid}.depth.bin").data)
            if with_cues:
                doc = json.loads((root / "cues" / f"{sid}.json").read_text())
                cues.append({k: _unflatten(v, h, w) for k, v in doc["cues"].items()})
                scenes.append(Scene.from_dict(doc["scene"]))
        stats = NormStats(tuple(manifest["norm_stats"]["mean"]), tuple(manifest["norm_stats"]["std"]))
        return cls(ids, images, depths, manifest["splits"], stats, cues if with_cues else None,
                   scenes if with_cues else None, root=root)

    def __len__(self):
        return len(self.ids)

    def indices(self, split: str | None = None) -> list[int]:
        if split is None or split == "all":
            return list(range(len(self.ids)))
        return [self._index[sid] for sid in self.splits[split]]

    def tensors(self, split: str | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Normalized images (B, C, H, W) and depths (B, 1, H, W) as float32 tensors."""
        idx = self.indices(split)
        imgs = zscore(self.images[idx], self.stats.mean, self.stats.std).astype(np.float32)
        x = torch.from_numpy(np.ascontiguousarray(imgs.transpose(0, 3, 1, 2)))
        y = torch.from_numpy(np.ascontiguousarray(self.depths[idx][:, None]))
        return x, y


def _unflatten(flat, h, w) -> np.ndarray:
    out = np.zeros(h * w, dtype=bool)
    out[np.asarray(flat, dtype=np.int64)] = True
    return out.reshape(h, w)

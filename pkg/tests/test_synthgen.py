import json
import math

import numpy as np
import pytest

from maskprobe.errors import GeometryError, ParameterError
from maskprobe.synthgen import (
    DIFFICULTIES,
    Box,
    Scene,
    SyntheticDataset,
    build_dataset,
    generate_scene,
    render,
    split_counts,
)


def oracle_depth(scene: Scene, h: int, w: int) -> np.ndarray:
    """Per-pixel closed-form intersections; boxes tested face by face."""
    f = scene.focal * w / 64.0
    cx, cy = scene.cx * w / 64.0, scene.cy * h / 64.0
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            d = ((j - cx) / f, (i - cy) / f, 1.0)
            best = scene.back
            if scene.floor is not None and d[1] > 0:
                best = min(best, scene.floor / d[1])
            if scene.ceiling is not None and d[1] < 0:
                best = min(best, -scene.ceiling / d[1])
            if scene.left_wall is not None and d[0] < 0:
                best = min(best, -scene.left_wall / d[0])
            if scene.right_wall is not None and d[0] > 0:
                best = min(best, scene.right_wall / d[0])
            for box in scene.boxes:
                for axis in range(3):
                    if d[axis] == 0:
                        continue
                    for bound in (box.lo[axis], box.hi[axis]):
                        t = bound / d[axis]
                        if t <= 0:
                            continue
                        p = [t * c for c in d]
                        inside = all(box.lo[a] - 1e-12 <= p[a] <= box.hi[a] + 1e-12 for a in range(3) if a != axis)
                        if inside:
                            best = min(best, t)
            out[i, j] = best
    return out


class TestGenerateScene:
    @pytest.mark.parametrize("difficulty", DIFFICULTIES)
    def test_deterministic(self, difficulty):
        assert generate_scene(11, difficulty) == generate_scene(11, difficulty)

    def test_corridor_vanishing_point_inside(self):
        for seed in range(20):
            s = generate_scene(seed, "corridor")
            x, y = s.vanishing_point
            assert 0 <= x <= 64 and 0 <= y <= 64

    def test_cluttered_box_count(self):
        assert 3 <= len(generate_scene(7, "cluttered").boxes) <= 8

    def test_object_depths_within_near_far(self):
        for d in DIFFICULTIES:
            for seed in range(10):
                s = generate_scene(seed, d)
                assert s.near <= s.back <= s.far
                for b in s.boxes:
                    assert s.near <= b.lo[2] < b.hi[2] <= s.far

    def test_unknown_difficulty(self):
        with pytest.raises(ParameterError):
            generate_scene(0, "forest")

    def test_scene_dict_roundtrip(self):
        s = generate_scene(3, "cluttered")
        assert Scene.from_dict(json.loads(json.dumps(s.to_dict()))) == s


class TestRender:
    def test_fronto_parallel_plane(self):
        s = Scene(focal=60.0, cx=32.0, cy=32.0, back=5.0)
        sample = render(s, 32, 32)
        assert np.all(sample.depth.data == 5.0)

    def test_floor_depth_increases_toward_horizon(self):
        s = Scene(focal=60.0, cx=32.0, cy=20.0, back=24.0, floor=1.5)
        depth = render(s, 64, 64).depth.data
        col = depth[:, 10]
        below = [i for i in range(64) if i > 20 and col[i] < s.back]
        assert len(below) > 20
        # walking up the image (toward the horizon row) depth strictly increases
        rows = sorted(below, reverse=True)
        assert all(col[a] < col[b] for a, b in zip(rows, rows[1:]))
        assert np.all(depth[:20] == s.back)

    @pytest.mark.parametrize("difficulty", DIFFICULTIES)
    @pytest.mark.parametrize("seed", [0, 5])
    def test_matches_closed_form_oracle(self, difficulty, seed):
        scene = generate_scene(seed, difficulty)
        sample = render(scene, 32, 32)
        assert np.max(np.abs(sample.depth.data - oracle_depth(scene, 32, 32))) < 1e-6

    def test_box_in_front_of_plane(self):
        # scene intrinsics are in 64-pixel reference units
        s = Scene(focal=64.0, cx=32.0, cy=32.0, back=10.0, boxes=[Box((-1.0, -1.0, 3.0), (1.0, 1.0, 4.0))])
        d = render(s, 32, 32).depth.data
        assert d[16, 16] == pytest.approx(3.0)
        assert d[0, 0] == 10.0
        assert np.max(np.abs(d - oracle_depth(s, 32, 32))) < 1e-6

    def test_degenerate_camera(self):
        with pytest.raises(GeometryError):
            render(Scene(focal=0.0, cx=16.0, cy=16.0, back=5.0), 32, 32)
        with pytest.raises(GeometryError):
            render(Scene(focal=30.0, cx=16.0, cy=16.0, back=-1.0), 32, 32)

    def test_minimum_size(self):
        with pytest.raises(ParameterError):
            render(generate_scene(0, "planes"), 8, 8)

    def test_image_range_and_channels(self):
        img = render(generate_scene(1, "corridor"), 64, 64).image
        assert img.channels == 3
        assert img.data.min() >= 0 and img.data.max() <= 1

    @pytest.mark.parametrize("difficulty", DIFFICULTIES)
    def test_cue_consistency(self, difficulty):
        sample = render(generate_scene(4, difficulty), 64, 64)
        cues = sample.cues
        for v in cues.values():
            assert v.shape == (64, 64) and v.dtype == bool
        assert not np.any(cues["object_interior"] & cues["background"])
        assert not np.any(cues["object_interior"] & cues["edges"])
        x, y = sample.scene.vanishing_point
        assert cues["vanishing_point"][int(round(y)), int(round(x))]


class TestDataset:
    def test_split_counts(self):
        assert split_counts(100, (0.8, 0.1, 0.1)) == (80, 10, 10)
        with pytest.raises(ParameterError):
            split_counts(100, (0.8, 0.1, 0.2))

    def test_build_is_deterministic_and_disjoint(self, tmp_path):
        a = build_dataset(tmp_path / "a", 20, seed=3, height=32, width=32)
        b = build_dataset(tmp_path / "b", 20, seed=3, height=32, width=32)
        assert a.read_bytes() == b.read_bytes()
        m = json.loads(a.read_text())
        splits = [set(m["splits"][k]) for k in ("train", "val", "test")]
        assert [len(s) for s in splits] == [16, 2, 2]
        assert not (splits[0] & splits[1]) and not (splits[0] & splits[2]) and not (splits[1] & splits[2])
        for sid in m["files"]:
            assert (a.parent / "samples" / f"{sid}.img.bin").read_bytes() == \
                (b.parent / "samples" / f"{sid}.img.bin").read_bytes()

    def test_layout_and_positive_depth(self, tmp_path):
        build_dataset(tmp_path, 6, seed=1, difficulty="mixed", height=32, width=32)
        assert (tmp_path / "samples" / "00000.img.json").exists()
        assert (tmp_path / "samples" / "00000.depth.bin").exists()
        assert (tmp_path / "cues" / "00005.json").exists()
        ds = SyntheticDataset.load(tmp_path, with_cues=True)
        assert len(ds) == 6
        assert ds.depths.min() > 0
        x, y = ds.tensors()
        assert x.shape == (6, 3, 32, 32) and y.shape == (6, 1, 32, 32)
        assert ds.cues[0]["edges"].shape == (32, 32)

    def test_invalid_n(self, tmp_path):
        with pytest.raises(ParameterError):
            build_dataset(tmp_path, 0, seed=1)

    def test_normalized_train_split_has_zero_mean(self):
        from maskprobe.synthgen import generate_samples

        ds = SyntheticDataset.from_samples(generate_samples(10, 2, "planes", 32, 32), seed=2)
        x, _ = ds.tensors("train")
        assert np.allclose(x.double().mean(dim=(0, 2, 3)).numpy(), 0, atol=1e-5)

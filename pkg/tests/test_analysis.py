import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from maskprobe import analysis
from maskprobe.analysis import SweepRow
from maskprobe.errors import AnalysisError, DependencyError, DimensionError, ParameterError
from maskprobe.io import to_uint
from maskprobe.models import build_depth_net, build_mask_net, freeze, parameter_digest
from maskprobe.optimize import evaluate_rmse
from maskprobe.synthgen import SyntheticDataset, generate_samples

TINY = (4, 4, 4, 4)


class ConstantMask(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full((x.shape[0], 1, *x.shape[-2:]), self.value, dtype=x.dtype)


@pytest.fixture(scope="module")
def dataset():
    return SyntheticDataset.from_samples(generate_samples(20, 4, "corridor", 16, 16), (0.6, 0.2, 0.2), seed=4)


@pytest.fixture(scope="module")
def target(dataset):
    _, y = dataset.tensors("train")
    return freeze(build_depth_net({"arch": "depthnet-small", "seed": 0, "widths": TINY,
                                   "init_depth": float(y.mean())}))


class TestSweepRow:
    def test_validation(self):
        with pytest.raises(ParameterError):
            SweepRow(1.0, 0.5, 0.5, 1.2, 0)
        with pytest.raises(ParameterError):
            SweepRow(1.0, -0.1, 0.5, 0.2, 0)

    def test_csv_header(self, tmp_path):
        path = analysis.write_sweep_csv([SweepRow(0.5, 1.0, 1.0, 0.5, 0)], tmp_path / "s.csv")
        assert path.read_text().splitlines()[0] == "lambda,rmse_m,rmse_mprime,sparseness,seed"

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 1e3), st.floats(0, 1e3), st.floats(0, 1),
                              st.integers(0, 2**31)), max_size=6))
    def test_write_read_write_is_byte_identical(self, tmp_path_factory, records):
        rows = [SweepRow(*r) for r in records]
        d = tmp_path_factory.mktemp("csv")
        first = analysis.write_sweep_csv(rows, d / "a.csv").read_bytes()
        back = analysis.read_sweep_csv(d / "a.csv")
        assert back == rows
        assert analysis.write_sweep_csv(back, d / "b.csv").read_bytes() == first

    def test_summary_means(self):
        rows = [SweepRow(1.0, 2.0, 3.0, 0.4, 0), SweepRow(1.0, 4.0, 5.0, 0.6, 1), SweepRow(0.5, 1.0, 1.0, 1.0, 0)]
        summary = analysis.summarize_sweep(rows)
        assert [s["lambda"] for s in summary] == [0.5, 1.0]
        assert summary[1]["rmse_m"] == 3.0 and summary[1]["sparseness"] == 0.5

    def test_violations(self):
        assert analysis.sparseness_violations([1.0, 0.8, 0.81, 0.3]) == pytest.approx([0.01])
        assert analysis.sparseness_violations([1.0, 1.0, 0.0]) == []


class TestLambdaSweep:
    def test_all_ones_mask_gives_full_sparseness(self, target, dataset):
        rows = analysis.lambda_sweep(target, dataset, (1.0,), mask_nets={(1.0, 0): ConstantMask(1.0)})
        x, y = dataset.tensors("test")
        assert rows[0].sparseness == 1.0
        assert rows[0].rmse_m == rows[0].rmse_mprime == pytest.approx(evaluate_rmse(target, x, y), abs=1e-12)

    def test_below_eps_mask_is_empty(self, target, dataset):
        rows = analysis.lambda_sweep(target, dataset, (8.0,), mask_nets={(8.0, 0): ConstantMask(0.02)})
        assert rows[0].sparseness == 0.0

    def test_missing_network(self, target, dataset):
        with pytest.raises(DependencyError):
            analysis.lambda_sweep(target, dataset, (1.0, 2.0), mask_nets={(1.0, 0): ConstantMask(1.0)})

    def test_unfrozen_target(self, dataset):
        with pytest.raises(DependencyError):
            analysis.lambda_sweep(build_depth_net({"arch": "depthnet-small", "widths": TINY}), dataset, (1.0,),
                                  mask_nets={(1.0, 0): ConstantMask(1.0)})

    def test_trains_cells_and_leaves_target_untouched(self, target, dataset, tmp_path):
        before = parameter_digest(target)
        rows = analysis.lambda_sweep(target, dataset, (0.5, 4.0), seeds=(0, 1), csv_path=tmp_path / "s.csv",
                                     training={"epochs": 1, "model": {"widths": TINY}})
        assert [(r.lam, r.seed) for r in rows] == [(0.5, 0), (0.5, 1), (4.0, 0), (4.0, 1)]
        assert parameter_digest(target) == before
        assert analysis.read_sweep_csv(tmp_path / "s.csv") == rows


class TestEdgeBaseline:
    def test_threshold_zero_equals_unmasked(self, target, dataset):
        learned = [SweepRow(1.0, 1.0, 1.0, 1.0, 0)]
        cmp = analysis.edge_baseline(target, dataset, learned, thresholds=(0.0,))
        x, y = dataset.tensors("test")
        assert cmp.edge_rows[0].sparseness == 1.0
        assert cmp.edge_rows[0].rmse == pytest.approx(evaluate_rmse(target, x, y), abs=1e-12)

    def test_injected_learned_mask_gives_identical_rmse(self, target, dataset):
        g = build_mask_net({"arch": "masknet-small", "seed": 3, "widths": TINY, "init_mask": 0.03})
        x, y = dataset.tensors("test")
        row = analysis.evaluate_mask_net(target, g, x, y, 2.0, 0)
        binary = (analysis.predict_masks(g, x) >= 0.025)[:, 0].numpy().astype(np.float64)
        cmp = analysis.edge_baseline(target, dataset, [row], thresholds=(0.5,), edge_maps=binary)
        pair = cmp.closest()
        assert pair.edge_sparseness == pytest.approx(row.sparseness)
        assert pair.edge_rmse == row.rmse_mprime

    def test_empty_overlap(self, target, dataset):
        with pytest.raises(AnalysisError):
            analysis.edge_baseline(target, dataset, [SweepRow(1.0, 1.0, 1.0, 0.5, 0)], thresholds=(0.0,))

    def test_tie_break_prefers_smaller_lambda(self):
        # dyadic sparseness values keep the distances exact
        rows = [SweepRow(4.0, 1.0, 1.0, 0.75, 0), SweepRow(8.0, 1.0, 1.0, 0.25, 0), SweepRow(2.0, 1.0, 1.0, 0.25, 0)]
        assert analysis.pair_nearest(0.5, rows).lam == 2.0
        assert analysis.pair_nearest(0.625, rows).lam == 4.0

    def test_edge_map_shape_check(self, target, dataset):
        with pytest.raises(DimensionError):
            analysis.edge_baseline(target, dataset, [SweepRow(1.0, 1.0, 1.0, 1.0, 0)], edge_maps=np.zeros((1, 4, 4)))


class TestOverlay:
    def test_layout_and_black_mask(self, tmp_path):
        rng = np.random.default_rng(0)
        fig = analysis.render_overlay(rng.uniform(size=(16, 16, 3)), np.zeros((16, 16)),
                                      rng.uniform(1, 5, (16, 16)), rng.uniform(1, 5, (16, 16)), tmp_path / "f.png")
        assert len(fig.panels) == 4
        assert {p[2:] for p in fig.panels.values()} == {(16, 16)}
        assert np.all(analysis.read_panel(fig, "mask") == 0)

    def test_mask_panel_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        m = rng.uniform(size=(16, 16))
        fig = analysis.render_overlay(rng.uniform(size=(16, 16, 3)), m, np.ones((16, 16)), np.ones((16, 16)) * 2,
                                      tmp_path / "f.png", colormap="gray")
        panel = analysis.read_panel(fig, "mask")
        expected = to_uint(m, 8)
        for c in range(3):
            assert np.array_equal(panel[:, :, c], expected)
        assert np.all(analysis.read_panel(analysis.render_overlay(
            np.zeros((16, 16, 3)), np.ones((16, 16)), np.ones((16, 16)), np.ones((16, 16)), tmp_path / "w.png"),
            "mask") == 255)

    def test_shape_mismatch(self, tmp_path):
        with pytest.raises(DimensionError):
            analysis.render_overlay(np.zeros((16, 16, 3)), np.zeros((8, 8)), np.zeros((16, 16)), np.zeros((16, 16)),
                                    tmp_path / "f.png")

    def test_unknown_colormap(self, tmp_path):
        with pytest.raises(ParameterError):
            analysis.render_overlay(np.zeros((16, 16, 3)), np.zeros((16, 16)), np.zeros((16, 16)),
                                    np.zeros((16, 16)), tmp_path / "f.png", colormap="jet")


class TestMaskStatistics:
    @pytest.fixture
    def cues(self):
        edges = np.zeros((8, 8), bool)
        edges[:, 3:5] = True
        interior = np.zeros((8, 8), bool)
        interior[2:6, 0:2] = True
        return {"edges": edges, "object_interior": interior, "vanishing_point": np.zeros((8, 8), bool)}

    def test_uniform_mask_ratios_are_one(self, cues):
        rep = analysis.mask_statistics(np.full((8, 8), 0.4), cues)
        assert all(v["ratio"] == pytest.approx(1.0) for v in rep["cues"].values())

    def test_edge_only_mask(self, cues):
        rep = analysis.mask_statistics(cues["edges"].astype(float), cues)
        assert rep["cues"]["edges"]["ratio"] > 1
        assert rep["cues"]["object_interior"]["ratio"] < 1

    def test_empty_region_skipped_with_note(self, cues):
        rep = analysis.mask_statistics(np.full((8, 8), 0.4), cues)
        assert "vanishing_point" not in rep["cues"]
        assert any("vanishing_point" in n for n in rep["notes"])

    def test_summary_over_seeds(self, cues):
        reps = [analysis.mask_statistics(cues["edges"] * v + 0.1, cues) for v in (0.5, 0.6, 0.7)]
        summary = analysis.summarize_cue_ratios(reps)
        assert summary["ratios"]["edges"]["n"] == 3
        assert summary["ratios"]["edges"]["ci95"] > 0
        assert "trend" in summary["note"]


class TestAblation:
    def test_three_combos(self, dataset):
        targets = {}
        for combo in ("d", "d+g", "d+g+n"):
            targets[combo] = freeze(build_depth_net({"arch": "depthnet-small", "seed": 0, "widths": TINY,
                                                     "init_depth": 3.0}))
        report = analysis.loss_ablation(dataset, 2.0, (0,), targets,
                                        mask_training={"epochs": 1, "model": {"widths": TINY}})
        assert [e.combo for e in report.entries] == ["d", "d+g", "d+g+n"]
        assert set(report.mean_tv()) == {"d", "d+g", "d+g+n"}
        doc = report.to_dict()
        assert doc["combos"] == ["d", "d+g", "d+g+n"] and "note" in doc

    def test_missing_combo(self, dataset, target):
        with pytest.raises(DependencyError):
            analysis.loss_ablation(dataset, 2.0, (0,), {"d": target})


def test_report_header(tmp_path):
    import json

    path = analysis.write_report({"x": np.float64(1.5)}, tmp_path / "r.json", config={"a": 1})
    doc = json.loads(path.read_text())
    assert doc["note"] == analysis.REPORT_NOTE and doc["x"] == 1.5 and len(doc["config_hash"]) == 64

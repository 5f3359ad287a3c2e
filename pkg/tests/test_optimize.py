import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from maskprobe.errors import ContractViolation, DimensionError, DivergenceError, ParameterError
from maskprobe.losses import l_dif
from maskprobe.models import build_depth_net, build_mask_net, freeze, parameter_digest
from maskprobe.optimize import (
    METRIC_COLUMNS,
    ObjectiveConfig,
    apply_mask,
    l1_term,
    objective_delete,
    objective_preserve,
    objective_terms,
    optimize_mask_direct,
    train_depth_net,
    train_mask_net,
)

import oracles

THREE_LN_HALF = 3 * math.log(0.5)
TINY = (4, 4, 4, 4)


def linear_instance(seed, size=4):
    net = freeze(build_depth_net({"arch": "linear", "seed": seed, "height": size, "width": size}).double())
    x = torch.from_numpy(np.random.default_rng(seed).normal(size=(1, 1, size, size)))
    return net, x


def oracle_args(net, x):
    return net.linear.weight.tolist(), net.linear.bias.tolist(), x[0, 0].tolist()


class NaNNet(torch.nn.Module):
    def forward(self, x):
        return x[:, :1] * float("nan")


class TestObjectives:
    @pytest.mark.parametrize("seed", range(4))
    def test_preserve_matches_oracle(self, seed):
        net, x = linear_instance(seed, 8)
        m = torch.from_numpy(np.random.default_rng(100 + seed).uniform(size=(1, 1, 8, 8)))
        with torch.no_grad():
            y = net(x)
        w, b, img = oracle_args(net, x)
        expected = oracles.linear_objective(w, b, img, m[0, 0].tolist(), 0.8)
        assert float(objective_preserve(net, y, x, m, 0.8)) == pytest.approx(expected, abs=1e-9)

    @pytest.mark.parametrize("seed", range(4))
    def test_delete_matches_oracle(self, seed):
        net, x = linear_instance(seed, 8)
        m = torch.from_numpy(np.random.default_rng(200 + seed).uniform(size=(1, 1, 8, 8)))
        with torch.no_grad():
            y = net(x)
        w, b, img = oracle_args(net, x)
        yh = oracles.linear_depth(w, b, img, m[0, 0].tolist())
        expected = oracles.objective_delete(oracles.linear_depth(w, b, img), yh, m[0, 0].tolist(), 1.3)
        assert float(objective_delete(net, y, x, m, 1.3)) == pytest.approx(expected, abs=1e-9)

    def test_identity_mask_preserve_value(self):
        net, x = linear_instance(0)
        with torch.no_grad():
            y = net(x)
        val = objective_preserve(net, y, x, torch.ones(1, 1, 4, 4, dtype=torch.float64), 5.0)
        assert float(val) == pytest.approx(THREE_LN_HALF + 5.0, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 20), st.integers(0, 1000))
    def test_preserve_plus_delete_equals_lambda(self, lam, seed):
        net, x = linear_instance(seed % 7)
        m = torch.from_numpy(np.random.default_rng(seed).uniform(size=(1, 1, 4, 4)))
        with torch.no_grad():
            y = net(x)
        total = objective_preserve(net, y, x, m, lam) + objective_delete(net, y, x, m, lam)
        assert float(total) == pytest.approx(lam, abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_l_dif_bounded_below_by_identity_value(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.uniform(0.5, 10, size=(8, 8))
        yh = y + rng.normal(scale=rng.uniform(0, 3), size=(8, 8))
        assert float(l_dif(y, yh).l_dif) >= THREE_LN_HALF - 1e-12

    def test_terms_keys(self):
        net, x = linear_instance(1)
        with torch.no_grad():
            y = net(x)
        terms = objective_terms(net, y, x, torch.full((1, 1, 4, 4), 0.5, dtype=torch.float64), 2.0)
        assert set(METRIC_COLUMNS) - {"epoch", "sparseness"} <= set(terms)
        assert float(terms["objective"]) == pytest.approx(float(terms["l_dif"] + 2.0 * terms["l1_term"]))

    def test_l1_term_is_mean_per_image(self):
        m = torch.zeros(2, 1, 4, 4)
        m[0] = 1.0
        assert float(l1_term(m)) == 0.5

    def test_apply_mask_shape_checks(self):
        with pytest.raises(DimensionError):
            apply_mask(torch.zeros(2, 3, 8, 8), torch.zeros(2, 1, 8, 7))
        with pytest.raises(DimensionError):
            apply_mask(torch.zeros(2, 3, 8, 8), torch.zeros(2, 3, 8, 8))

    @pytest.mark.parametrize("lam, variant", [(-1.0, "preserve"), (float("nan"), "preserve"), (1.0, "keep")])
    def test_objective_config_validation(self, lam, variant):
        with pytest.raises(ParameterError):
            ObjectiveConfig(lam, variant)


class TestDirect:
    def test_lambda_zero_recovers_identity_value(self):
        net, x = linear_instance(2)
        res = optimize_mask_direct(net, x, 0.0, steps=200, lr=0.05, weight_decay=0.0, init_logit=2.0)
        assert res.objective <= res.initial_objective
        assert res.objective == pytest.approx(THREE_LN_HALF, abs=0.05)
        assert float(res.mask.min()) > 0.8

    def test_never_worse_than_start(self):
        net, x = linear_instance(3)
        res = optimize_mask_direct(net, x, 1.0, steps=50, lr=0.05, weight_decay=0.0)
        assert res.objective <= res.initial_objective
        assert res.objective == min(res.trace)
        assert len(res.trace) == 51

    def test_large_lambda_empties_mask(self):
        net, x = linear_instance(4)
        res = optimize_mask_direct(net, x, 50.0, steps=300, lr=0.1, weight_decay=0.0)
        assert float(res.mask.max()) < 0.05

    def test_requires_frozen_net(self):
        net = build_depth_net({"arch": "linear", "seed": 0})
        with pytest.raises(ContractViolation):
            optimize_mask_direct(net, torch.zeros(1, 1, 4, 4), 1.0, steps=1)

    def test_divergence(self):
        with pytest.raises(DivergenceError) as info:
            optimize_mask_direct(freeze(NaNNet()), torch.ones(1, 1, 4, 4), 1.0, steps=3,
                                 y=torch.ones(1, 1, 4, 4))
        assert len(info.value.trace) == 1


@pytest.fixture(scope="module")
def tiny_data():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(12, 3, 16, 16, generator=g)
    y = 2.0 + x[:, :1].abs() + torch.linspace(0, 1, 16).view(1, 1, 1, 16)
    return x, y


class TestTrainMask:
    def test_smoke_and_freeze_contract(self, tiny_data, tmp_path):
        x, _ = tiny_data
        n = freeze(build_depth_net({"arch": "depthnet-small", "seed": 0, "widths": TINY, "init_depth": 3.0}))
        g = build_mask_net({"arch": "masknet-small", "seed": 0, "widths": TINY})
        before = parameter_digest(n)
        g_before = parameter_digest(g)
        g, report = train_mask_net(g, n, x, lam=1.0, epochs=2, lr=1e-3, batch_size=4,
                                   metrics_csv=tmp_path / "m.csv")
        assert parameter_digest(n) == before == report.target_digest_after
        assert parameter_digest(g) != g_before
        assert len(report.epochs) == 2
        assert 0.0 <= report.final_sparseness <= 1.0
        with open(tmp_path / "m.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0]) == METRIC_COLUMNS and len(rows) == 2

    def test_rejects_unfrozen_target(self, tiny_data):
        n = build_depth_net({"arch": "depthnet-small", "seed": 0, "widths": TINY})
        g = build_mask_net({"arch": "masknet-small", "seed": 0, "widths": TINY})
        with pytest.raises(ContractViolation):
            train_mask_net(g, n, tiny_data[0], epochs=1)

    def test_same_seed_same_result(self, tiny_data):
        n = freeze(build_depth_net({"arch": "depthnet-small", "seed": 0, "widths": TINY, "init_depth": 3.0}))
        digests = []
        for _ in range(2):
            g = build_mask_net({"arch": "masknet-small", "seed": 5, "widths": TINY})
            g, _ = train_mask_net(g, n, tiny_data[0], lam=2.0, epochs=1, lr=1e-3, batch_size=4, seed=9)
            digests.append(parameter_digest(g))
        assert digests[0] == digests[1]

    def test_delete_variant_runs(self, tiny_data):
        n = freeze(build_depth_net({"arch": "depthnet-small", "seed": 0, "widths": TINY, "init_depth": 3.0}))
        g = build_mask_net({"arch": "masknet-small", "seed": 0, "widths": TINY})
        _, report = train_mask_net(g, n, tiny_data[0], lam=1.0, epochs=1, batch_size=6, variant="delete")
        assert report.config["variant"] == "delete"
        with pytest.raises(ParameterError):
            train_mask_net(g, n, tiny_data[0], epochs=1, variant="direct")


class TestTrainDepth:
    def test_loss_decreases(self, tiny_data):
        x, y = tiny_data
        net = build_depth_net({"arch": "depthnet-small", "seed": 0, "widths": (8, 8, 8, 8), "init_depth": 2.5})
        net, report = train_depth_net(net, x, y, "d+g+n", epochs=8, lr=3e-3, batch_size=4)
        assert report.epochs[-1]["objective"] < report.epochs[0]["objective"]

    def test_refuses_frozen(self, tiny_data):
        net = freeze(build_depth_net({"arch": "depthnet-small", "seed": 0, "widths": TINY}))
        with pytest.raises(ContractViolation):
            train_depth_net(net, *tiny_data, epochs=1)

    def test_divergence(self, tiny_data):
        class Broken(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.w = torch.nn.Parameter(torch.ones(1))

            def forward(self, x):
                return x[:, :1] * self.w * float("nan")

        with pytest.raises(DivergenceError):
            train_depth_net(Broken(), *tiny_data, epochs=1)

    def test_unknown_combo(self, tiny_data):
        net = build_depth_net({"arch": "depthnet-small", "seed": 0, "widths": TINY})
        with pytest.raises(ParameterError):
            train_depth_net(net, *tiny_data, loss_combo="g", epochs=1)

"""BN-statistics loss and synthetic image generation."""

import warnings

import numpy as np
import pytest

from lrnas.datasynth import BNTargets, SynthConfig, SynthesisWarning, bn_loss, generate, optimize_batch
from lrnas.errors import ContractError
from lrnas.netgraph import INPUT, BatchNorm, Conv, NetworkGraph, ReLU, build_desk_model
from lrnas.tensor import BatchNormState, Tensor
from oracles import numeric_grad, rel_error


def identity_bn_graph(channels, mean, var, dtype=np.float32):
    w = np.eye(channels, dtype=dtype).reshape(channels, channels, 1, 1)
    state = BatchNormState(channels, dtype=dtype)
    state.running_mean[:] = mean
    state.running_var[:] = var
    layers = [Conv("c", [INPUT], Tensor(w, dtype=dtype), in_size=3), BatchNorm("bn", ["c"], state)]
    return NetworkGraph((channels, 3, 3), layers)


def small_graph(seed=0):
    """conv -> BN -> ReLU -> conv -> BN in float64, for finite differences."""
    rng = np.random.default_rng(seed)
    s1, s2 = BatchNormState(3, dtype=np.float64), BatchNormState(2, dtype=np.float64)
    s1.running_mean[:] = rng.normal(size=3)
    s1.running_var[:] = rng.uniform(0.5, 2, 3)
    s2.running_mean[:] = rng.normal(size=2)
    s2.running_var[:] = rng.uniform(0.5, 2, 2)
    w1 = Tensor(rng.standard_normal((3, 2, 3, 3)), dtype=np.float64)
    w2 = Tensor(rng.standard_normal((2, 3, 3, 3)), dtype=np.float64)
    layers = [
        Conv("c1", [INPUT], w1, None, 1, 1, 1, 4), BatchNorm("bn1", ["c1"], s1), ReLU("r1", ["bn1"]),
        Conv("c2", ["r1"], w2, None, 1, 1, 1, 4), BatchNorm("bn2", ["c2"], s2),
    ]
    return NetworkGraph((2, 4, 4), layers)


class TestBnLoss:
    def test_closed_form_one_layer(self):
        graph = identity_bn_graph(1, 0.5, 1.0)
        x = Tensor(np.full((4, 1, 3, 3), 0.5, dtype=np.float32))
        for alpha in (1.0, 3.0):
            value = bn_loss(x, graph, BNTargets.from_graph(graph), alpha).item()
            assert value == pytest.approx(alpha * (0.25 + 1.0) + 0.0 + 1.0, abs=1e-5)

    def test_zero_at_global_minimum(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((16, 2, 3, 3))
        x = (x - x.mean()) / x.std()
        stats_mean = x.mean(axis=(0, 2, 3))
        stats_var = x.var(axis=(0, 2, 3))
        graph = identity_bn_graph(2, stats_mean, stats_var, np.float64)
        assert bn_loss(Tensor(x, dtype=np.float64), graph, BNTargets.from_graph(graph)).item() == pytest.approx(
            0.0, abs=1e-10)

    def test_scaled_term_is_channel_average(self):
        rng = np.random.default_rng(1)
        values = {}
        for f in (1, 4, 16):
            x = rng.standard_normal((8, f, 3, 3))
            x = (x - x.mean()) / x.std()
            graph = identity_bn_graph(f, x.mean(axis=(0, 2, 3)) + 0.3, x.var(axis=(0, 2, 3)), np.float64)
            values[f] = bn_loss(Tensor(x, dtype=np.float64), graph, BNTargets.from_graph(graph)).item()
        assert values[1] == pytest.approx(0.09) and values[4] == pytest.approx(0.09) and values[16] == pytest.approx(0.09)
        x = np.zeros((8, 4, 3, 3))
        graph = identity_bn_graph(4, 0.3, 1.0, np.float64)
        unscaled = bn_loss(Tensor(x, dtype=np.float64), graph, BNTargets.from_graph(graph), alpha=0, scaled=False)
        scaled = bn_loss(Tensor(x, dtype=np.float64), graph, BNTargets.from_graph(graph), alpha=0, scaled=True)
        assert unscaled.item() == pytest.approx(4 * scaled.item())

    def test_gradient_matches_finite_differences(self):
        graph = small_graph()
        targets = BNTargets.from_graph(graph)
        arr = np.random.default_rng(2).standard_normal((3, 2, 4, 4))
        x = Tensor(arr.copy(), requires_grad=True, dtype=np.float64)
        bn_loss(x, graph, targets, alpha=1.0).backward()
        num = numeric_grad(lambda: bn_loss(Tensor(arr, dtype=np.float64), graph, targets).item(), [arr])[0]
        assert rel_error(x.grad, num) < 1e-3

    def test_batch_of_one_is_defined(self):
        graph = identity_bn_graph(1, 0.0, 1.0)
        value = bn_loss(Tensor(np.ones((1, 1, 3, 3), dtype=np.float32)), graph, BNTargets.from_graph(graph)).item()
        assert np.isfinite(value)

    def test_running_buffers_untouched(self):
        graph = small_graph()
        before = [(b.state.running_mean.copy(), b.state.running_var.copy()) for b in graph.batchnorms()]
        bn_loss(Tensor(np.random.default_rng(0).standard_normal((4, 2, 4, 4))), graph, BNTargets.from_graph(graph))
        for (m, v), b in zip(before, graph.batchnorms()):
            np.testing.assert_array_equal(m, b.state.running_mean)
            np.testing.assert_array_equal(v, b.state.running_var)

    def test_targets_need_bn_layers(self):
        w = np.ones((1, 1, 1, 1), dtype=np.float32)
        with pytest.raises(ContractError):
            BNTargets.from_graph(NetworkGraph((1, 2, 2), [Conv("c", [INPUT], w)]))


class TestGenerate:
    def test_count_zero(self):
        images, reports = generate(build_desk_model(0), SynthConfig(iterations=1), 0)
        assert images.images.shape == (0, 3, 16, 16) and reports == []

    def test_rounding_and_determinism(self):
        graph = build_desk_model(0)
        cfg = SynthConfig(iterations=3, batch_size=4, seed=5)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SynthesisWarning)
            one, reports = generate(graph, cfg, 1)
            again, _ = generate(graph, cfg, 1)
            seven, reports7 = generate(graph, cfg, 7)
        assert len(one) == 1 and len(reports) == 1 and one.labels is None
        assert len(seven) == 7 and len(reports7) == 2
        np.testing.assert_array_equal(one.images, again.images)
        np.testing.assert_array_equal(seven.images[:1], one.images)  # batch 0 is the same independent batch
        assert one.images.dtype == np.float32
        assert one.meta["config"]["seed"] == 5

    def test_warns_with_trace_when_reduction_too_small(self):
        with pytest.warns(SynthesisWarning, match="trace"):
            optimize_batch(build_desk_model(0), SynthConfig(iterations=1, batch_size=2), 0)

    def test_config_validation(self):
        with pytest.raises(ContractError):
            SynthConfig(iterations=0)
        with pytest.raises(ContractError):
            generate(build_desk_model(0), SynthConfig(), -1)

    @pytest.mark.slow
    def test_desk_model_progress_across_seeds(self, desk_model):
        before = [(b.state.running_mean.copy(), b.state.running_var.copy()) for b in desk_model.batchnorms()]
        weights = [p.data.copy() for p in desk_model.parameters()]
        for seed in range(5):
            cfg = SynthConfig(iterations=60, batch_size=8, seed=seed)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", SynthesisWarning)
                _, reports = generate(desk_model, cfg, 8)
            assert all(r.final < r.initial for r in reports)
        for (m, v), b in zip(before, desk_model.batchnorms()):
            np.testing.assert_array_equal(m, b.state.running_mean)
            np.testing.assert_array_equal(v, b.state.running_var)
        for w, p in zip(weights, desk_model.parameters()):
            np.testing.assert_array_equal(w, p.data)

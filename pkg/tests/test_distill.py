"""Distillation losses and the fine-tuning loop."""

import math

import numpy as np
import pytest

from lrnas.dataset import ImageSet
from lrnas.distill import DistillConfig, feature_mse, finetune, kd_loss, per_layer_mse_loss, save_log
from lrnas.errors import ContractError, TrainingError
from lrnas.lrspace import enumerate_space
from lrnas.netgraph import INPUT, Add, BuildingBlock, Conv, NetworkGraph, build_desk_model, evaluate, substitute
from lrnas.tensor import Tensor, cross_entropy
from oracles import numeric_grad, rel_error


def parallel_graph(b1=None, b2=None):
    """Two target convs reading the input side by side, summed."""
    w = np.eye(2, dtype=np.float32).reshape(2, 2, 1, 1)
    layers = [
        Conv("c1", [INPUT], w.copy(), b1, in_size=3),
        Conv("c2", [INPUT], w.copy() * 2, b2, in_size=3),
        Add("sum", ["c1", "c2"]),
    ]
    return NetworkGraph((2, 3, 3), layers, targets=["c1", "c2"])


def compressed_desk(seed=0):
    teacher = build_desk_model(seed)
    conv = teacher.layer("c4")
    student = substitute(teacher, "c4", BuildingBlock.from_configs(conv, [enumerate_space(32, 32, 3)[40]]))
    return student, teacher


def labelled(n, seed=0):
    rng = np.random.default_rng(seed)
    return ImageSet(rng.standard_normal((n, 3, 16, 16)).astype(np.float32), rng.integers(0, 10, n).astype(np.int32))


class TestLosses:
    def test_offset_fixture(self):
        teacher = parallel_graph()
        student = parallel_graph(np.full(2, 0.3, np.float32), np.full(2, -0.7, np.float32))
        x = np.random.default_rng(0).standard_normal((4, 2, 3, 3)).astype(np.float32)
        assert per_layer_mse_loss(student, teacher, x).item() == pytest.approx(0.3**2 + 0.7**2, rel=1e-5)
        assert per_layer_mse_loss(teacher, teacher, x).item() == 0.0

    def test_full_rank_student_is_nearly_teacher(self):
        from test_netgraph import full_rank_block

        teacher = build_desk_model(0)
        student = substitute(teacher, "c5", full_rank_block(teacher.layer("c5")))
        x = np.random.default_rng(0).standard_normal((4, 3, 16, 16)).astype(np.float32)
        assert per_layer_mse_loss(student, teacher, x).item() < 1e-6

    def test_missing_correspondence(self):
        t = Tensor(np.zeros((1, 2)))
        with pytest.raises(ContractError, match="'c9'"):
            feature_mse({"c1": t}, {"c1": t}, ["c1", "c9"])

    def test_hand_computed_two_class(self):
        cfg = DistillConfig(regime="few", temperature=1.0, alpha_kd=0.95)
        s, t = Tensor(np.array([[0.0, 1.0]])), Tensor(np.array([[1.0, 0.0]]))
        value = kd_loss(s, {}, t, {}, np.array([0]), cfg).item()
        expected = 0.95 * math.tanh(0.5) + 0.05 * math.log(1 + math.e)
        assert value == pytest.approx(expected)

    def test_identity_and_endpoints(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.standard_normal((5, 10)))
        feats = {"c": Tensor(rng.standard_normal((5, 3, 2, 2)))}
        y = rng.integers(0, 10, 5)
        ce = cross_entropy(logits, y).item()
        cfg = DistillConfig(regime="few")
        assert kd_loss(logits, feats, logits, feats, y, cfg).item() == pytest.approx(0.05 * ce)
        other = Tensor(rng.standard_normal((5, 10)))
        no_label = kd_loss(other, feats, logits, feats, y, DistillConfig(alpha_kd=1.0)).item()
        only_label = kd_loss(other, feats, logits, feats, y, DistillConfig(alpha_kd=0.0)).item()
        assert only_label == pytest.approx(cross_entropy(other, y).item())
        shuffled = y[::-1].copy()
        assert kd_loss(other, feats, logits, feats, shuffled, DistillConfig(alpha_kd=1.0)).item() == no_label

    def test_kl_direction_teacher_first(self):
        p = np.array([[2.0, 0.0, -1.0]])
        q = np.array([[0.0, 0.5, 0.5]])
        cfg = DistillConfig(alpha_kd=1.0, temperature=1.0)
        value = kd_loss(Tensor(q), {}, Tensor(p), {}, np.array([0]), cfg).item()
        sp, sq = np.exp(p) / np.exp(p).sum(), np.exp(q) / np.exp(q).sum()
        assert value == pytest.approx(float((sp * np.log(sp / sq)).sum()))

    def test_gradient(self):
        rng = np.random.default_rng(2)
        s_arr, f_arr = rng.standard_normal((3, 4)), rng.standard_normal((3, 2, 2, 2))
        t_logits, t_feat = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((3, 2, 2, 2)))
        y = np.array([0, 3, 1])
        cfg = DistillConfig(regime="few", temperature=6.0)
        s = Tensor(s_arr.copy(), requires_grad=True, dtype=np.float64)
        f = Tensor(f_arr.copy(), requires_grad=True, dtype=np.float64)
        kd_loss(s, {"c": f}, t_logits, {"c": t_feat}, y, cfg).backward()

        def value():
            s64, f64 = Tensor(s_arr, dtype=np.float64), Tensor(f_arr, dtype=np.float64)
            return kd_loss(s64, {"c": f64}, t_logits, {"c": t_feat}, y, cfg).item()

        gs, gf = numeric_grad(value, [s_arr, f_arr])
        assert rel_error(s.grad, gs) < 1e-3 and rel_error(f.grad, gf) < 1e-3

    def test_config_validation(self):
        for bad in (dict(regime="zero"), dict(alpha_kd=1.5), dict(temperature=0)):
            with pytest.raises(ContractError):
                DistillConfig(**bad)


class TestFinetune:
    def test_lr_below_threshold_returns_input(self):
        student, teacher = compressed_desk()
        cfg = DistillConfig(regime="post", lr=1e-5)
        model, log = finetune(student, teacher, labelled(20), cfg)
        assert len(log["epochs"]) == 1
        for a, b in zip(model.parameters(), student.parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_post_regime_lowers_heldout_mse_and_keeps_teacher(self):
        student, teacher = compressed_desk()
        before = [p.data.copy() for p in teacher.parameters()]
        buffers = [b.state.running_mean.copy() for b in teacher.batchnorms()]
        cfg = DistillConfig(regime="post", lr=0.01, max_epochs=4, batch_size=16)
        model, log = finetune(student, teacher, ImageSet(labelled(80).images), cfg)
        metrics = [e["metric"] for e in log["epochs"]]
        assert log["best_metric"] == min(metrics) < metrics[0]
        for a, p in zip(before, teacher.parameters()):
            np.testing.assert_array_equal(a, p.data)
        for m, b in zip(buffers, teacher.batchnorms()):
            np.testing.assert_array_equal(m, b.state.running_mean)
        assert student.layer("c4") is not model.layer("c4")

    def test_best_checkpoint_is_returned(self, tmp_path):
        student, teacher = compressed_desk()
        val = labelled(60, 7)
        cfg = DistillConfig(regime="few", lr=0.002, max_epochs=3, batch_size=10)
        model, log = finetune(student, teacher, labelled(40, 3), cfg, val=val)
        metrics = [e["metric"] for e in log["epochs"]]
        assert log["best_metric"] == max(metrics) >= metrics[-1]
        assert evaluate(model, (val.images, val.labels))[0] == log["best_metric"]
        save_log(log, tmp_path / "log.json")
        assert (tmp_path / "log.json").read_text().startswith("{")

    def test_full_regime_uses_labels(self):
        student, teacher = compressed_desk()
        val = labelled(30, 7)
        with pytest.raises(ContractError, match="labelled"):
            finetune(student, teacher, ImageSet(val.images), DistillConfig(regime="full"), val=val)
        with pytest.raises(ContractError, match="validation"):
            finetune(student, teacher, val, DistillConfig(regime="full"))
        model, log = finetune(student, teacher, val, DistillConfig(regime="full", max_epochs=1), val=val)
        assert len(log["epochs"]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self):
        student, teacher = compressed_desk()
        cfg = DistillConfig(regime="post", lr=1e25, max_epochs=5, batch_size=4)
        with pytest.raises(TrainingError) as info:
            finetune(student, teacher, ImageSet(labelled(16).images), cfg)
        assert info.value.epoch >= 1

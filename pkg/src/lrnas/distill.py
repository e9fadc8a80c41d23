"""Fine-tuning a compressed student against its uncompressed teacher.

Three regimes share one training loop and differ in data and loss:

* ``post``: unlabelled synthetic images, sum of per-layer output MSEs;
* ``few``: a small labelled subset, per-layer MSE plus softened-logit KL plus
  a small cross-entropy term;
* ``full``: the whole labelled training set, cross-entropy only.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ContractError, TrainingError
from .netgraph import evaluate, iterate_batches
from .tensor import SGD, ReduceOnPlateau, Tensor, cross_entropy, kl_div, mse_loss, no_grad

REGIMES = ("post", "few", "full")


@dataclass
class DistillConfig:
    regime: str = "post"
    alpha_kd: float = 0.95
    temperature: float = 6.0
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay: float = 0.1
    patience: int = 10
    min_lr: float = 1e-4
    max_epochs: int = 100
    batch_size: int = 32
    holdout: float = 0.1
    bn_train: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ContractError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if not 0 <= self.alpha_kd <= 1:
            raise ContractError("alpha_kd must lie in [0, 1]")
        if not self.temperature > 0:
            raise ContractError("temperature must be positive")

    def to_dict(self):
        return asdict(self)


def _layer_pairs(student_feats, teacher_feats, layer_ids):
    pairs = []
    for lid in layer_ids:
        if lid not in student_feats or lid not in teacher_feats:
            raise ContractError(f"no student/teacher output correspondence for layer {lid!r}")
        pairs.append((student_feats[lid], teacher_feats[lid]))
    return pairs


def feature_mse(student_feats, teacher_feats, layer_ids):
    total = None
    for s, t in _layer_pairs(student_feats, teacher_feats, layer_ids):
        term = mse_loss(s, t)
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def teacher_outputs(teacher, x):
    with no_grad():
        return teacher.forward(x, capture=True)


def per_layer_mse_loss(student, teacher, batch, training=False):
    """Sum over compression targets of the mean-squared difference of layer outputs."""
    t_logits, t_feats = teacher_outputs(teacher, batch)
    s_logits, s_feats = student.forward(batch, training=training, capture=True, bn_momentum=0.0)
    return feature_mse(s_feats, t_feats, teacher.targets)


def kd_loss(student_logits, student_feats, teacher_logits, teacher_feats, labels, cfg: DistillConfig,
            layer_ids=None):
    """Per-layer MSE + alpha * T^2 * KL(teacher || student) + (1 - alpha) * CE."""
    layer_ids = list(student_feats) if layer_ids is None else layer_ids
    loss = feature_mse(student_feats, teacher_feats, layer_ids)
    t_logits = teacher_logits if isinstance(teacher_logits, Tensor) else Tensor(teacher_logits)
    t = cfg.temperature
    if cfg.alpha_kd > 0:
        loss = loss + kl_div(t_logits.detach(), student_logits, t) * (cfg.alpha_kd * t * t)
    if cfg.alpha_kd < 1:
        loss = loss + cross_entropy(student_logits, labels) * (1.0 - cfg.alpha_kd)
    return loss


def _holdout_split(images, fraction, rng):
    n = len(images)
    k = max(1, int(round(n * fraction))) if n > 1 else 0
    order = rng.permutation(n)
    return images[np.sort(order[k:])], images[np.sort(order[:k])]


def synthetic_mse(student, teacher, images, batch_size=64):
    """Mean per-layer MSE over ``images`` with both networks in eval mode."""
    total, n = 0.0, 0
    with no_grad():
        for x, _ in iterate_batches(images, None, batch_size):
            _, t_feats = teacher.forward(x, capture=True)
            _, s_feats = student.forward(x, capture=True)
            total += feature_mse(s_feats, t_feats, teacher.targets).item() * len(x)
            n += len(x)
    return total / max(n, 1)


def _snapshot(graph):
    params = [p.data.copy() for p in graph.parameters()]
    bn = [(b.state.running_mean.copy(), b.state.running_var.copy()) for b in graph.batchnorms()]
    return params, bn


def _restore(graph, snap):
    params, bn = snap
    for p, d in zip(graph.parameters(), params):
        p.data[...] = d
    for b, (m, v) in zip(graph.batchnorms(), bn):
        b.state.running_mean = m.copy()
        b.state.running_var = v.copy()


def finetune(student, teacher, train, cfg: DistillConfig, val=None, log=None):
    """Train a clone of ``student`` under ``cfg.regime`` and return ``(best_model, history)``.

    ``train`` is an ImageSet (unlabelled synthetic for ``post``, labelled
    otherwise). Few and full regimes schedule on held-out top-1 of ``val``;
    the post regime on per-layer MSE over a held-out slice of the synthetic
    images. The learning rate drops by ``decay`` after ``patience`` stagnant
    epochs and training stops once it falls below ``min_lr`` or after
    ``max_epochs``.
    """
    rng = np.random.default_rng(cfg.seed)
    model = student.clone()
    images = train.images
    labels = train.labels
    if cfg.regime == "post":
        images, held = _holdout_split(images, cfg.holdout, rng)
    else:
        if labels is None:
            raise ContractError(f"regime {cfg.regime!r} needs labelled data")
        if val is None:
            raise ContractError(f"regime {cfg.regime!r} needs a validation set for scheduling")
    params = model.parameters()
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    mode = "min" if cfg.regime == "post" else "max"
    sched = ReduceOnPlateau(opt, mode, cfg.decay, cfg.patience)

    def metric():
        if cfg.regime == "post":
            return synthetic_mse(model, teacher, held)
        return evaluate(model, val)[0]

    history = []
    best_snap = _snapshot(model)
    best_metric = metric()
    sched.step(best_metric)
    history.append({"epoch": 0, "loss": None, "lr": opt.lr, "metric": best_metric})
    epoch = 0
    while opt.lr >= cfg.min_lr and epoch < cfg.max_epochs:
        epoch += 1
        losses = []
        for x, y in iterate_batches(images, labels if cfg.regime != "post" else None, cfg.batch_size, rng):
            opt.zero_grad()
            s_logits, s_feats = model.forward(x, training=cfg.bn_train, capture=True, bn_momentum=0.0)
            if cfg.regime == "full":
                loss = cross_entropy(s_logits, y)
            else:
                t_logits, t_feats = teacher_outputs(teacher, x)
                if cfg.regime == "post":
                    loss = feature_mse(s_feats, t_feats, teacher.targets)
                else:
                    loss = kd_loss(s_logits, s_feats, t_logits, t_feats, y, cfg, teacher.targets)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite fine-tuning loss in epoch {epoch}", epoch=epoch)
            loss.backward()
            opt.step()
            losses.append(value)
        m = metric()
        lr_used = opt.lr
        if sched.step(m):
            best_metric, best_snap = m, _snapshot(model)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr_used, "metric": m})
        if log is not None:
            log(history[-1])
    _restore(model, best_snap)
    return model, {"config": cfg.to_dict(), "best_metric": best_metric, "epochs": history}


def save_log(history, path):
    Path(path).write_text(json.dumps(history, indent=1, sort_keys=True))

"""Data-free synthetic images matched to a network's batch-norm statistics.

Random Gaussian images are optimised so that the per-channel batch mean and
standard deviation at every BN input match the running statistics stored in
the pretrained network, while the images themselves stay near zero mean and
unit variance.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import ImageSet
from .errors import ContractError
from .netgraph import frozen
from .tensor import Adam, ReduceOnPlateau, Tensor

SQRT_EPS = 1e-12


class SynthesisWarning(UserWarning):
    """A synthetic batch did not reach the required loss reduction."""


@dataclass
class BNTargets:
    """Running mean and standard deviation per BN layer id."""

    means: dict
    stds: dict

    @classmethod
    def from_graph(cls, graph):
        bns = graph.batchnorms()
        if not bns:
            raise ContractError("graph has no batch-norm layers")
        means = {b.id: b.state.running_mean.astype(np.float64) for b in bns}
        stds = {b.id: np.sqrt(b.state.running_var.astype(np.float64)) for b in bns}
        bad = [k for k, s in stds.items() if not np.all(s > 0)]
        if bad:
            raise ContractError(f"running std must be positive, not so for {bad}")
        return cls(means, stds)


@dataclass
class SynthConfig:
    alpha: float = 1.0
    iterations: int = 500
    lr: float = 0.25
    patience: int = 100
    decay: float = 0.1
    batch_size: int = 32
    scaled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ContractError("iterations and batch size must be >= 1")

    def to_dict(self):
        return asdict(self)


def _std(t, axis=None):
    return t.var(axis=axis).sqrt(eps=SQRT_EPS)


def bn_loss(images, graph, targets: BNTargets, alpha=1.0, scaled=True):
    """Image-prior term plus squared mismatch of every BN layer's batch statistics.

    Batch statistics come from a train-mode forward that leaves the running
    buffers untouched (momentum 0). With ``scaled`` each layer's sum over
    channels is divided by its channel count.
    """
    _, cap = graph.forward(images, training=True, bn_momentum=0.0, capture_bn=True)
    mu_i = images.mean()
    sd_i = _std(images)
    loss = (mu_i * mu_i + (sd_i - 1.0) ** 2) * alpha
    for bid, mean in targets.means.items():
        x = cap.get(f"bn:{bid}")
        if x is None:
            raise ContractError(f"BN layer {bid!r} was not reached by the forward pass")
        mu = x.mean(axis=(0, 2, 3))
        sd = _std(x, axis=(0, 2, 3))
        dm = mu - Tensor(mean, dtype=x.dtype)
        ds = sd - Tensor(targets.stds[bid], dtype=x.dtype)
        term = (dm * dm + ds * ds).sum()
        if scaled:
            term = term * (1.0 / len(mean))
        loss = loss + term
    return loss


@dataclass
class BatchReport:
    index: int
    initial: float
    final: float
    trace: list = field(default_factory=list)

    @property
    def ratio(self):
        return self.final / self.initial if self.initial > 0 else 0.0

    def to_dict(self):
        return {"index": self.index, "initial": self.initial, "final": self.final, "ratio": self.ratio}


def batch_rng(seed, index):
    return np.random.default_rng([seed, index])


def optimize_batch(graph, cfg: SynthConfig, index, targets=None):
    """Optimise one independently seeded batch; returns ``(images, report)``."""
    targets = targets or BNTargets.from_graph(graph)
    rng = batch_rng(cfg.seed, index)
    shape = (cfg.batch_size,) + tuple(graph.input_shape)
    x = Tensor(rng.standard_normal(shape).astype(np.float32), requires_grad=True)
    opt = Adam([x], cfg.lr)
    sched = ReduceOnPlateau(opt, "min", cfg.decay, cfg.patience)
    trace = []
    best, best_x = np.inf, x.data.copy()
    with frozen(graph.parameters()):
        for _ in range(cfg.iterations):
            opt.zero_grad()
            loss = bn_loss(x, graph, targets, cfg.alpha, cfg.scaled)
            value = loss.item()
            trace.append(value)
            if value < best:
                best, best_x = value, x.data.copy()
            loss.backward()
            opt.step()
            sched.step(value)
        with_final = bn_loss(Tensor(x.data), graph, targets, cfg.alpha, cfg.scaled).item()
    if with_final < best:
        best, best_x = with_final, x.data.copy()
    trace.append(with_final)
    report = BatchReport(index, trace[0], best, trace)
    if report.ratio > 0.1:
        warnings.warn(
            f"synthetic batch {index} only reached {report.ratio:.3f} of its initial loss; trace tail "
            f"{[round(v, 4) for v in trace[-5:]]}",
            SynthesisWarning,
            stacklevel=2,
        )
    return best_x, report


def generate(graph, cfg: SynthConfig, count, log=None):
    """``ceil(count / batch_size)`` batches, concatenated and cut to ``count`` images.

    Returns ``(ImageSet, reports)``; the running BN buffers of ``graph`` are not modified.
    """
    if count < 0:
        raise ContractError("count must be non-negative")
    shape = tuple(graph.input_shape)
    if count == 0:
        return ImageSet(np.zeros((0,) + shape, dtype=np.float32), None, _meta(cfg, 0, shape)), []
    targets = BNTargets.from_graph(graph)
    n_batches = -(-count // cfg.batch_size)
    chunks, reports = [], []
    for b in range(n_batches):
        images, report = optimize_batch(graph, cfg, b, targets)
        chunks.append(images)
        reports.append(report)
        if log is not None:
            log(report)
    images = np.concatenate(chunks)[:count].astype(np.float32)
    return ImageSet(images, None, _meta(cfg, count, shape)), reports


def _meta(cfg, count, shape):
    return {"kind": "synthetic", "count": count, "shape": list(shape), "seed": cfg.seed, "config": cfg.to_dict()}

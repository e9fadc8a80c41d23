"""The per-layer low-rank design space.

A :class:`BlockConfig` fixes how a convolution weight ``W`` (f, c, kh, kw) is
sliced into ``g0 * g1`` blocks, which spatial kernel dimensions go to the
first or second low-rank convolution, and how many singular values each
slice keeps. :func:`derive_weights` turns a config into the two convolution
weights without data, :func:`reconstruct` maps them back to a single
equivalent kernel.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from .errors import ArtifactError, ContractError, DimensionError
from .tensor import svd

FLOPS_GRID = "flops-grid"
TOO_MANY_WEIGHTS = "low-rank layers do not hold fewer weights than the original"
ACCURACY_PROXY = "accuracy-proxy"


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _is_prime(n):
    return n > 1 and all(n % d for d in range(2, int(n**0.5) + 1))


def divisors(n):
    return [d for d in range(1, n + 1) if n % d == 0]


@dataclass(frozen=True, order=True)
class BlockConfig:
    """One point of the space: kernel split, group pair and per-slice rank.

    ``k0``/``k1`` are the (height, width) kernels of the first and second
    low-rank convolution; ``g0`` groups the first, ``g1`` the second.
    """

    k0: tuple
    k1: tuple
    g0: int
    g1: int
    rank: int

    @property
    def split(self):
        return (self.k0, self.k1)

    @property
    def max_groups(self):
        return max(self.g0, self.g1)

    @property
    def mid_channels(self):
        return self.rank * self.max_groups

    def first_shape(self, f, c):
        return (self.mid_channels, c // self.g0, *self.k0)

    def second_shape(self, f, c):
        return (f, self.mid_channels // self.g1, *self.k1)

    def param_count(self, f, c):
        return int(np.prod(self.first_shape(f, c))) + int(np.prod(self.second_shape(f, c)))

    def rank_bound(self, f, c):
        """Rank of the sliced matrix: min of its two extents."""
        rows = (f // self.g1) * self.k1[0] * self.k1[1]
        cols = (c // self.g0) * self.k0[0] * self.k0[1]
        return min(rows, cols)

    def violations(self, f, c, kernel):
        kh, kw = _pair(kernel)
        out = []
        if self.k0[0] * self.k1[0] != kh or self.k0[1] * self.k1[1] != kw:
            out.append("kernel split does not multiply to the layer kernel")
        if min(self.g0, self.g1) != 1:
            out.append("both low-rank layers are grouped")
        if self.g0 < 1 or self.g1 < 1 or c % self.g0 or f % self.g1:
            out.append("group numbers must divide channels (g0) and filters (g1)")
            return out
        if self.rank < 1:
            out.append("rank must be positive")
        if self.param_count(f, c) >= f * c * kh * kw:
            out.append(TOO_MANY_WEIGHTS)
        if self.rank > self.rank_bound(f, c):
            out.append("rank exceeds the sliced matrix rank")
        return out

    def is_valid(self, f, c, kernel):
        return not self.violations(f, c, kernel)

    def with_rank(self, rank):
        return BlockConfig(self.k0, self.k1, self.g0, self.g1, rank)

    def label(self):
        return f"{self.k0[0]}x{self.k0[1]}+{self.k1[0]}x{self.k1[1]}/g{self.g0},{self.g1}/r{self.rank}"

    def to_dict(self):
        return {
            "kernel_split": [list(self.k0), list(self.k1)],
            "g0": self.g0,
            "g1": self.g1,
            "rank": self.rank,
        }

    @classmethod
    def from_dict(cls, d):
        k0, k1 = d["kernel_split"]
        return cls(tuple(int(v) for v in k0), tuple(int(v) for v in k1), int(d["g0"]), int(d["g1"]), int(d["rank"]))


def kernel_splits(kernel):
    """All (k0, k1) with k0 * k1 = kernel per spatial dimension, each dim going wholly to one layer."""
    kh, kw = _pair(kernel)
    per_dim = [sorted({(1, k), (k, 1)}) for k in (kh, kw)]
    splits = []
    for (h0, h1), (w0, w1) in itertools.product(*per_dim):
        splits.append(((h0, w0), (h1, w1)))
    return sorted(set(splits))


def group_pairs(f, c):
    pairs = [(1, 1)]
    pairs += [(g, 1) for g in divisors(c) if g > 1]
    pairs += [(1, g) for g in divisors(f) if g > 1]
    return pairs


def enumerate_space(f, c, kernel):
    """Every config satisfying the split, group, weight-count and rank-bound constraints."""
    kh, kw = _pair(kernel)
    for k in (kh, kw):
        if k != 1 and not _is_prime(k):
            raise ContractError(f"kernel extent {k} is neither 1 nor prime")
    total = f * c * kh * kw
    out = []
    for k0, k1 in kernel_splits((kh, kw)):
        for g0, g1 in group_pairs(f, c):
            probe = BlockConfig(k0, k1, g0, g1, 1)
            per_rank = probe.param_count(f, c)
            bound = probe.rank_bound(f, c)
            # weight count is linear in rank: r * per_rank < total
            r_max = min(bound, (total - 1) // per_rank)
            out.extend(BlockConfig(k0, k1, g0, g1, r) for r in range(1, r_max + 1))
    return out


# ---------------------------------------------------------------------------
# geometry of the two low-rank convolutions


@dataclass(frozen=True)
class ConvGeometry:
    """Shape of one convolution as seen by the cost model and the block builder."""

    filters: int
    channels: int
    kernel: tuple
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    in_size: tuple = (1, 1)
    groups: int = 1
    bias: bool = False

    @property
    def out_size(self):
        return tuple(
            (n + 2 * p - k) // s + 1 for n, k, s, p in zip(self.in_size, self.kernel, self.stride, self.padding)
        )


def branch_geometry(cfg, geom):
    """Geometry of the first and second low-rank convolution replacing ``geom``.

    Per spatial dimension the layer whose kernel extent is > 1 takes that
    dimension's stride and padding; if neither does, the first layer takes it.
    """
    s0, s1, p0, p1 = [1, 1], [1, 1], [0, 0], [0, 0]
    for m in range(2):
        if cfg.k1[m] > 1 and cfg.k0[m] == 1:
            s1[m], p1[m] = geom.stride[m], geom.padding[m]
        else:
            s0[m], p0[m] = geom.stride[m], geom.padding[m]
    first = ConvGeometry(
        cfg.mid_channels, geom.channels, tuple(cfg.k0), tuple(s0), tuple(p0), tuple(geom.in_size), cfg.g0, False
    )
    second = ConvGeometry(
        geom.filters, cfg.mid_channels, tuple(cfg.k1), tuple(s1), tuple(p1), first.out_size, cfg.g1, geom.bias
    )
    return first, second


# ---------------------------------------------------------------------------
# weight derivation


def _slice_matrix(w, split, g0, g1, q, p):
    f, c, kh, kw = w.shape
    fq, cp = f // g1, c // g0
    (kh0, kw0), (kh1, kw1) = split
    block = w[q * fq : (q + 1) * fq, p * cp : (p + 1) * cp]
    block = block.reshape(fq, cp, kh0, kh1, kw0, kw1)
    return block.transpose(0, 3, 5, 1, 2, 4).reshape(fq * kh1 * kw1, cp * kh0 * kw0)


def _matrix_to_slice(m, split, fq, cp):
    (kh0, kw0), (kh1, kw1) = split
    block = m.reshape(fq, kh1, kw1, cp, kh0, kw0).transpose(0, 3, 4, 1, 5, 2)
    return block.reshape(fq, cp, kh0 * kh1, kw0 * kw1)


class Factorizer:
    """Caches the per-slice SVDs of one weight tensor across configs sharing a scheme."""

    def __init__(self, weight):
        self.weight = np.asarray(weight.data if hasattr(weight, "data") else weight)
        if self.weight.ndim != 4:
            raise DimensionError(f"expected a 4-d weight, got shape {self.weight.shape}")
        self._cache = {}

    @property
    def shape(self):
        return self.weight.shape

    def spectra(self, split, g0, g1):
        key = (tuple(map(tuple, split)), g0, g1)
        if key not in self._cache:
            self._cache[key] = [
                svd(_slice_matrix(self.weight, split, g0, g1, q, p)) for q in range(g1) for p in range(g0)
            ]
        return self._cache[key]

    def derive(self, cfg, strict=True):
        """Weights ``(w0, w1)`` of both low-rank convolutions.

        ``strict=False`` also admits configs holding at least as many weights as
        the original layer, such as full rank.
        """
        f, c, kh, kw = self.weight.shape
        problems = cfg.violations(f, c, (kh, kw))
        if not strict:
            problems = [p for p in problems if p != TOO_MANY_WEIGHTS]
        if problems:
            raise ContractError(f"config {cfg.label()} invalid for weight {self.weight.shape}: {problems[0]}")
        fq, cp = f // cfg.g1, c // cfg.g0
        (kh0, kw0), (kh1, kw1) = cfg.split
        r = cfg.rank
        firsts, rows = [], []
        results = self.spectra(cfg.split, cfg.g0, cfg.g1)
        for q in range(cfg.g1):
            seconds = []
            for p in range(cfg.g0):
                res = results[q * cfg.g0 + p].truncate(r)
                root = np.sqrt(res.s)
                left = res.u * root  # (fq*kh1*kw1, r)
                right = root[:, None] * res.v  # (r, cp*kh0*kw0)
                firsts.append(right.reshape(r, cp, kh0, kw0))
                seconds.append(left.reshape(fq, kh1, kw1, r).transpose(0, 3, 1, 2))
            rows.append(np.concatenate(seconds, axis=1))
        w0 = np.ascontiguousarray(np.concatenate(firsts, axis=0), dtype=self.weight.dtype)
        w1 = np.ascontiguousarray(np.concatenate(rows, axis=0), dtype=self.weight.dtype)
        return w0, w1

    def truncation_error(self, cfg):
        """sqrt of the discarded spectral energy summed over slices."""
        total = 0.0
        for res in self.spectra(cfg.split, cfg.g0, cfg.g1):
            tail = np.asarray(res.s[cfg.rank :], dtype=np.float64)
            total += float(tail @ tail)
        return float(np.sqrt(total))


def derive_weights(weight, cfg, factorizer=None, strict=True):
    """Data-free low-rank weights (first, second) for ``cfg``.

    Each slice keeps its top ``cfg.rank`` singular triplets with the square
    root of every singular value folded into both factors. Slices are stacked
    group-major, so the first convolution (groups ``g0``) emits
    ``rank * max(g0, g1)`` channels consumed by the second (groups ``g1``).
    """
    fac = factorizer if factorizer is not None else Factorizer(weight)
    return fac.derive(cfg, strict)


def reconstruct(cfg, w0, w1):
    """The single kernel whose convolution equals the two-stage low-rank convolution."""
    w0 = np.asarray(w0.data if hasattr(w0, "data") else w0)
    w1 = np.asarray(w1.data if hasattr(w1, "data") else w1)
    r, mid = cfg.rank, cfg.mid_channels
    if w0.ndim != 4 or w1.ndim != 4:
        raise ContractError("low-rank factors must be 4-d")
    f = w1.shape[0]
    c = w0.shape[1] * cfg.g0
    if w0.shape != cfg.first_shape(f, c) or w1.shape != cfg.second_shape(f, c) or f % cfg.g1:
        raise ContractError(
            f"factor shapes {w0.shape}, {w1.shape} inconsistent with config {cfg.label()}"
        )
    fq, cp = f // cfg.g1, c // cfg.g0
    (kh0, kw0), (kh1, kw1) = cfg.split
    out = np.zeros((f, c, kh0 * kh1, kw0 * kw1), dtype=np.result_type(w0, w1))
    for q in range(cfg.g1):
        for p in range(cfg.g0):
            first = w0[(q * cfg.g0 + p) * r : (q * cfg.g0 + p + 1) * r].reshape(r, cp * kh0 * kw0)
            second = w1[q * fq : (q + 1) * fq, p * r : (p + 1) * r]
            left = second.transpose(0, 2, 3, 1).reshape(fq * kh1 * kw1, r)
            out[q * fq : (q + 1) * fq, p * cp : (p + 1) * cp] = _matrix_to_slice(left @ first, cfg.split, fq, cp)
    assert mid == w0.shape[0]
    return out


@dataclass
class Branch:
    """One low-rank branch: config plus its two derived weights."""

    config: BlockConfig
    w0: np.ndarray
    w1: np.ndarray

    def reconstruct(self):
        return reconstruct(self.config, self.w0, self.w1)


@dataclass
class BranchPlan:
    """Branch 0 approximates W; branch 1 (optional) approximates the residual of branch 0."""

    branches: list = field(default_factory=list)

    def reconstruct(self):
        return sum(b.reconstruct() for b in self.branches)


def residual_error(weight, plan):
    """W minus what the already-materialised branches reproduce."""
    if not plan.branches:
        raise ContractError("residual_error needs branch 0 to be materialised")
    w = np.asarray(weight.data if hasattr(weight, "data") else weight)
    return w - plan.reconstruct().astype(w.dtype)


# ---------------------------------------------------------------------------
# pruning


def grid_points(gamma, step=0.05):
    lo, hi = gamma
    if not (0 < lo <= hi < 1):
        raise ContractError(f"grid endpoints must satisfy 0 < lo <= hi < 1, got {gamma}")
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return [round(lo + i * step, 10) for i in range(n)]


def prune_by_flops(space, ratio_fn: Callable, gamma, step=0.05):
    """Keep, for each grid point, the config whose FLOPs ratio is nearest to it.

    ``ratio_fn(cfg)`` returns candidate FLOPs / original-layer FLOPs. Ties go
    to the cheaper candidate, then to enumeration order. Duplicates are dropped.
    """
    points = grid_points(gamma, step)
    space = list(space)
    if not space:
        return []
    ratios = np.array([ratio_fn(cfg) for cfg in space], dtype=np.float64)
    kept = []
    for rho in points:
        dist = np.abs(ratios - rho)
        best = np.flatnonzero(dist == dist.min())
        pick = min(best, key=lambda i: (ratios[i], i))
        if space[pick] not in kept:
            kept.append(space[pick])
    return kept


def prune_by_accuracy(space, graph, layer_id, proxy_images, proxy_labels, tau_proxy, factorizer=None,
                      baseline_top1=None):
    """Drop configs whose single-layer substitution costs more than ``tau_proxy`` pp of top-1.

    Returns ``(kept, degradations)`` where ``degradations`` maps every config to
    its measured drop in percentage points.
    """
    from .netgraph import BuildingBlock, evaluate, original_layer, substitute

    if baseline_top1 is None:
        baseline_top1 = evaluate(graph, [(proxy_images, proxy_labels)])[0]
    layer = original_layer(graph, layer_id)
    fac = factorizer if factorizer is not None else Factorizer(layer.weight.data)
    kept, drops = [], {}
    for cfg in space:
        block = BuildingBlock.from_configs(layer, [cfg], factorizer=fac)
        top1 = evaluate(substitute(graph, layer_id, block), [(proxy_images, proxy_labels)])[0]
        drop = 100.0 * (baseline_top1 - top1)
        drops[cfg] = drop
        if drop <= tau_proxy:
            kept.append(cfg)
    return kept, drops


# ---------------------------------------------------------------------------
# table of surviving candidates


@dataclass
class TableEntry:
    config: BlockConfig
    flops: int
    params: int
    pruned_by: Optional[str] = None

    def to_dict(self):
        d = self.config.to_dict()
        d.update(flops=int(self.flops), params=int(self.params), pruned_by=self.pruned_by)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(BlockConfig.from_dict(d), int(d["flops"]), int(d["params"]), d.get("pruned_by"))


@dataclass
class LRSpaceTable:
    """Per target layer: every enumerated config with its cost and pruning provenance."""

    layers: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def retained(self, layer_id):
        return [e.config for e in self.layers.get(layer_id, []) if e.pruned_by is None]

    def mark(self, layer_id, keep: Iterable[BlockConfig], reason):
        keep = set(keep)
        for e in self.layers[layer_id]:
            if e.pruned_by is None and e.config not in keep:
                e.pruned_by = reason

    def counts(self):
        return {lid: len(entries) for lid, entries in self.layers.items()}

    def to_json(self):
        return {
            "meta": self.meta,
            "layers": {lid: [e.to_dict() for e in entries] for lid, entries in self.layers.items()},
        }

    @classmethod
    def from_json(cls, doc):
        return cls(
            {lid: [TableEntry.from_dict(e) for e in entries] for lid, entries in doc["layers"].items()},
            dict(doc.get("meta", {})),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
            return cls.from_json(doc)
        except FileNotFoundError:
            raise ArtifactError(path, "file not found") from None
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ArtifactError(path, f"not a valid LR-space table ({exc})") from None

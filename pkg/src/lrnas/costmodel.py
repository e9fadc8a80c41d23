"""FLOPs, parameter and latency accounting.

FLOPs are counted as twice the multiply-accumulate count. Only convolutions
and fully-connected layers cost anything, except for the element-wise add
that joins the two branches of a residual building block (one FLOP per
output element).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ArtifactError, ContractError, LatencyLookupError
from .lrspace import BlockConfig, BranchPlan, ConvGeometry, branch_geometry
from .tensor import Tensor, stack


@dataclass(frozen=True)
class CostReport:
    flops: int = 0
    params: int = 0
    latency_ms: Optional[float] = None

    def __add__(self, other):
        lat = None
        if self.latency_ms is not None or other.latency_ms is not None:
            lat = (self.latency_ms or 0.0) + (other.latency_ms or 0.0)
        return CostReport(self.flops + other.flops, self.params + other.params, lat)

    def to_dict(self):
        return {"flops": int(self.flops), "params": int(self.params), "latency_ms": self.latency_ms}


def conv_cost(f, c, kh, kw, groups, out_h, out_w, bias=False):
    """Cost of one (grouped) convolution producing an ``out_h`` x ``out_w`` map."""
    if groups < 1 or f % groups or c % groups:
        raise ContractError(f"groups={groups} must divide filters {f} and channels {c}")
    params = f * (c // groups) * kh * kw
    flops = 2 * params * out_h * out_w
    return CostReport(int(flops), int(params + (f if bias else 0)))


def fc_cost(in_features, out_features, bias=True):
    macs = in_features * out_features
    return CostReport(2 * macs, macs + (out_features if bias else 0))


def geometry_cost(geom: ConvGeometry):
    oh, ow = geom.out_size
    return conv_cost(geom.filters, geom.channels, *geom.kernel, geom.groups, oh, ow, geom.bias)


def _configs(plan):
    if isinstance(plan, BlockConfig):
        return [plan]
    if isinstance(plan, BranchPlan):
        return [b.config for b in plan.branches]
    return list(plan)


def block_cost(plan, geom: ConvGeometry):
    """Cost of a 1- or 2-branch block replacing the convolution ``geom``.

    ``plan`` is a BlockConfig, a BranchPlan, or a sequence of configs. Only
    branch 0 carries the original bias.
    """
    configs = _configs(plan)
    if not 1 <= len(configs) <= 2:
        raise ContractError(f"a block has 1 or 2 branches, got {len(configs)}")
    total = CostReport()
    for b, cfg in enumerate(configs):
        first, second = branch_geometry(cfg, geom)
        if b > 0:
            second = ConvGeometry(second.filters, second.channels, second.kernel, second.stride,
                                  second.padding, second.in_size, second.groups, False)
        total = total + geometry_cost(first) + geometry_cost(second)
    if len(configs) == 2:
        oh, ow = geom.out_size
        total = total + CostReport(geom.filters * oh * ow, 0)
    return total


def flops_ratio_fn(geom: ConvGeometry, base: Sequence[BlockConfig] = ()):
    """``cfg -> FLOPs(base + [cfg]) / FLOPs(original layer)``."""
    orig = geometry_cost(geom).flops
    base = list(base)
    return lambda cfg: block_cost(base + [cfg], geom).flops / orig


def model_cost(graph, latency_table=None):
    """Sum of per-layer costs; latency is filled in when a table is supplied."""
    total = CostReport()
    for layer in graph.layers:
        total = total + layer_cost(layer)
    if latency_table is not None:
        total = CostReport(total.flops, total.params, latency_cost(graph, latency_table))
    return total


def layer_cost(layer):
    kind = layer.kind
    if kind == "conv":
        return geometry_cost(layer.geometry)
    if kind == "fc":
        return fc_cost(layer.in_features, layer.out_features, layer.bias is not None)
    if kind == "block":
        return block_cost(layer.configs, layer.geometry)
    if kind == "superblock":
        raise ContractError(f"super block {layer.id!r} has no fixed cost; select a candidate first")
    return CostReport()


# ---------------------------------------------------------------------------
# supernet cost


def expected_supernet_cost(candidate_costs, weights):
    """Sum over blocks of the weighted candidate costs, differentiable in ``weights``.

    ``candidate_costs[i]`` is a 1-d array of costs for block i; ``weights[i]``
    the matching Tensor on the simplex.
    """
    total = None
    for costs, w in zip(candidate_costs, weights):
        c = np.asarray(costs, dtype=w.dtype if isinstance(w, Tensor) else np.float64)
        term = (w * Tensor(c, dtype=c.dtype)).sum()
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return total


def pair_inclusion_probs(probs):
    """Inclusion probability of each index when two distinct indices are drawn sequentially.

    The first draw follows ``probs``; the second follows ``probs`` renormalised
    over the remaining indices.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.size == 1:
        return np.ones(1)
    odds = p / np.maximum(1.0 - p, 1e-300)
    return np.minimum(p * (1.0 + odds.sum() - odds), 1.0)


def sampled_pair_cost(probs, costs, pair):
    """Unbiased estimate of ``sum(probs * costs)`` from a sampled pair of indices.

    Each sampled index contributes ``probs[k] * costs[k] / pi[k]`` with the
    inclusion probability ``pi`` held constant, so both the value and its
    gradient with respect to ``probs`` are unbiased.
    """
    idx = list(pair)
    c = np.asarray(costs, dtype=np.float64)
    if len(c) == 1:
        return probs[0] * 0.0 + float(c[0])
    pi = pair_inclusion_probs(probs.data if isinstance(probs, Tensor) else probs)
    scale = np.array([c[k] / pi[k] for k in idx], dtype=probs.dtype)
    picked = stack([probs[k] for k in idx])
    return (picked * Tensor(scale, dtype=scale.dtype)).sum()


# ---------------------------------------------------------------------------
# latency


def _stride_str(stride):
    sh, sw = stride
    return str(sh) if sh == sw else f"{sh}x{sw}"


def conv_signature(geom: ConvGeometry):
    oh, ow = geom.out_size
    kh, kw = geom.kernel
    return f"conv,{geom.filters},{geom.channels},{kh},{kw},{_stride_str(geom.stride)},{geom.groups},{oh},{ow}"


def fc_signature(in_features, out_features):
    return f"fc,{out_features},{in_features},1,1,1,1,1,1"


def block_signatures(configs, geom):
    sigs = []
    for cfg in _configs(configs):
        sigs.extend(conv_signature(g) for g in branch_geometry(cfg, geom))
    return sigs


def layer_signatures(layer):
    if layer.kind == "conv":
        return [conv_signature(layer.geometry)]
    if layer.kind == "fc":
        return [fc_signature(layer.in_features, layer.out_features)]
    if layer.kind == "block":
        return block_signatures(layer.configs, layer.geometry)
    if layer.kind == "superblock":
        raise ContractError(f"super block {layer.id!r} has no fixed signature set")
    return []


class LatencyTable:
    """Signature -> milliseconds lookup, loaded from or saved to JSON."""

    def __init__(self, entries=None):
        self.entries = dict(entries or {})
        bad = [s for s, ms in self.entries.items() if not ms > 0]
        if bad:
            raise ContractError(f"latency entries must be positive: {bad[:3]}")

    def __len__(self):
        return len(self.entries)

    def __contains__(self, sig):
        return sig in self.entries

    def lookup(self, sig):
        try:
            return self.entries[sig]
        except KeyError:
            raise LatencyLookupError(sig) from None

    def total(self, signatures):
        return float(sum(self.lookup(s) for s in signatures))

    def to_json(self):
        return {"entries": [{"sig": s, "ms": float(ms)} for s, ms in sorted(self.entries.items())]}

    @classmethod
    def from_json(cls, doc):
        return cls({e["sig"]: float(e["ms"]) for e in doc["entries"]})

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path):
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise ArtifactError(path, "file not found") from None
        except (json.JSONDecodeError, KeyError, TypeError, ContractError) as exc:
            raise ArtifactError(path, f"not a valid latency table ({exc})") from None


def latency_cost(obj, table: LatencyTable):
    """Looked-up latency in ms of a graph (any object with ``layers``), a layer, or a signature list."""
    if hasattr(obj, "layers"):
        sigs = [s for layer in obj.layers for s in layer_signatures(layer)]
    elif hasattr(obj, "kind"):
        sigs = layer_signatures(obj)
    else:
        sigs = list(obj)
    return table.total(sigs)


def parse_signature(sig):
    kind, f, c, kh, kw, stride, groups, oh, ow = sig.split(",")
    sh, _, sw = stride.partition("x")
    return kind, int(f), int(c), int(kh), int(kw), (int(sh), int(sw or sh)), int(groups), int(oh), int(ow)


def synthetic_latency_ms(sig, launch_ms=0.004, gflops=2.0, gbytes=4.0, group_penalty=0.35):
    """A roofline-style stand-in for a measured latency.

    Time is a fixed launch overhead plus the larger of compute time and memory
    time, with grouped convolutions running at reduced compute efficiency and
    non-square kernels paying for poorer vectorisation.
    """
    kind, f, c, kh, kw, stride, groups, oh, ow = parse_signature(sig)
    macs = f * (c // groups) * kh * kw * oh * ow
    efficiency = 1.0 / (1.0 + group_penalty * np.log2(groups))
    if kh != kw:
        efficiency *= 0.7
    compute = 2.0 * macs / (gflops * 1e9 * efficiency)
    in_h = (oh - 1) * stride[0] + kh
    in_w = (ow - 1) * stride[1] + kw
    traffic = 4.0 * (c * in_h * in_w + f * oh * ow + f * (c // groups) * kh * kw)
    memory = traffic / (gbytes * 1e9)
    return float(launch_ms + 1e3 * max(compute, memory))


def make_latency_table(signatures, fn: Callable = synthetic_latency_ms):
    return LatencyTable({s: fn(s) for s in sorted(set(signatures))})


# ---------------------------------------------------------------------------
# rank-selection baseline


def lrs2_select_ranks(spectra, cost_fns, lam, mu):
    """Per layer, the minimal r with ``lam*(C(r+1) - C(r)) - mu/2 * s[r+1]^2 >= 0``.

    Ranks are 1-based; if no r below full rank qualifies the full rank is
    returned.
    """
    ranks = []
    for s, cost in zip(spectra, cost_fns):
        s = np.asarray(s, dtype=np.float64)
        full = len(s)
        chosen = full
        for r in range(1, full):
            if lam * (cost(r + 1) - cost(r)) - 0.5 * mu * s[r] ** 2 >= 0:
                chosen = r
                break
        ranks.append(chosen)
    return ranks

"""Differentiable selection of one building block per target layer.

Each target is wrapped in a :class:`~lrnas.netgraph.SuperBlock`. Per batch two
distinct candidates are drawn in proportion to ``softmax(theta)`` and mixed
with Gumbel-Softmax weights; only ``theta`` is trained, against cross-entropy
scaled by the log-cost ratio of the sampled network.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import costmodel
from .errors import ArtifactError, ContractError, NumericError
from .lrspace import Factorizer, LRSpaceTable, enumerate_space, prune_by_flops
from .netgraph import BuildingBlock, SuperBlock, frozen, iterate_batches, original_layer, substitute
from .tensor import Adam, Tensor, cross_entropy, gumbel_softmax, no_grad, softmax


@dataclass
class SearchConfig:
    beta: float = 16.0
    objective: str = "flops"
    epochs_branch0: int = 100
    epochs_branch1: int = 50
    lr: float = 0.01
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 5e-4
    temperature: float = 5.0
    temperature_decay: float = 0.965
    batch_size: int = 250
    batches_per_epoch: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0:
            raise ContractError("beta must be non-negative")
        if self.objective not in ("flops", "latency"):
            raise ContractError(f"objective must be flops or latency, got {self.objective!r}")
        if self.epochs_branch0 < 1 or self.epochs_branch1 < 1:
            raise ContractError("epochs must be >= 1")
        if not self.temperature > 0 or not self.temperature_decay > 0:
            raise ContractError("temperature and its decay must be positive")
        self.betas = tuple(self.betas)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class SearchState:
    thetas: dict
    temperature: float
    epoch: int = 0
    history: list = field(default_factory=list)
    optimizer: Optional[Adam] = None

    def probabilities(self, layer_id):
        t = self.thetas[layer_id].data.astype(np.float64)
        e = np.exp(t - t.max())
        return e / e.sum()


def nas_loss(l_ce, cost_hat, cost_orig, beta):
    """``l_ce * (log(cost_hat) / log(cost_orig)) ** beta``.

    Both costs must exceed 1 so that the logarithms are positive.
    """
    ch = cost_hat if isinstance(cost_hat, Tensor) else Tensor(np.float64(cost_hat), dtype=np.float64)
    if not float(np.min(ch.data)) > 1 or not cost_orig > 1:
        raise ContractError(f"costs must exceed 1, got {float(np.min(ch.data))} and {cost_orig}")
    if not isinstance(l_ce, Tensor):
        l_ce = Tensor(np.float64(l_ce), dtype=np.float64)
    if beta == 0:
        return l_ce * 1.0
    ratio = ch.log() * (1.0 / math.log(cost_orig))
    return l_ce * ratio**beta


# ---------------------------------------------------------------------------
# candidate costs


class CostFn:
    """Maps a target layer's candidates (and the rest of the network) to objective units.

    FLOPs are used as-is; latency is taken from a table and expressed in
    microseconds so that the log-cost ratio stays positive.
    """

    def __init__(self, objective="flops", latency_table=None):
        if objective == "latency" and latency_table is None:
            raise ContractError("the latency objective needs a latency table")
        self.objective = objective
        self.table = latency_table

    def layer(self, layer):
        if self.objective == "flops":
            return float(costmodel.layer_cost(layer).flops)
        return 1e3 * costmodel.latency_cost(layer, self.table)

    def graph_fixed(self, graph, exclude):
        return sum(self.layer(layer) for layer in graph.layers if layer.id not in exclude)

    def original(self, graph):
        return sum(self.layer(original_layer(graph, layer.id) if layer.id in graph.targets else layer)
                   for layer in graph.layers)


# ---------------------------------------------------------------------------
# supernet


def build_supernet(graph, table: LRSpaceTable, cfg: SearchConfig = None, rng=None, factorizers=None):
    """Replace every target with retained candidates by a super block (candidate 0 = original layer).

    Targets without retained candidates keep only their original layer.
    Returns ``(supernet, candidate configs per layer)``.
    """
    cfg = cfg or SearchConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    net = graph
    configs = {}
    for lid in graph.targets:
        retained = table.retained(lid) if lid in table.layers else []
        if not retained:
            continue
        conv = original_layer(graph, lid)
        fac = (factorizers or {}).get(lid) or Factorizer(conv.weight.data)
        cands = [conv] + [BuildingBlock.from_configs(conv, [c], factorizer=fac) for c in retained]
        sb = SuperBlock(lid, conv.inputs, cands, temperature=cfg.temperature, rng=rng)
        net = substitute(net, lid, sb)
        configs[lid] = [None] + [[c] for c in retained]
    return net, configs


def _sample_pair(p, rng):
    """Two distinct indices: the first from ``p``, the second from ``p`` over the rest."""
    n = len(p)
    i = int(rng.choice(n, p=p))
    rest = p.copy()
    rest[i] = 0.0
    j = int(rng.choice(n, p=rest / rest.sum()))
    return [i, j]


def init_state(supernet, cfg: SearchConfig):
    thetas = {sb.id: sb.theta for sb in supernet.superblocks()}
    opt = Adam(list(thetas.values()), cfg.lr, cfg.betas, weight_decay=cfg.weight_decay)
    return SearchState(thetas, cfg.temperature, optimizer=opt)


def search_epoch(state, supernet, batches, cfg: SearchConfig, rng, cost_fn: CostFn, cost_orig):
    """One pass of theta updates over ``batches``; the temperature decays at the end."""
    blocks = supernet.superblocks()
    cand_costs = {sb.id: np.array([cost_fn.layer(c) for c in sb.candidates]) for sb in blocks}
    fixed = cost_fn.graph_fixed(supernet, {sb.id for sb in blocks})
    losses, ces, costs = [], [], []
    for x, y in batches:
        cost_hat = Tensor(np.float64(fixed), dtype=np.float64)
        for sb in blocks:
            sb.temperature = state.temperature
            n = len(sb.candidates)
            if n == 1:
                sb.mixture = ([0], Tensor(np.ones(1, dtype=np.float32)))
                cost_hat = cost_hat + float(cand_costs[sb.id][0])
                continue
            probs = softmax(sb.theta)
            p = probs.data.astype(np.float64)
            pair = _sample_pair(p / p.sum(), rng)
            weights = gumbel_softmax(sb.theta[pair], state.temperature, rng)
            sb.mixture = (pair, weights)
            cost_hat = cost_hat + costmodel.sampled_pair_cost(probs, cand_costs[sb.id], pair)
        logits = supernet.forward(x)
        l_ce = cross_entropy(logits, y)
        loss = nas_loss(l_ce, cost_hat, cost_orig, cfg.beta)
        if not np.isfinite(loss.item()):
            raise NumericError(f"non-finite search loss at epoch {state.epoch}")
        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()
        losses.append(loss.item())
        ces.append(l_ce.item())
        costs.append(float(cost_hat.data))
    for sb in blocks:
        sb.mixture = None
    state.history.append({
        "epoch": state.epoch,
        "loss": float(np.mean(losses)),
        "ce": float(np.mean(ces)),
        "cost": float(np.mean(costs)),
        "temperature": state.temperature,
    })
    state.epoch += 1
    state.temperature *= cfg.temperature_decay
    return state


def run_search(supernet, images, labels, cfg: SearchConfig, epochs, cost_fn, cost_orig, rng, state=None,
               log=None):
    """Train the sampling parameters of ``supernet`` for ``epochs`` epochs; weights stay frozen."""
    state = state or init_state(supernet, cfg)
    if not supernet.superblocks():
        return state  # nothing to search: every target kept its original layer
    weights = [p for p in supernet.parameters()]
    with frozen(weights):
        while state.epoch < epochs:
            batches = list(iterate_batches(images, labels, cfg.batch_size, rng))
            if cfg.batches_per_epoch:
                batches = batches[: cfg.batches_per_epoch]
            search_epoch(state, supernet, batches, cfg, rng, cost_fn, cost_orig)
            if log is not None:
                log(state.history[-1])
    return state


def select_final(supernet, state=None):
    """Replace each super block by its argmax-theta candidate; ties go to the fewest FLOPs.

    Returns ``(graph, choices)`` with ``choices[layer_id]`` the winning index.
    """
    net, choices = supernet, {}
    for sb in supernet.superblocks():
        theta = sb.theta.data if state is None else state.thetas[sb.id].data
        flops = [costmodel.layer_cost(c).flops for c in sb.candidates]
        best = theta.max()
        ties = [i for i in range(len(theta)) if theta[i] == best]
        k = min(ties, key=lambda i: (flops[i], i))
        choices[sb.id] = k
        net = substitute(net, sb.id, sb.candidates[k])
    return net, choices


# ---------------------------------------------------------------------------
# iterative two-branch search


def relaxed_rank(cfg, geom, fraction=0.20):
    """Rank after removing the fewest ranks that save ``fraction`` of the original layer's FLOPs.

    Clamped at 1 when even rank 1 does not save enough.
    """
    orig = costmodel.geometry_cost(geom).flops
    base = costmodel.block_cost(cfg, geom).flops
    for r in range(cfg.rank - 1, 0, -1):
        if base - costmodel.block_cost(cfg.with_rank(r), geom).flops >= fraction * orig:
            return r
    return 1


@dataclass
class SearchResult:
    graph: object
    configs: dict
    states: list
    candidates: dict

    def summary(self):
        return {lid: (None if c is None else [x.to_dict() for x in c]) for lid, c in self.configs.items()}


def weight_error(graph, reference, layer_id):
    """Frobenius distance between the target's original weight and what its slot now computes."""
    w = original_layer(reference, layer_id).weight.data
    layer = graph.layer(layer_id)
    if layer.kind == "conv":
        return float(np.linalg.norm(w - layer.weight.data))
    return float(np.linalg.norm(w - layer.reconstruct()))


def iterative_search(graph, table, cfg: SearchConfig, images, labels, branches=1, relax=None,
                     gamma=(0.3, 0.9), step=0.05, latency_table=None, log=None, resume=None):
    """Search branch 0 over the pruned table, then (``branches=2``) a residual branch 1.

    ``resume`` is a search state restored from a checkpoint of the first pass.
    """
    if branches not in (1, 2):
        raise ContractError("branches must be 1 or 2")
    rng = np.random.default_rng(cfg.seed)
    cost_fn = CostFn(cfg.objective, latency_table)
    cost_orig = cost_fn.original(graph)
    facs = {lid: Factorizer(original_layer(graph, lid).weight.data) for lid in graph.targets}

    supernet, cands0 = build_supernet(graph, table, cfg, rng, facs)
    if resume is not None:
        _adopt(resume, supernet)
    state0 = run_search(supernet, images, labels, cfg, cfg.epochs_branch0, cost_fn, cost_orig, rng,
                        state=resume, log=log)
    net, choice = select_final(supernet, state0)
    configs = {lid: cands0[lid][k] for lid, k in choice.items()}
    first = SearchResult(net, configs, [state0], {0: dict(cands0)})
    if branches == 1:
        return first
    return residual_pass(graph, first, cfg, images, labels, relax, gamma, step, latency_table, log)


def _adopt(state, supernet):
    """Point a restored state at the theta tensors of ``supernet``."""
    for sb in supernet.superblocks():
        sb.theta.data[:] = state.thetas[sb.id].data
        if state.optimizer is not None:
            i = state.optimizer.params.index(state.thetas[sb.id])
            state.optimizer.params[i] = sb.theta
        state.thetas[sb.id] = sb.theta


def residual_pass(graph, first: SearchResult, cfg: SearchConfig, images, labels, relax=None,
                  gamma=(0.3, 0.9), step=0.05, latency_table=None, log=None):
    """Second pass: search a residual branch for every layer compressed by ``first``.

    With ``relax`` the branch-0 rank is first lowered to free that fraction of
    the original layer's FLOPs. Candidate 0 of each super block is always the
    unrelaxed one-branch block, and with relaxation only residual branches
    whose block does not increase the layer's weight error are offered, so the
    result never approximates the weight worse than ``first``. Layers left
    untouched by ``first`` skip this pass.
    """
    rng = np.random.default_rng([cfg.seed, 1])
    cost_fn = CostFn(cfg.objective, latency_table)
    cost_orig = cost_fn.original(graph)
    one_branch = first.graph
    configs = dict(first.configs)
    supernet1 = one_branch
    cands1 = {}
    for lid, cfgs in first.configs.items():
        if cfgs is None:
            continue
        conv = original_layer(graph, lid)
        fac0 = Factorizer(conv.weight.data)
        incumbent = one_branch.layer(lid)
        block = incumbent
        if relax is not None:
            r_star = relaxed_rank(cfgs[0], incumbent.geometry, relax)
            block = BuildingBlock.from_configs(conv, [cfgs[0].with_rank(r_star)], factorizer=fac0)
        geom = block.geometry
        w = conv.weight.data
        fac = Factorizer(w - block.reconstruct().astype(w.dtype))
        space = enumerate_space(geom.filters, geom.channels, geom.kernel)
        kept = prune_by_flops(space, costmodel.flops_ratio_fn(geom, base=block.configs), gamma, step)
        if relax is not None:
            limit = float(np.linalg.norm(w - incumbent.reconstruct()))
            kept = [c for c in kept if fac.truncation_error(c) <= limit]
        if not kept:
            continue
        cands = [incumbent] + [block.with_branch(c, fac) for c in kept]
        sb = SuperBlock(lid, incumbent.inputs, cands, temperature=cfg.temperature, rng=rng, anchor_original=False)
        supernet1 = substitute(supernet1, lid, sb)
        cands1[lid] = [incumbent.configs] + [block.configs + [c] for c in kept]
    states = list(first.states)
    net = one_branch
    if cands1:
        state1 = run_search(supernet1, images, labels, cfg, cfg.epochs_branch1, cost_fn, cost_orig, rng, log=log)
        states.append(state1)
        net, choice1 = select_final(supernet1, state1)
        for lid, k in choice1.items():
            configs[lid] = cands1[lid][k]
    candidates = dict(first.candidates)
    candidates[1] = cands1
    return SearchResult(net, configs, states, candidates)


# ---------------------------------------------------------------------------
# checkpoints


def _describe(layer):
    if layer.kind == "conv":
        return {"kind": "original"}
    return {"kind": "block", "branches": [c.to_dict() for c in layer.configs]}


def checkpoint(state, supernet, cfg: SearchConfig):
    opt = state.optimizer
    layers = {}
    for i, sb in enumerate(supernet.superblocks()):
        idx = opt.params.index(state.thetas[sb.id]) if opt is not None else None
        layers[sb.id] = {
            "candidates": [_describe(c) for c in sb.candidates],
            "theta": [float(v) for v in state.thetas[sb.id].data],
            "adam_m": None if idx is None else [float(v) for v in opt._m[idx]],
            "adam_v": None if idx is None else [float(v) for v in opt._v[idx]],
        }
    return {
        "format": "lrnas-search",
        "config": cfg.to_dict(),
        "epoch": state.epoch,
        "temperature": state.temperature,
        "adam_step": None if opt is None else opt._t,
        "layers": layers,
        "history": state.history,
    }


def save_checkpoint(state, supernet, cfg, path):
    Path(path).write_text(json.dumps(checkpoint(state, supernet, cfg), indent=1, sort_keys=True))


def load_checkpoint(path, supernet, cfg: SearchConfig):
    """Restore theta, Adam moments, temperature and history into a fresh state for ``supernet``."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ArtifactError(path, "checkpoint not found") from None
    except json.JSONDecodeError as exc:
        raise ArtifactError(path, f"checkpoint is not JSON ({exc})") from None
    state = init_state(supernet, cfg)
    for sb in supernet.superblocks():
        entry = doc["layers"].get(sb.id)
        if entry is None or len(entry["theta"]) != len(sb.candidates):
            raise ArtifactError(path, f"checkpoint does not match super block {sb.id!r}")
        sb.theta.data[:] = entry["theta"]
        i = state.optimizer.params.index(sb.theta)
        if entry.get("adam_m") is not None:
            state.optimizer._m[i][:] = entry["adam_m"]
            state.optimizer._v[i][:] = entry["adam_v"]
    state.optimizer._t = doc.get("adam_step") or 0
    state.epoch = int(doc["epoch"])
    state.temperature = float(doc["temperature"])
    state.history = list(doc["history"])
    return state

"""Glue between the modules: per-model LR-space tables, pruning passes and compression plans."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import costmodel
from .errors import ArtifactError, ContractError
from .lrspace import (
    ACCURACY_PROXY,
    FLOPS_GRID,
    BlockConfig,
    Factorizer,
    LRSpaceTable,
    TableEntry,
    enumerate_space,
    prune_by_accuracy,
    prune_by_flops,
)
from .netgraph import BuildingBlock, evaluate, original_layer, substitute

PROXY_SIZE = 500


def enumerate_table(graph):
    """Every legal config for every compression target, with block FLOPs and params."""
    table = LRSpaceTable(meta={"layers": {}})
    for lid in graph.targets:
        geom = original_layer(graph, lid).geometry
        entries = []
        for cfg in enumerate_space(geom.filters, geom.channels, geom.kernel):
            cost = costmodel.block_cost(cfg, geom)
            entries.append(TableEntry(cfg, cost.flops, cost.params))
        table.layers[lid] = entries
        orig = costmodel.geometry_cost(geom)
        table.meta["layers"][lid] = {
            "filters": geom.filters,
            "channels": geom.channels,
            "kernel": list(geom.kernel),
            "flops": orig.flops,
            "params": orig.params,
        }
    return table


def proxy_set(images, labels, size=PROXY_SIZE, seed=0):
    """A fixed, seeded subset of labelled images for the accuracy proxy."""
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(images), size=min(size, len(images)), replace=False))
    return images[idx], labels[idx]


def prune_table(graph, table, gamma, step=0.05, tau_proxy=None, proxy=None):
    """A copy of ``table`` with FLOPs-grid and, optionally, accuracy-proxy provenance marked."""
    out = LRSpaceTable.from_json(table.to_json())
    out.meta["pruning"] = {"gamma": list(gamma), "step": step, "tau_proxy": tau_proxy}
    for lid in out.layers:
        conv = original_layer(graph, lid)
        geom = conv.geometry
        space = out.retained(lid)
        kept = prune_by_flops(space, costmodel.flops_ratio_fn(geom), gamma, step)
        out.mark(lid, kept, FLOPS_GRID)
        if tau_proxy is not None:
            if proxy is None:
                raise ContractError("accuracy-proxy pruning needs a proxy set")
            kept, _ = prune_by_accuracy(out.retained(lid), graph, lid, proxy[0], proxy[1], tau_proxy,
                                        factorizer=Factorizer(conv.weight.data))
            out.mark(lid, kept, ACCURACY_PROXY)
    return out


def apply_plan(graph, plan):
    """Substitute each target whose plan entry lists branch configs; ``None`` keeps the original."""
    net = graph
    for lid, configs in plan.items():
        if configs is None:
            continue
        conv = original_layer(graph, lid)
        net = substitute(net, lid, BuildingBlock.from_configs(conv, configs))
    return net


def plan_to_json(plan):
    return {lid: (None if cfgs is None else [c.to_dict() for c in cfgs]) for lid, cfgs in plan.items()}


def plan_from_json(doc):
    return {lid: (None if cfgs is None else [BlockConfig.from_dict(c) for c in cfgs]) for lid, cfgs in doc.items()}


def save_plan(plan, path):
    Path(path).write_text(json.dumps(plan_to_json(plan), indent=1, sort_keys=True))


def load_plan(path):
    try:
        return plan_from_json(json.loads(Path(path).read_text()))
    except FileNotFoundError:
        raise ArtifactError(path, "plan not found") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ArtifactError(path, f"not a valid compression plan ({exc})") from None


def latency_signatures(graph, table=None):
    """Signatures of every non-target layer, every original target, and every enumerated block."""
    sigs = set()
    for layer in graph.layers:
        if layer.id in graph.targets:
            layer = original_layer(graph, layer.id)
        sigs.update(costmodel.layer_signatures(layer))
    for lid in graph.targets:
        geom = original_layer(graph, lid).geometry
        configs = ([e.config for e in table.layers.get(lid, [])] if table is not None
                   else enumerate_space(geom.filters, geom.channels, geom.kernel))
        for cfg in configs:
            sigs.update(costmodel.block_signatures([cfg], geom))
    return sigs


def weight_errors(graph, reference):
    """Per target, ``||W - sum of branch reconstructions||_F`` (0 for untouched layers)."""
    out = {}
    for lid in reference.targets:
        w = original_layer(reference, lid).weight.data
        layer = graph.layer(lid)
        approx = layer.weight.data if layer.kind == "conv" else layer.reconstruct()
        out[lid] = float(np.linalg.norm(w.astype(np.float64) - approx))
    return out


def compare(graph, reference, val):
    """Deltas in the reporting convention: FLOPs/params in %, top-k in percentage points."""
    c, r = graph.cost(), reference.cost()
    t1, t5 = evaluate(graph, val)
    r1, r5 = evaluate(reference, val)
    return {
        "flops": c.flops,
        "params": c.params,
        "top1": t1,
        "top5": t5,
        "ref_flops": r.flops,
        "ref_params": r.params,
        "ref_top1": r1,
        "ref_top5": r5,
        "delta_flops_pct": 100.0 * (c.flops - r.flops) / r.flops,
        "delta_params_pct": 100.0 * (c.params - r.params) / r.params,
        "delta_top1_pp": 100.0 * (t1 - r1),
        "delta_top5_pp": 100.0 * (t5 - r5),
    }

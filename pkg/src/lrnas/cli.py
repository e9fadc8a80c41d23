"""Command-line pipeline: gen-data, pretrain, enumerate, prune, search, derive, synth, finetune, evaluate, report.

Every command takes ``--config PATH`` (one JSON object of parameters) whose
values are overridden by explicit flags. Each command writes its artifact to
``--out`` and a summary next to it (``<out>.summary.json``) holding the
effective config, inputs, metrics and wall time. Artifacts carry no
timestamps, so identical configs reproduce them byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import costmodel, pipeline
from .dataset import generate_dataset, load_dataset, load_image_set, save_dataset, save_image_set
from .datasynth import SynthConfig, generate
from .distill import DistillConfig, finetune
from .errors import ArtifactError, LrnasError, NumericError, TrainingError
from .lrspace import LRSpaceTable, enumerate_space
from .netgraph import (
    TrainSchedule,
    build_desk_model,
    evaluate,
    load_model,
    pretrain,
    save_model,
)
from .search import SearchConfig, iterative_search

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3

# the reference count for a (64, 64, 3, 3) layer in the published LR-space
PUBLISHED_64_64_3_COUNT = 74902

VAL_MONITOR = 500  # validation images used to schedule few/full fine-tuning

DEFAULTS = {
    "gen-data": {"seed": 0, "out": None},
    "pretrain": {"seed": 0, "data": None, "out": None, "epochs": 8, "lr": 0.05, "batch_size": 64},
    "enumerate": {"model": None, "out": None, "shape": None},
    "prune": {"model": None, "table": None, "data": None, "out": None, "gamma": [0.3, 0.9], "step": 0.05,
              "tau_proxy": None, "seed": 0},
    "make-latency-table": {"model": None, "table": None, "out": None},
    "search": {"seed": 0, "model": None, "table": None, "data": None, "out": None, "beta": 16.0,
               "objective": "flops", "latency_table": None, "branches": 1, "relax": None,
               "gamma": [0.3, 0.9], "step": 0.05, "epochs_branch0": 100, "epochs_branch1": 50, "lr": 0.01,
               "temperature": 5.0, "temperature_decay": 0.965, "batch_size": 250, "batches_per_epoch": None},
    "derive": {"model": None, "plan": None, "out": None},
    "synth": {"seed": 0, "model": None, "out": None, "synth_count": 640, "iterations": 500, "batch_size": 32,
              "lr": 0.25, "alpha": 1.0},
    "finetune": {"seed": 0, "model": None, "teacher": None, "data": None, "synth": None, "out": None,
                 "regime": "few", "lr": 1e-3, "max_epochs": 100, "batch_size": 32, "alpha_kd": 0.95,
                 "temperature": 6.0, "patience": 10, "bn_train": False},
    "evaluate": {"model": None, "reference": None, "data": None, "out": None},
    "report": {"runs": [], "out": None, "plot": None},
}

REQUIRED = {
    "gen-data": ["out"],
    "pretrain": ["data", "out"],
    "enumerate": ["out"],
    "prune": ["model", "table", "out"],
    "make-latency-table": ["model", "out"],
    "search": ["model", "table", "data", "out"],
    "derive": ["model", "plan", "out"],
    "synth": ["model", "out"],
    "finetune": ["model", "teacher", "out"],
    "evaluate": ["model", "data", "out"],
    "report": ["runs", "out"],
}


class UsageError(LrnasError):
    """Invalid or missing command parameters."""


def _floats(text):
    return [float(v) for v in str(text).split(",")]


def _ints(text):
    return [int(v) for v in str(text).split(",")]


def _add(p, *flags, **kw):
    p.add_argument(*flags, default=argparse.SUPPRESS, **kw)


def build_parser():
    parser = argparse.ArgumentParser(prog="lrnas", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    cmds = {name: sub.add_parser(name) for name in DEFAULTS}
    for name, p in cmds.items():
        _add(p, "--config", help="JSON file of parameters; flags win")
        _add(p, "--out", help="artifact path")
        if "seed" in DEFAULTS[name]:
            _add(p, "--seed", type=int)
        if "model" in DEFAULTS[name]:
            _add(p, "--model")
        if "data" in DEFAULTS[name]:
            _add(p, "--data", help="dataset directory from gen-data")
        if "table" in DEFAULTS[name]:
            _add(p, "--table", help="LR-space table JSON")
        if "batch_size" in DEFAULTS[name]:
            _add(p, "--batch-size", type=int)
        if "lr" in DEFAULTS[name]:
            _add(p, "--lr", type=float)
        if "gamma" in DEFAULTS[name]:
            _add(p, "--gamma", type=_floats, help="LO,HI FLOPs-ratio range")
            _add(p, "--step", type=float)
    _add(cmds["pretrain"], "--epochs", type=int)
    _add(cmds["enumerate"], "--shape", type=_ints, help="F,C,K: enumerate a single layer shape instead")
    _add(cmds["prune"], "--tau-proxy", type=float)
    p = cmds["search"]
    _add(p, "--beta", type=float)
    _add(p, "--objective", choices=["flops", "latency"])
    _add(p, "--latency-table")
    _add(p, "--branches", type=int, choices=[1, 2])
    _add(p, "--relax", type=float, help="fraction of FLOPs freed before the second branch")
    _add(p, "--epochs-branch0", type=int)
    _add(p, "--epochs-branch1", type=int)
    _add(p, "--batches-per-epoch", type=int)
    _add(p, "--temperature", type=float)
    _add(p, "--temperature-decay", type=float)
    _add(cmds["derive"], "--plan")
    p = cmds["synth"]
    _add(p, "--synth-count", type=int)
    _add(p, "--iterations", type=int)
    _add(p, "--alpha", type=float)
    p = cmds["finetune"]
    _add(p, "--teacher")
    _add(p, "--synth", help="synthetic image set for the post regime")
    _add(p, "--regime", choices=["post", "few", "full"])
    _add(p, "--max-epochs", type=int)
    _add(p, "--alpha-kd", type=float)
    _add(p, "--temperature", type=float)
    _add(p, "--patience", type=int)
    _add(p, "--bn-train", action="store_true")
    _add(cmds["evaluate"], "--reference", help="model to compare against (default: itself)")
    p = cmds["report"]
    _add(p, "--runs", nargs="+", help="evaluate outputs")
    _add(p, "--plot", help="optional scatter plot file (needs matplotlib)")
    return parser


def resolve_config(command, args):
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS[command])
    path = args.pop("config", None)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ArtifactError(path, "config file not found") from None
        except json.JSONDecodeError as exc:
            raise ArtifactError(path, f"config is not JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ArtifactError(path, "config must be a JSON object")
        doc = {k.replace("-", "_"): v for k, v in doc.items() if k != "command"}
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise UsageError(f"unknown parameters for {command}: {unknown}")
        cfg.update(doc)
    cfg.update(args)
    if cfg.get("gamma") is not None and not isinstance(cfg["gamma"], list):
        cfg["gamma"] = _floats(cfg["gamma"])
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, [])]
    if command == "enumerate" and cfg.get("shape") is None and cfg.get("model") is None:
        missing.append("model or shape")
    if missing:
        raise UsageError(f"{command}: missing required parameters {missing}")
    return cfg


def _write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))


def summary_path(out):
    return Path(str(out).rstrip("/") + ".summary.json")


# ---------------------------------------------------------------------------
# commands: each returns (inputs, metrics)


def cmd_gen_data(cfg):
    ds = generate_dataset(cfg["seed"])
    save_dataset(ds, cfg["out"])
    return {}, {"train": len(ds.train), "val": len(ds.val), "few": len(ds.few_index)}


def cmd_pretrain(cfg):
    ds = load_dataset(cfg["data"])
    sched = TrainSchedule(epochs=cfg["epochs"], lr=cfg["lr"], batch_size=cfg["batch_size"], seed=cfg["seed"])
    model = pretrain(build_desk_model(cfg["seed"]), ds.train.images, ds.train.labels, sched)
    model.meta = {"kind": "pretrained", "seed": cfg["seed"]}
    save_model(model, cfg["out"])
    top1, top5 = evaluate(model, ds.val)
    cost = model.cost()
    return {"data": cfg["data"]}, {"top1": top1, "top5": top5, "flops": cost.flops, "params": cost.params}


def cmd_enumerate(cfg):
    if cfg["shape"] is not None:
        f, c, k = cfg["shape"]
        space = enumerate_space(f, c, k)
        doc = {"shape": [f, c, k, k], "count": len(space), "configs": [x.to_dict() for x in space]}
        _write_json(doc, cfg["out"])
        metrics = {"count": len(space)}
        if (f, c, k) == (64, 64, 3):
            metrics["published_count"] = PUBLISHED_64_64_3_COUNT
            metrics["note"] = "see docs/enumeration.md for the convention behind the difference"
        return {}, metrics
    table = pipeline.enumerate_table(load_model(cfg["model"]))
    table.save(cfg["out"])
    return {"model": cfg["model"]}, {"counts": table.counts()}


def cmd_prune(cfg):
    graph = load_model(cfg["model"])
    table = LRSpaceTable.load(cfg["table"])
    proxy = None
    if cfg["tau_proxy"] is not None:
        if cfg["data"] is None:
            raise UsageError("prune: --tau-proxy needs --data for the proxy set")
        val = load_dataset(cfg["data"]).val
        proxy = pipeline.proxy_set(val.images, val.labels, seed=cfg["seed"])
    pruned = pipeline.prune_table(graph, table, cfg["gamma"], cfg["step"], cfg["tau_proxy"], proxy)
    pruned.save(cfg["out"])
    retained = {lid: len(pruned.retained(lid)) for lid in pruned.layers}
    return {"model": cfg["model"], "table": cfg["table"]}, {"retained": retained, "total": pruned.counts()}


def cmd_make_latency_table(cfg):
    graph = load_model(cfg["model"])
    table = LRSpaceTable.load(cfg["table"]) if cfg["table"] else None
    sigs = pipeline.latency_signatures(graph, table)
    lat = costmodel.make_latency_table(sorted(sigs), costmodel.synthetic_latency_ms)
    lat.save(cfg["out"])
    return {"model": cfg["model"]}, {"entries": len(sigs), "model_ms": costmodel.latency_cost(graph, lat)}


def cmd_search(cfg):
    graph = load_model(cfg["model"])
    table = LRSpaceTable.load(cfg["table"])
    val = load_dataset(cfg["data"]).val
    lat = costmodel.LatencyTable.load(cfg["latency_table"]) if cfg["latency_table"] else None
    scfg = SearchConfig(beta=cfg["beta"], objective=cfg["objective"], epochs_branch0=cfg["epochs_branch0"],
                        epochs_branch1=cfg["epochs_branch1"], lr=cfg["lr"], temperature=cfg["temperature"],
                        temperature_decay=cfg["temperature_decay"], batch_size=cfg["batch_size"],
                        batches_per_epoch=cfg["batches_per_epoch"], seed=cfg["seed"])
    res = iterative_search(graph, table, scfg, val.images, val.labels, branches=cfg["branches"],
                           relax=cfg["relax"], gamma=tuple(cfg["gamma"]), step=cfg["step"], latency_table=lat)
    out = Path(cfg["out"])
    net = res.graph
    net.meta = {"kind": "compressed", "beta": cfg["beta"], "objective": cfg["objective"],
                "branches": cfg["branches"], "relax": cfg["relax"], "seed": cfg["seed"]}
    save_model(net, out)
    pipeline.save_plan(res.configs, out.with_suffix(".plan.json"))
    _write_json([s.history for s in res.states], out.with_suffix(".history.json"))
    metrics = {"flops": net.cost().flops, "params": net.cost().params,
               "flops_reduction_pct": 100.0 * (1 - net.cost().flops / graph.cost().flops),
               "plan": res.summary()}
    if lat is not None:
        metrics["latency_ms"] = costmodel.latency_cost(net, lat)
    return {"model": cfg["model"], "table": cfg["table"], "data": cfg["data"]}, metrics


def cmd_derive(cfg):
    graph = load_model(cfg["model"])
    plan = pipeline.load_plan(cfg["plan"])
    net = pipeline.apply_plan(graph, plan)
    net.meta = {"kind": "compressed", "plan": Path(cfg["plan"]).name}
    save_model(net, cfg["out"])
    return {"model": cfg["model"], "plan": cfg["plan"]}, {"flops": net.cost().flops, "params": net.cost().params,
                                                         "weight_error": pipeline.weight_errors(net, graph)}


def cmd_synth(cfg):
    graph = load_model(cfg["model"])
    scfg = SynthConfig(alpha=cfg["alpha"], iterations=cfg["iterations"], lr=cfg["lr"],
                       batch_size=cfg["batch_size"], seed=cfg["seed"])
    images, reports = generate(graph, scfg, cfg["synth_count"])
    save_image_set(images, cfg["out"])
    return {"model": cfg["model"]}, {"count": len(images), "batches": [r.to_dict() for r in reports],
                                     "max_ratio": max((r.ratio for r in reports), default=0.0)}


def cmd_finetune(cfg):
    student = load_model(cfg["model"])
    teacher = load_model(cfg["teacher"])
    dcfg = DistillConfig(regime=cfg["regime"], lr=cfg["lr"], max_epochs=cfg["max_epochs"],
                         batch_size=cfg["batch_size"], alpha_kd=cfg["alpha_kd"], temperature=cfg["temperature"],
                         patience=cfg["patience"], bn_train=cfg["bn_train"], seed=cfg["seed"])
    val = None
    if cfg["regime"] == "post":
        if cfg["synth"] is None:
            raise UsageError("finetune: the post regime needs --synth")
        train = load_image_set(cfg["synth"])
    else:
        if cfg["data"] is None:
            raise UsageError(f"finetune: the {cfg['regime']} regime needs --data")
        ds = load_dataset(cfg["data"])
        train = ds.few if cfg["regime"] == "few" else ds.train
        val = ds.val.subset(np.arange(min(VAL_MONITOR, len(ds.val))))
    tuned, log = finetune(student, teacher, train, dcfg, val=val)
    tuned.meta = dict(student.meta, finetune=cfg["regime"])
    save_model(tuned, cfg["out"])
    _write_json(log, Path(cfg["out"]).with_suffix(".log.json"))
    inputs = {k: cfg[k] for k in ("model", "teacher", "data", "synth") if cfg[k] is not None}
    return inputs, {"best_metric": log["best_metric"], "epochs": len(log["epochs"]) - 1}


def cmd_evaluate(cfg):
    graph = load_model(cfg["model"])
    reference = load_model(cfg["reference"]) if cfg["reference"] else graph
    val = load_dataset(cfg["data"]).val
    result = pipeline.compare(graph, reference, val)
    result["model"] = Path(cfg["model"]).name
    result["meta"] = graph.meta
    _write_json(result, cfg["out"])
    return {"model": cfg["model"], "reference": cfg["reference"] or cfg["model"], "data": cfg["data"]}, {
        k: result[k] for k in ("delta_flops_pct", "delta_params_pct", "delta_top1_pp", "delta_top5_pp")}


REPORT_COLUMNS = ["run", "beta", "delta_flops_pct", "delta_params_pct", "delta_top1_pp", "delta_top5_pp"]


def report_rows(runs):
    """One row per evaluate output, least compressed first (so FLOPs fall down the table)."""
    rows = []
    for path in runs:
        try:
            doc = json.loads(Path(path).read_text())
            row = {k: doc[k] for k in REPORT_COLUMNS[2:]}
        except FileNotFoundError:
            raise ArtifactError(path, "evaluation not found") from None
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ArtifactError(path, f"not an evaluate output ({exc})") from None
        row["run"] = doc.get("model", Path(path).stem)
        row["beta"] = doc.get("meta", {}).get("beta")
        rows.append(row)
    rows.sort(key=lambda r: (-r["delta_flops_pct"], r["run"]))
    return rows


def cmd_report(cfg):
    rows = report_rows(cfg["runs"])
    with open(cfg["out"], "w", newline="") as fh:
        writer = csv.DictWriter(fh, REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{r[k]:.2f}" if isinstance(r[k], float) and k != "beta" else r[k])
                             for k in REPORT_COLUMNS})
    if cfg["plot"]:
        _plot(rows, cfg["plot"])
    return {"runs": list(cfg["runs"])}, {"rows": len(rows)}


def _plot(rows, path):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise UsageError("--plot needs matplotlib (pip install lrnas[plot])") from None
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    xs = [-r["delta_flops_pct"] for r in rows]
    ys = [r["delta_top1_pp"] for r in rows]
    ax.scatter(xs, ys)
    for r, x, y in zip(rows, xs, ys):
        ax.annotate(f"beta={r['beta']}" if r["beta"] is not None else r["run"], (x, y), fontsize=7)
    ax.set_xlabel("FLOPs reduction (%)")
    ax.set_ylabel("top-1 change (pp)")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None} if str(path).endswith(".png") else None)
    plt.close(fig)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "enumerate": cmd_enumerate,
    "prune": cmd_prune,
    "make-latency-table": cmd_make_latency_table,
    "search": cmd_search,
    "derive": cmd_derive,
    "synth": cmd_synth,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def run(argv=None):
    """Parse, execute and summarise one command; raises library errors instead of exiting."""
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    cfg = resolve_config(command, args)
    t0 = time.time()
    inputs, metrics = COMMANDS[command](cfg)
    summary = {
        "command": command,
        "config": cfg,
        "inputs": inputs,
        "seed": cfg.get("seed"),
        "metrics": metrics,
        "wall_time_s": round(time.time() - t0, 3),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    _write_json(summary, summary_path(cfg["out"]))
    return summary


def main(argv=None):
    try:
        summary = run(argv)
    except (NumericError, TrainingError) as exc:
        print(f"lrnas: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except LrnasError as exc:
        print(f"lrnas: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(json.dumps(summary["metrics"], indent=1, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

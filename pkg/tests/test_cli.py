"""Command-line pipeline: composition, config precedence, exit codes and reproducibility."""

import csv
import json
import subprocess
import sys

import pytest

from lrnas import cli
from lrnas.cli import main, resolve_config, run


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Runs the whole pipeline once with small settings; later tests inspect the artifacts."""
    d = tmp_path_factory.mktemp("pipeline")
    steps = [
        ["gen-data", "--out", d / "data"],
        ["pretrain", "--data", d / "data", "--out", d / "m.json", "--epochs", "1"],
        ["enumerate", "--model", d / "m.json", "--out", d / "table.json"],
        ["prune", "--model", d / "m.json", "--table", d / "table.json", "--out", d / "pruned.json",
         "--gamma", "0.3,0.9", "--step", "0.2"],
        ["make-latency-table", "--model", d / "m.json", "--table", d / "pruned.json", "--out", d / "lat.json"],
        ["search", "--config", d / "search.cfg.json", "--out", d / "c.json"],
        ["derive", "--model", d / "m.json", "--plan", d / "c.plan.json", "--out", d / "d.json"],
        ["synth", "--model", d / "m.json", "--out", d / "s.json", "--synth-count", "6", "--iterations", "3",
         "--batch-size", "4"],
        ["finetune", "--model", d / "c.json", "--teacher", d / "m.json", "--synth", d / "s.json",
         "--regime", "post", "--max-epochs", "1", "--out", d / "f.json"],
        ["finetune", "--model", d / "c.json", "--teacher", d / "m.json", "--data", d / "data",
         "--regime", "few", "--max-epochs", "1", "--out", d / "few.json"],
        ["evaluate", "--model", d / "f.json", "--reference", d / "m.json", "--data", d / "data",
         "--out", d / "ev_f.json"],
        ["evaluate", "--model", d / "c.json", "--reference", d / "m.json", "--data", d / "data",
         "--out", d / "ev_c.json"],
        ["evaluate", "--model", d / "m.json", "--data", d / "data", "--out", d / "ev_self.json"],
        ["report", "--runs", d / "ev_f.json", d / "ev_c.json", d / "ev_self.json", "--out", d / "r.csv",
         "--plot", d / "r.png"],
    ]
    search_cfg = {"model": str(d / "m.json"), "table": str(d / "pruned.json"), "data": str(d / "data"),
                  "beta": 8, "epochs_branch0": 2, "epochs_branch1": 2, "batches_per_epoch": 1, "batch_size": 50,
                  "branches": 2, "objective": "latency", "latency_table": str(d / "lat.json")}
    (d / "search.cfg.json").write_text(json.dumps(search_cfg))
    summaries = {}
    with pytest.warns(Warning):  # three synthesis iterations cannot reach the 10% target
        for step in steps:
            summaries[step[0] + str(len(summaries))] = run([str(a) for a in step])
    return d, summaries


class TestPipeline:
    def test_every_stage_writes_artifact_and_summary(self, workdir):
        d, summaries = workdir
        for name in ("data", "m.json", "table.json", "pruned.json", "lat.json", "c.json", "d.json", "s.json",
                     "f.json", "few.json", "ev_f.json", "r.csv"):
            assert (d / name).exists()
            summary = json.loads(cli.summary_path(d / name).read_text())
            assert set(summary) == {"command", "config", "inputs", "seed", "metrics", "wall_time_s", "finished"}
        for extra in ("c.plan.json", "c.history.json", "f.log.json", "r.png", "m.bin", "s.bin"):
            assert (d / extra).exists()

    def test_search_config_echoed_with_flags_applied(self, workdir):
        d, _ = workdir
        summary = json.loads(cli.summary_path(d / "c.json").read_text())
        cfg = summary["config"]
        assert cfg["beta"] == 8 and cfg["branches"] == 2 and cfg["objective"] == "latency"
        assert cfg["out"] == str(d / "c.json")
        assert cfg["temperature_decay"] == 0.965
        assert "latency_ms" in summary["metrics"]

    def test_derive_reproduces_search_model(self, workdir):
        d, _ = workdir
        assert (d / "d.bin").read_bytes() == (d / "c.bin").read_bytes()

    def test_self_evaluation_is_zero(self, workdir):
        d, _ = workdir
        doc = json.loads((d / "ev_self.json").read_text())
        assert doc["delta_top1_pp"] == 0.0 and doc["delta_flops_pct"] == 0.0

    def test_report_rows_sorted_by_flops(self, workdir):
        d, _ = workdir
        with open(d / "r.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == cli.REPORT_COLUMNS
        flops = [float(r["delta_flops_pct"]) for r in rows]
        assert flops == sorted(flops, reverse=True)
        assert rows[0]["run"] == "m.json"

    def test_enumerate_published_count(self, tmp_path):
        summary = run(["enumerate", "--shape", "64,64,3", "--out", str(tmp_path / "e.json")])
        assert summary["metrics"]["published_count"] == 74902
        assert summary["metrics"]["count"] == json.loads((tmp_path / "e.json").read_text())["count"]

    @pytest.mark.filterwarnings("ignore::UserWarning")
    def test_reruns_are_byte_identical(self, workdir, tmp_path):
        d, _ = workdir
        cfg = json.loads((d / "search.cfg.json").read_text())
        for sub in ("a", "b"):
            (tmp_path / sub).mkdir()
            run(["search", "--config", str(d / "search.cfg.json"), "--out", str(tmp_path / sub / "c.json")])
            run(["synth", "--model", cfg["model"], "--out", str(tmp_path / sub / "s.json"), "--synth-count", "2",
                 "--iterations", "2", "--batch-size", "2"])
            run(["evaluate", "--model", str(tmp_path / sub / "c.json"), "--reference", cfg["model"],
                 "--data", cfg["data"], "--out", str(tmp_path / sub / "ev.json")])
        for name in ("c.json", "c.bin", "c.plan.json", "c.history.json", "s.json", "s.bin", "ev.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        assert (tmp_path / "a" / "c.bin").read_bytes() == (d / "c.bin").read_bytes()


class TestConfig:
    def test_precedence_and_round_trip(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"beta": 2.0, "model": "m", "table": "t", "data": "x", "out": "o"}))
        args = vars(cli.build_parser().parse_args(["search", "--config", str(path), "--beta", "48"]))
        args.pop("command")
        cfg = resolve_config("search", args)
        assert cfg["beta"] == 48.0 and cfg["model"] == "m" and cfg["epochs_branch0"] == 100
        path.write_text(json.dumps(dict(cfg, command="search")))
        args = vars(cli.build_parser().parse_args(["search", "--config", str(path)]))
        args.pop("command")
        assert resolve_config("search", args) == cfg

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"betta": 2}))
        with pytest.raises(cli.UsageError, match="betta"):
            run(["search", "--config", str(path)])


class TestExitCodes:
    def test_missing_artifact_names_path(self, tmp_path, capsys):
        missing = tmp_path / "nope.json"
        assert main(["evaluate", "--model", str(missing), "--data", str(tmp_path), "--out", str(tmp_path / "e")]) == 2
        assert str(missing) in capsys.readouterr().err

    def test_missing_parameters(self, capsys):
        assert main(["search", "--beta", "2"]) == 2
        assert "missing required" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure(self, workdir, tmp_path):
        d, _ = workdir
        code = main(["pretrain", "--data", str(d / "data"), "--out", str(tmp_path / "m.json"), "--epochs", "1",
                     "--lr", "1e30"])
        assert code == 3

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "lrnas.cli", "enumerate", "--shape", "4,4,3",
                               "--out", str(tmp_path / "e.json")], capture_output=True, text=True)
        assert proc.returncode == 0
        assert json.loads(proc.stdout)["count"] > 0
        proc = subprocess.run([sys.executable, "-m", "lrnas.cli", "derive", "--model", "x"], capture_output=True,
                              text=True)
        assert proc.returncode == 2

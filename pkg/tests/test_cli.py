import json
from pathlib import Path

import numpy as np
import pytest

from gnnbench.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from gnnbench.graphs import read_dataset
from gnnbench.profiler import Trace
from gnnbench.roofline import default_catalog, save_catalog
from gnnbench.training import read_train_log


def run(*argv):
    return main([str(a) for a in argv])


def gen_args(out, events=10, particles=6, layers=5, seed=1, **extra):
    args = ["gen", "--events", events, "--particles", particles,
            "--layers", layers, "--seed", seed, "--out", out]
    for k, v in extra.items():
        args += [f"--{k.replace('_', '-')}", v]
    return args


class TestGen:
    def test_minimal_dataset(self, tmp_path, capsys):
        out = tmp_path / "data"
        code = run("gen", "--events", 1, "--particles", 1, "--layers", 2,
                   "--false-factor", 0, "--seed", 0, "--out", out)
        assert code == EXIT_OK
        events, manifest = read_dataset(out)
        assert len(events) == 1
        assert events[0].n_edges == 1
        assert (out / "manifest.json").exists()
        assert (out / "size_histogram.csv").exists()

    def test_rerun_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(*gen_args(a)) == EXIT_OK
        assert run(*gen_args(b)) == EXIT_OK
        ma = json.loads((a / "manifest.json").read_text())
        mb = json.loads((b / "manifest.json").read_text())
        ha = {Path(p).name: h for p, h in ma["outputs"].items()}
        hb = {Path(p).name: h for p, h in mb["outputs"].items()}
        assert ha == hb

    def test_unwritable_path(self, tmp_path):
        target = tmp_path / "blocked"
        target.write_text("a file, not a directory")
        assert run(*gen_args(target / "sub")) == EXIT_USAGE

    def test_default_desk_scale_200_events_under_a_minute(self, tmp_path):
        import time

        started = time.perf_counter()
        assert run("gen", "--events", 200, "--seed", 6,
                   "--out", tmp_path / "desk") == EXIT_OK
        assert time.perf_counter() - started < 60.0
        events, _ = read_dataset(tmp_path / "desk")
        assert len(events) == 200
        assert events[0].n_nodes == 100


class TestTrain:
    def test_one_epoch_outputs(self, tmp_path):
        data = tmp_path / "data"
        out = tmp_path / "run"
        assert run(*gen_args(data)) == EXIT_OK
        code = run("train", "--data", data, "--out", out, "--epochs", 1,
                   "--seed", 2)
        assert code == EXIT_OK
        trace = Trace.load(out / "trace.json")
        assert len(trace) > 0
        log = read_train_log(out / "train_log.jsonl")
        assert len(log) == 1
        assert (out / "checkpoint_final.json").exists()
        assert (out / "params_report.txt").read_text().count("132,291") == 1

    def test_pad_sizes_logged(self, tmp_path, capsys):
        data = tmp_path / "data"
        out = tmp_path / "run"
        run(*gen_args(data))
        run("train", "--data", data, "--out", out, "--epochs", 1,
            "--pad-quantile", 0.99, "--seed", 2)
        printed = capsys.readouterr().out
        assert "pad sizes:" in printed and "truncated" in printed

    def test_missing_data_exits_2(self, tmp_path):
        assert run("train", "--data", tmp_path / "nope", "--out",
                   tmp_path / "run") == EXIT_USAGE

    def test_single_class_labels_exit_3(self, tmp_path):
        data = tmp_path / "data"
        run(*gen_args(data, false_factor=0))   # every edge label is 1
        code = run("train", "--data", data, "--out", tmp_path / "run",
                   "--epochs", 1, "--seed", 2)
        assert code == EXIT_DATA

    def test_workers_match_large_batch_checkpoint(self, tmp_path):
        data = tmp_path / "data"
        run(*gen_args(data, events=12))        # 12 events -> 10 train after the 0.2 split
        single = tmp_path / "single"
        par = tmp_path / "par"
        assert run("train", "--data", data, "--out", single, "--epochs", 2,
                   "--batch", 2, "--seed", 3) == EXIT_OK
        assert run("train", "--data", data, "--out", par, "--epochs", 2,
                   "--workers", 2, "--batch", 1, "--seed", 3) == EXIT_OK
        ck_a = (single / "checkpoint_final.json").read_bytes()
        ck_b = (par / "checkpoint_final.json").read_bytes()
        assert ck_a == ck_b
        assert (par / "scaling.txt").exists()

    def test_trace_meta_wall_time_bound(self, tmp_path):
        data = tmp_path / "data"
        run(*gen_args(data, events=12))
        out = tmp_path / "run"
        run("train", "--data", data, "--out", out, "--epochs", 1,
            "--workers", 2, "--seed", 6)
        trace = Trace.load(out / "trace.json")
        assert trace.total_duration_s <= trace.meta["wall_time_s"]
        assert "host" in trace.meta
        assert len(trace.meta["epoch_seconds"]) == 1

    def test_checkpoint_replay_identical(self, tmp_path):
        data = tmp_path / "data"
        run(*gen_args(data))
        a, b = tmp_path / "a", tmp_path / "b"
        run("train", "--data", data, "--out", a, "--epochs", 1, "--seed", 4)
        run("train", "--data", data, "--out", b, "--epochs", 1, "--seed", 4)
        assert (a / "checkpoint_final.json").read_bytes() == \
            (b / "checkpoint_final.json").read_bytes()
        ma = json.loads((a / "manifest.json").read_text())
        assert "checkpoint_final.json" in "".join(ma["outputs"])
        assert "trace.json" in "".join(ma["timing_outputs"])


@pytest.fixture(scope="module")
def analysis_inputs(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipeline")
    data = base / "data"
    out = base / "run"
    assert run(*gen_args(data)) == EXIT_OK
    assert run("train", "--data", data, "--out", out, "--epochs", 1,
               "--seed", 5) == EXIT_OK
    return out / "trace.json"


class TestAnalyze:
    def test_report_header_has_ridge_point(self, tmp_path, analysis_inputs):
        out = tmp_path / "analysis"
        assert run("analyze", "--trace", analysis_inputs, "--device", "V100",
                   "--out", out) == EXIT_OK
        report = (out / "report.txt").read_text()
        assert "ridge point 15.56" in report
        assert (out / "roofline_V100.csv").exists()
        assert (out / "roofline_V100.svg").exists()

    def test_unknown_device_lists_catalog(self, tmp_path, analysis_inputs, capsys):
        out = tmp_path / "analysis"
        code = run("analyze", "--trace", analysis_inputs, "--device", "H100",
                   "--out", out)
        assert code == EXIT_USAGE
        err = capsys.readouterr().err
        assert "V100" in err and "TPUv3-8" in err

    def test_device_all_economics_rows(self, tmp_path, analysis_inputs):
        out = tmp_path / "analysis"
        assert run("analyze", "--trace", analysis_inputs, "--device", "all",
                   "--latency", 1800, "--out", out) == EXIT_OK
        rows = (out / "economics.csv").read_text().strip().splitlines()[1:]
        devices = {r.split(",")[0] for r in rows}
        assert devices == set(default_catalog())

    def test_deterministic_given_trace(self, tmp_path, analysis_inputs):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run("analyze", "--trace", analysis_inputs, "--device", "V100",
                       "--out", out) == EXIT_OK
        for name in ("report.txt", "roofline_V100.csv", "roofline_V100.svg",
                     "kernel_ranking.csv", "economics.csv", "manifest.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_latency_flag_overrides(self, tmp_path, analysis_inputs):
        out = tmp_path / "analysis"
        assert run("analyze", "--trace", analysis_inputs, "--device", "V100",
                   "--latency", 1800, "--out", out) == EXIT_OK
        econ = (out / "economics.csv").read_text()
        assert "1800.0" in econ and "0.78" in econ

    def test_catalog_env_var(self, tmp_path, analysis_inputs, monkeypatch):
        catalog = dict(default_catalog())
        from gnnbench.roofline import DeviceSpec

        catalog["DESK"] = DeviceSpec(name="DESK", peak_flops=1e11,
                                     bandwidth={"hbm": 50e9}, price=0.0, tdp=65.0)
        path = tmp_path / "catalog.json"
        save_catalog(catalog, path)
        monkeypatch.setenv("GNNBENCH_CATALOG", str(path))
        out = tmp_path / "analysis"
        assert run("analyze", "--trace", analysis_inputs, "--device", "DESK",
                   "--out", out) == EXIT_OK
        assert "DESK" in (out / "report.txt").read_text()

    def test_missing_trace_exit(self, tmp_path):
        code = run("analyze", "--trace", tmp_path / "none.json",
                   "--out", tmp_path / "x")
        assert code == EXIT_USAGE


class TestParser:
    def test_missing_subcommand_is_system_exit(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0

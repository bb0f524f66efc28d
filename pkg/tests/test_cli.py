"""Command-line surface: exit codes, output formats, env seed override,
chart rendering, and the gradient verification table."""

import os
import xml.etree.ElementTree as ET
from dataclasses import fields

import pytest

from m3s.cli import build_parser, main
from m3s.config import ExperimentConfig

TINY_TRAIN_FLAGS = [
    "--scheme", "full", "--lookback", "12", "--tau", "3",
    "--image_size", "16", "--n_frames", "2", "--d_model", "8",
    "--m_scales", "1", "--k_periods", "2", "--window", "2",
    "--interval", "2", "--depth", "1", "--base_channels", "4",
    "--n_stages", "2", "--n_state", "4", "--epochs", "2", "--batch", "4",
    "--stride", "9"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated dataset plus one trained tiny run, shared read-only."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    run = str(root / "run")
    assert main(["synth", "--out", data, "--days", "1", "--size", "16",
                 "--seed", "0"]) == 0
    assert main(["train", "--data", data, "--out", run,
                 *TINY_TRAIN_FLAGS]) == 0
    return {"data": data, "run": run, "root": root}


class TestUsageErrors:
    def test_no_command(self):
        assert main([]) == 1

    def test_unknown_flag(self):
        assert main(["synth", "--out", "/tmp/x", "--bogus"]) == 1

    def test_zero_days(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "d"), "--days", "0"]) == 1

    def test_bad_scheme(self, tmp_path, workspace):
        code = main(["train", "--data", workspace["data"],
                     "--out", str(tmp_path / "r"), "--scheme", "nope"])
        assert code == 1

    def test_help_exits_zero(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["--help"])
        assert main(["--help"]) == 0

    def test_train_help_lists_every_config_key(self):
        parser = build_parser()
        sub = parser._subparsers._group_actions[0].choices["train"]
        text = sub.format_help()
        for f in fields(ExperimentConfig):
            assert f"--{f.name}" in text


class TestDataErrors:
    def test_missing_dataset(self, tmp_path, workspace):
        code = main(["eval", "--checkpoint", workspace["run"],
                     "--data", str(tmp_path / "none")])
        assert code == 2

    def test_train_on_missing_dir(self, tmp_path):
        code = main(["train", "--data", str(tmp_path / "none"),
                     "--out", str(tmp_path / "r")])
        assert code == 2


class TestSynth:
    def test_reports_counts(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path / "d"), "--days", "1",
                     "--size", "16"]) == 0
        out = capsys.readouterr().out
        assert "144 rows" in out

    def test_same_seed_same_bytes(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        main(["synth", "--out", a, "--days", "1", "--size", "16"])
        main(["synth", "--out", b, "--days", "1", "--size", "16"])
        with open(os.path.join(a, "series.csv"), "rb") as fh:
            bytes_a = fh.read()
        with open(os.path.join(b, "series.csv"), "rb") as fh:
            bytes_b = fh.read()
        assert bytes_a == bytes_b


class TestTrainEvalPredict:
    def test_run_artifacts_exist(self, workspace):
        for name in ("checkpoint.m3s", "checkpoint.m3s.manifest.txt",
                     "config.txt", "stats.txt", "log.txt", "log.time.txt"):
            assert os.path.exists(os.path.join(workspace["run"], name)), name

    def test_eval_prints_and_writes_csv(self, workspace, capsys):
        assert main(["eval", "--checkpoint", workspace["run"],
                     "--data", workspace["data"]]) == 0
        out = capsys.readouterr().out
        assert out.startswith("horizon_step,mae,mse,nrmse_pct,r2\n")
        assert out.splitlines()[-1].startswith("all,")
        with open(os.path.join(workspace["run"], "metrics.csv")) as fh:
            assert fh.read() == out

    def test_eval_split_and_horizons(self, workspace, capsys):
        assert main(["eval", "--checkpoint", workspace["run"],
                     "--data", workspace["data"], "--split", "all",
                     "--horizons", "1,3"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert [ln.split(",")[0] for ln in lines] == ["horizon_step", "1",
                                                      "3", "all"]

    def test_degenerate_split_is_numeric_failure(self, workspace, capsys):
        # seed-0 val windows of this 1-day set are all night: constant truth
        # makes nrmse undefined, which eval reports as a numeric failure
        assert main(["eval", "--checkpoint", workspace["run"],
                     "--data", workspace["data"], "--split", "val"]) == 3
        assert "zero range" in capsys.readouterr().err

    def test_eval_horizon_beyond_tau(self, workspace):
        assert main(["eval", "--checkpoint", workspace["run"],
                     "--data", workspace["data"], "--horizons", "7"]) == 2

    def test_predict_emits_finite_csv(self, workspace, capsys):
        assert main(["predict", "--checkpoint", workspace["run"],
                     "--data", workspace["data"], "--window", "1"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "step,ghi"
        assert len(lines) == 4            # tau rows
        for j, line in enumerate(lines[1:], start=1):
            step, value = line.split(",")
            assert int(step) == j
            assert abs(float(value)) < 1e9

    def test_predict_window_out_of_range(self, workspace):
        assert main(["predict", "--checkpoint", workspace["run"],
                     "--data", workspace["data"], "--window", "9999"]) == 2

    def test_env_seed_overrides_flags(self, tmp_path, workspace, monkeypatch,
                                      capsys):
        monkeypatch.setenv("M3S_SEED", "777")
        run = str(tmp_path / "r")
        assert main(["train", "--data", workspace["data"], "--out", run,
                     "--scheme", "persistence", "--lookback", "12",
                     "--tau", "3", "--n_frames", "2", "--stride", "9",
                     "--epochs", "1", "--seed", "3"]) == 0
        capsys.readouterr()
        with open(os.path.join(run, "config.txt")) as fh:
            assert "seed = 777" in fh.read()


class TestPlot:
    def test_loss_charts(self, workspace, tmp_path):
        out = str(tmp_path / "plots")
        assert main(["plot", "--log",
                     os.path.join(workspace["run"], "log.txt"),
                     "--out", out]) == 0
        for name in ("train_loss.svg", "val_loss.svg"):
            path = os.path.join(out, name)
            assert os.path.exists(path)
            svg = ET.parse(path).getroot()
            assert svg.tag.endswith("svg")
            assert any(child.tag.endswith("polyline") for child in svg.iter())

    def test_forecast_chart(self, workspace, tmp_path):
        out = str(tmp_path / "plots")
        assert main(["plot", "--log",
                     os.path.join(workspace["run"], "log.txt"),
                     "--out", out, "--checkpoint", workspace["run"],
                     "--data", workspace["data"], "--window", "0"]) == 0
        path = os.path.join(out, "forecast_vs_truth.svg")
        assert os.path.exists(path)
        ET.parse(path)                    # well-formed XML

    def test_truncated_log_names_line(self, workspace, tmp_path, capsys):
        log_path = os.path.join(workspace["run"], "log.txt")
        with open(log_path) as fh:
            text = fh.read()
        broken = str(tmp_path / "broken.txt")
        with open(broken, "w") as fh:
            fh.write(text + "oops,row\n")
        assert main(["plot", "--log", broken,
                     "--out", str(tmp_path / "p")]) == 2
        err = capsys.readouterr().err
        assert "training log:" in err and "oops" in err

    def test_missing_log(self, tmp_path):
        assert main(["plot", "--log", str(tmp_path / "nope.txt"),
                     "--out", str(tmp_path / "p")]) == 2


class TestGradcheck:
    def test_all_blocks_pass(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        lines = [ln for ln in out.splitlines() if " PASS " in ln]
        assert len(lines) == 8
        assert "FAIL" not in out

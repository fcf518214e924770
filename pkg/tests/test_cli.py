"""Command-line behaviour: exit codes, messages, stage wiring."""

import json
import os

import pytest

from mia_lens.cli import main
from mia_lens.config import save_config
from mia_lens.pipeline import RunPaths, run_directory


@pytest.fixture
def config_file(toy_run, tmp_path):
    """The completed toy run's config, saved where the CLI can load it."""
    path = tmp_path / "run.cfg"
    save_config(toy_run.config, str(path))
    return str(path)


class TestRunCommand:
    def test_completed_run_reports_and_exits_clean(
        self, toy_run, config_file, capsys
    ):
        assert main(["run", "--config", config_file]) == 0
        out = capsys.readouterr().out
        assert out.strip() == f"run complete: {toy_run.root}"

    def test_missing_config_file(self, tmp_path, capsys):
        missing = str(tmp_path / "nope.cfg")
        assert main(["run", "--config", missing]) == 2
        assert "error:" in capsys.readouterr().err

    def test_bad_method_in_config(self, tmp_path, capsys):
        path = tmp_path / "bad.cfg"
        path.write_text("methods = t_test,entropy\n")
        assert main(["run", "--config", str(path)]) == 2
        assert "entropy" in capsys.readouterr().err


class TestStageCommands:
    def test_split_then_train_build_their_markers(
        self, toy_config_factory, config_file, tmp_path, capsys
    ):
        out_dir = str(tmp_path / "fresh")
        assert main(["split", "--config", config_file, "--out", out_dir]) == 0
        stdout = capsys.readouterr().out
        assert stdout.startswith("split complete: ")
        run_dir = stdout.split(": ", 1)[1].strip()
        assert os.path.dirname(run_dir) == out_dir

        assert main(["train", "--config", config_file, "--out", out_dir]) == 0
        paths = RunPaths(run_dir)
        for stage in ("split", "train_target", "train_shadow"):
            marker = json.load(open(paths.stage_marker(stage)))
            assert marker["status"] == "complete"

    def test_stage_out_of_order_is_a_usage_error(
        self, config_file, tmp_path, capsys
    ):
        out_dir = str(tmp_path / "fresh")
        assert main(["grid", "--config", config_file, "--out", out_dir]) == 2
        err = capsys.readouterr().err
        assert "error:" in err
        assert "completed first" in err

    def test_seed_override_changes_the_run_directory(
        self, config_file, tmp_path, capsys
    ):
        out_dir = str(tmp_path / "fresh")
        assert main(["split", "--config", config_file, "--out", out_dir]) == 0
        first = capsys.readouterr().out.split(": ", 1)[1].strip()
        assert (
            main(
                ["split", "--config", config_file, "--out", out_dir, "--seed", "5"]
            )
            == 0
        )
        second = capsys.readouterr().out.split(": ", 1)[1].strip()
        assert first != second
        assert os.path.basename(second).startswith("run-")

    def test_sweep_alias_runs_the_ensemble_stage(
        self, toy_run, config_file, capsys
    ):
        assert main(["ensemble-sweep", "--config", config_file]) == 0
        out = capsys.readouterr().out
        assert out.strip() == f"ensemble-sweep complete: {toy_run.root}"

    def test_report_rerun_is_idempotent(self, toy_run, config_file, capsys):
        stamp = os.path.getmtime(toy_run.paths.report_file)
        assert main(["report", "--config", config_file]) == 0
        capsys.readouterr()
        assert os.path.getmtime(toy_run.paths.report_file) == stamp


class TestParser:
    def test_unknown_subcommand_is_an_argparse_error(self, capsys):
        with pytest.raises(SystemExit) as exit_info:
            main(["defragment"])
        assert exit_info.value.code == 2
        capsys.readouterr()

    def test_no_subcommand_is_an_argparse_error(self, capsys):
        with pytest.raises(SystemExit) as exit_info:
            main([])
        assert exit_info.value.code == 2
        capsys.readouterr()

    def test_help_lists_the_subcommands(self, capsys):
        with pytest.raises(SystemExit) as exit_info:
            main(["--help"])
        assert exit_info.value.code == 0
        out = capsys.readouterr().out
        for command in ("run", "split", "grid", "ensemble-sweep", "explain"):
            assert command in out

    def test_defaults_need_no_config_file(self, tmp_path, capsys):
        assert main(["grid", "--out", str(tmp_path / "fresh")]) == 2
        assert "completed first" in capsys.readouterr().err

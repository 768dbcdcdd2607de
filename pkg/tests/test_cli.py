"""Tests for the command-line front end."""

from unittest.mock import Mock, patch

import pytest

from noisebridge.cli import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, build_parser, main, run
from noisebridge.errors import DivergenceError


def test_missing_config_file(tmp_path, capsys):
    """A missing config is a configuration error."""
    assert run("verify", str(tmp_path / "nope.json")) == EXIT_CONFIG
    assert "config file not found" in capsys.readouterr().err


def test_invalid_override(tiny_config_file, capsys):
    """Overrides are validated like the file itself."""
    path = tiny_config_file()
    assert run("verify", str(path), ["schedule.n_steps=1"]) == EXIT_CONFIG
    assert "schedule.n_steps" in capsys.readouterr().err


@patch("noisebridge.cli.PurificationPipeline")
def test_stage_is_dispatched(mock_pipeline_class, tiny_config_file):
    """The command name is handed to the pipeline."""
    # Setup mock
    mock_pipeline = Mock()
    mock_pipeline.run.return_value = ["file"]
    mock_pipeline_class.return_value = mock_pipeline

    assert run("gen-data", str(tiny_config_file()), verbose=False) == EXIT_OK
    mock_pipeline.run.assert_called_once_with("gen-data")
    assert mock_pipeline_class.call_args.kwargs == {"verbose": False}


@patch("noisebridge.cli.PurificationPipeline")
def test_stage_failure_exit_code(mock_pipeline_class, tiny_config_file, capsys):
    """Package errors map to exit code 1 with the message on stderr."""
    mock_pipeline_class.return_value.run.side_effect = DivergenceError("distillation diverged at iteration 3")

    assert run("distill", str(tiny_config_file())) == EXIT_FAILURE
    assert "diverged" in capsys.readouterr().err


@patch("noisebridge.cli.PurificationPipeline")
def test_failed_verification_exit_code(mock_pipeline_class, tiny_config_file):
    """A verify run that finds a violated identity exits nonzero."""
    mock_pipeline_class.return_value.run.return_value = False

    assert run("verify", str(tiny_config_file())) == EXIT_FAILURE


@patch("noisebridge.cli.PurificationPipeline")
def test_main_parses_arguments(mock_pipeline_class, tiny_config_file):
    """main() forwards command, overrides and verbosity."""
    mock_pipeline_class.return_value.run.return_value = True
    path = str(tiny_config_file())

    code = main(["verify", "--config", path, "--set", "seed=11", "--quiet", "--log-level", "debug"])

    assert code == EXIT_OK
    config = mock_pipeline_class.call_args.args[0]
    assert config.seed == 11
    assert mock_pipeline_class.call_args.kwargs == {"verbose": False}


def test_parser_rejects_unknown_command():
    """Only the pipeline stages are valid commands."""
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train-everything", "--config", "x.json"])


def test_eval_before_distill(tiny_config_file, capsys):
    """Stages refuse to run without the artifacts they depend on."""
    assert run("eval", str(tiny_config_file()), verbose=False) == EXIT_FAILURE
    assert "checkpoint not found" in capsys.readouterr().err


def test_verify_on_fresh_config(tiny_config_file, capsys):
    """The numerical self-check passes and reports its residuals."""
    assert run("verify", str(tiny_config_file())) == EXIT_OK
    out = capsys.readouterr().out
    assert "residual=" in out
    assert "schedules passed" in out

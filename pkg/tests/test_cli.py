"""CLI contract: subcommand wiring, refusal semantics, and exit codes."""

import json

import pytest

from conftest import tiny_run_config
from pairalign.cli import (EXIT_OK, EXIT_REFUSED, EXIT_USAGE, main)
from pairalign.config import save_config
from pairalign.data import load_corpus


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """A corpus plus a tiny config file shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--slides", "3", "--patches", "4", "--seed", "2",
                 "--out", str(root / "corpus")]) == EXIT_OK
    save_config(tiny_run_config(steps=2), root / "tiny.yaml")
    return root


def test_synth_writes_corpus_and_refuses_overwrite(cli_workspace, capsys):
    corpus = load_corpus(cli_workspace / "corpus")
    assert len(corpus) == 12
    code = main(["synth", "--slides", "1", "--patches", "1",
                 "--out", str(cli_workspace / "corpus")])
    assert code == EXIT_REFUSED
    assert "refused" in capsys.readouterr().err
    assert len(load_corpus(cli_workspace / "corpus")) == 12  # untouched


def test_synth_force_regenerates(tmp_path):
    out = tmp_path / "c"
    assert main(["synth", "--slides", "1", "--patches", "2", "--out", str(out)]) == EXIT_OK
    assert main(["synth", "--slides", "1", "--patches", "3", "--out", str(out),
                 "--force"]) == EXIT_OK
    assert len(load_corpus(out)) == 3


def test_pretrain_eval_round_trip(cli_workspace):
    run_dir = cli_workspace / "run"
    code = main(["pretrain", "--config", str(cli_workspace / "tiny.yaml"),
                 "--corpus", str(cli_workspace / "corpus"),
                 "--out", str(run_dir), "--through-stage", "1"])
    assert code == EXIT_OK
    assert (run_dir / "stage1.ckpt").is_file()
    assert (run_dir / "config.yaml").is_file()
    assert (run_dir / "loss_trace.csv").is_file()
    assert (run_dir / "loss_trace.png").is_file()

    # a second invocation without --resume/--force refuses
    assert main(["pretrain", "--config", str(cli_workspace / "tiny.yaml"),
                 "--corpus", str(cli_workspace / "corpus"),
                 "--out", str(run_dir), "--through-stage", "1"]) == EXIT_REFUSED

    eval_dir = cli_workspace / "eval"
    code = main(["eval", "--checkpoint", str(run_dir / "stage1.ckpt"),
                 "--corpus", str(cli_workspace / "corpus"),
                 "--task", "align", "--out", str(eval_dir)])
    assert code == EXIT_OK
    report = json.loads((eval_dir / "report_align.json").read_text())
    assert report["task"] == "align"
    assert report["stage_id"] == 1
    for key in ("domain_probe_acc", "recall_at_1", "recall_at_5"):
        assert key in report["metrics"]
    assert (eval_dir / "projection.png").is_file()
    assert (eval_dir / "embeddings.npz").is_file()

    # refusal on existing report, then --force overwrites
    assert main(["eval", "--checkpoint", str(run_dir / "stage1.ckpt"),
                 "--corpus", str(cli_workspace / "corpus"),
                 "--task", "align", "--out", str(eval_dir)]) == EXIT_REFUSED
    assert main(["eval", "--checkpoint", str(run_dir / "stage1.ckpt"),
                 "--corpus", str(cli_workspace / "corpus"),
                 "--task", "align", "--out", str(eval_dir), "--force"]) == EXIT_OK


def test_pretrain_resume_continues(cli_workspace):
    run_dir = cli_workspace / "resume_run"
    assert main(["pretrain", "--config", str(cli_workspace / "tiny.yaml"),
                 "--corpus", str(cli_workspace / "corpus"),
                 "--out", str(run_dir), "--through-stage", "1"]) == EXIT_OK
    assert main(["pretrain", "--config", str(cli_workspace / "tiny.yaml"),
                 "--corpus", str(cli_workspace / "corpus"),
                 "--out", str(run_dir), "--through-stage", "2",
                 "--resume"]) == EXIT_OK
    assert (run_dir / "stage2.ckpt").is_file()


def test_pretrain_single_modality(cli_workspace):
    run_dir = cli_workspace / "sim_only"
    assert main(["pretrain", "--config", str(cli_workspace / "tiny.yaml"),
                 "--corpus", str(cli_workspace / "corpus"),
                 "--out", str(run_dir), "--through-stage", "1",
                 "--modalities", "sim"]) == EXIT_OK
    assert (run_dir / "stage1.ckpt").is_file()


def test_eval_cluster_task(cli_workspace):
    run_dir = cli_workspace / "run"
    out = cli_workspace / "cluster_eval"
    assert main(["eval", "--checkpoint", str(run_dir / "stage1.ckpt"),
                 "--corpus", str(cli_workspace / "corpus"),
                 "--task", "cluster", "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "report_cluster.json").read_text())
    assert "cluster_agreement" in report["metrics"]
    lines = (out / "cluster_map.csv").read_text().splitlines()
    assert lines[0] == "patch,component_he,component_sim"
    assert len(lines) == 1 + 12


def test_eval_mil_task(cli_workspace):
    run_dir = cli_workspace / "run"
    out = cli_workspace / "mil_eval"
    assert main(["eval", "--checkpoint", str(run_dir / "stage1.ckpt"),
                 "--corpus", str(cli_workspace / "corpus"),
                 "--task", "mil", "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "report_mil.json").read_text())
    for modality in ("he", "sim"):
        assert 0.0 <= report["metrics"][modality]["accuracy"] <= 1.0


def test_usage_errors():
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["eval", "--task", "nope"]) == EXIT_USAGE


def test_runtime_error_exit_code(tmp_path, capsys):
    code = main(["pretrain", "--corpus", str(tmp_path / "nowhere"),
                 "--out", str(tmp_path / "out")])
    assert code == 4
    assert "error" in capsys.readouterr().err

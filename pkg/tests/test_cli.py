"""Operator surface: exit codes, precedence, idempotence, summaries."""

import json
from pathlib import Path

import numpy as np
import pytest

from avlab.cli import build_run_config, main
from avlab.errors import ConfigError
from avlab.featureio import read_frame_mask, read_manifest, write_features, FeatureSequence
from avlab.trainer import RunReport

SMALL = [
    "--set", "synth.n_train=10",
    "--set", "synth.n_test=6",
    "--set", "synth.min_len=12",
    "--set", "synth.max_len=20",
    "--set", "synth.d=16",
]
TINY_MODEL = ["--set", "model.d=16", "--set", "train.epochs=1", "--set", "train.batch_size=4"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_data")
    assert main(["synth", "--out", str(out), *SMALL]) == 0
    return out


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------
# config resolution


def test_unknown_top_key_rejected(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("bogus: 1\n")
    with pytest.raises(ConfigError, match="bogus"):
        build_run_config(cfg)


def test_unknown_section_key_rejected(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  warmup: 5\n")
    with pytest.raises(ConfigError, match="train.warmup"):
        build_run_config(cfg)


def test_section_seed_is_banned(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  seed: 1\n")
    with pytest.raises(ConfigError, match="controlled elsewhere"):
        build_run_config(cfg)


def test_precedence_file_set_flag(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 5\ntrain:\n  epochs: 7\n")
    rc = build_run_config(cfg, sets=["train.epochs=3"], seed=9)
    assert rc.train.epochs == 3  # --set beats file
    assert rc.seed == 9  # flag beats file
    assert rc.train.seed == 9  # single seed feeds the trainer


def test_scientific_notation_coerced():
    # yaml alone would keep bare "1e-4" as a string
    rc = build_run_config(None, sets=["train.learning_rate=1e-4", "loss.ukd_w=2e0"])
    assert rc.train.learning_rate == 1e-4
    assert rc.train.loss.ukd_w == 2.0


def test_non_numeric_value_rejected():
    with pytest.raises(ConfigError, match="train.epochs.*'abc'"):
        build_run_config(None, sets=["train.epochs=abc"])


def test_wrong_value_type_rejected():
    with pytest.raises(ConfigError, match="bad config value"):
        build_run_config(None, sets=["train.batch_size=[2]"])


def test_paper_preset(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("preset: paper\n")
    rc = build_run_config(cfg)
    assert rc.model.d == 512
    assert rc.train.batch_size == 96
    assert rc.train.learning_rate == 1e-5


def test_desk_preset_is_default():
    rc = build_run_config(None)
    assert rc.model.d == 64
    assert rc.train.batch_size == 8
    assert rc.train.learning_rate == 1e-3


def test_help_lists_config_keys(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    for key in ("synth.{", "model.{", "train.{", "loss.{", "k_ratio", "onset_ramp", "learning_rate"):
        assert key in out


# ---------------------------------------------------------------------------
# subcommands and exit codes


def test_synth_idempotent(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth", "--out", str(a), *SMALL]) == 0
    assert main(["synth", "--out", str(b), *SMALL]) == 0
    assert tree_bytes(a) == tree_bytes(b)


def test_train_eval_summary_and_echo(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    code = main([
        "train", "--manifest", str(dataset / "train.jsonl"),
        "--eval-manifest", str(dataset / "test.jsonl"),
        "--out", str(out), *TINY_MODEL,
    ])
    assert code == 0
    text = capsys.readouterr().out
    assert "final loss" in text and "eval frame AP" in text
    report = RunReport.load(out / "report.json")
    assert report.config["preset"] == "desk"
    assert report.config["train"]["mode"] == "teacher_av"
    assert report.config["model"]["d"] == 16
    assert report.final_eval is not None


def test_train_idempotent_checkpoints(dataset, tmp_path):
    runs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        assert main(["train", "--manifest", str(dataset / "train.jsonl"),
                     "--out", str(out), *TINY_MODEL]) == 0
        runs.append(out)
    assert (runs[0] / "model.avck").read_bytes() == (runs[1] / "model.avck").read_bytes()
    d1 = json.loads((runs[0] / "report.json").read_text())
    d2 = json.loads((runs[1] / "report.json").read_text())
    for d in (d1, d2):  # the destination path is the only run-local field
        d["config"].pop("out_dir")
    assert d1 == d2


def test_zero_epochs_notes_it(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["train", "--manifest", str(dataset / "train.jsonl"),
                 "--out", str(out), *TINY_MODEL, "--set", "train.epochs=0"])
    assert code == 0
    assert "zero epochs" in capsys.readouterr().out
    assert (out / "model.avck").exists()


def test_distill_pipeline(dataset, tmp_path):
    t_out, d_out = tmp_path / "t", tmp_path / "d"
    assert main(["train", "--manifest", str(dataset / "train.jsonl"),
                 "--out", str(t_out), *TINY_MODEL]) == 0
    code = main([
        "distill", "--manifest", str(dataset / "train.jsonl"),
        "--teacher", str(t_out / "model.avck"),
        "--out", str(d_out), *TINY_MODEL,
    ])
    assert code == 0
    report = RunReport.load(d_out / "report.json")
    assert report.mode == "distill_ukd"
    assert "ukd" in report.epoch_losses[0]


def test_missing_manifest_is_config_error(tmp_path):
    assert main(["train", "--out", str(tmp_path), *TINY_MODEL]) == 1


def test_unreadable_manifest_is_data_error(tmp_path):
    code = main(["train", "--manifest", str(tmp_path / "nope.jsonl"),
                 "--out", str(tmp_path / "o"), *TINY_MODEL])
    assert code == 2


def test_distill_without_teacher_is_config_error(dataset, tmp_path):
    code = main(["distill", "--manifest", str(dataset / "train.jsonl"),
                 "--out", str(tmp_path), *TINY_MODEL])
    assert code == 1


def test_bad_config_file_key_exit_code(dataset, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  warmup: 5\n")
    code = main(["train", "-c", str(cfg), "--manifest", str(dataset / "train.jsonl"),
                 "--out", str(tmp_path / "o")])
    assert code == 1


def test_eval_oracle_scores_prints_perfect(dataset, tmp_path, capsys):
    t_out = tmp_path / "t"
    assert main(["train", "--manifest", str(dataset / "train.jsonl"),
                 "--out", str(t_out), *TINY_MODEL, "--set", "train.epochs=0"]) == 0
    scores = tmp_path / "scores"
    scores.mkdir()
    for rec in read_manifest(dataset / "test.jsonl"):
        gt = read_frame_mask(rec.frame_gt_path)
        a = (gt > 0).astype(np.float32).reshape(-1, 1)
        m = -np.ones((gt.shape[0], 5), dtype=np.float32)
        for ci in range(1, 5):
            m[gt == ci, ci] = 1.0
        write_features(FeatureSequence(rec.video_id, "scores", np.concatenate([a, m], 1)),
                       scores / f"{rec.video_id}.avfe")
    report_path = tmp_path / "report.json"
    code = main(["eval", "--checkpoint", str(t_out / "model.avck"),
                 "--manifest", str(dataset / "test.jsonl"),
                 "--scores-dir", str(scores), "--out", str(report_path)])
    assert code == 0
    text = capsys.readouterr().out
    assert "frame AP: 1.0" in text
    assert json.loads(report_path.read_text())["frame_ap"] == 1.0


def test_score_then_eval_roundtrip(dataset, tmp_path):
    t_out = tmp_path / "t"
    assert main(["train", "--manifest", str(dataset / "train.jsonl"),
                 "--out", str(t_out), *TINY_MODEL]) == 0
    dump = tmp_path / "dump"
    assert main(["score", "--checkpoint", str(t_out / "model.avck"),
                 "--manifest", str(dataset / "test.jsonl"), "--out", str(dump)]) == 0
    assert main(["eval", "--checkpoint", str(t_out / "model.avck"),
                 "--manifest", str(dataset / "test.jsonl"),
                 "--scores-dir", str(dump)]) == 0


def test_gradcheck_quick(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert "worst relative error" in out
    assert "matmul" in out and "teacher_task_loss" in out

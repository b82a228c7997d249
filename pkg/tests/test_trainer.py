"""Training loops, checkpointing, evaluation, and their contracts."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from avlab.errors import ConfigError, ContractError, DataError
from avlab.featureio import (
    FeatureSequence,
    SynthConfig,
    read_frame_mask,
    read_manifest,
    synth_generate,
    write_features,
)
from avlab.losses import LossConfig
from avlab.model import ModelConfig, detect, init_params, load_checkpoint
from avlab.trainer import (
    RunReport,
    TrainConfig,
    dump_scores,
    evaluate,
    named_streams,
    train,
)


def small_synth(seed=11):
    return SynthConfig(
        seed=seed, n_train=12, n_test=8, d=16, min_len=12, max_len=20
    )


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    cfg = small_synth()
    train_m, test_m = synth_generate(cfg, root)
    return cfg, train_m, test_m


def model_cfg(scfg):
    return ModelConfig(d=scfg.d, classes=scfg.classes)


def tcfg(**kw):
    base = dict(seed=3, batch_size=4, learning_rate=1e-3, epochs=2)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# training basics


def test_zero_epochs_checkpoint_is_initialization(data, tmp_path):
    scfg, train_m, _ = data
    ck, report = train(model_cfg(scfg), tcfg(epochs=0), train_m, tmp_path)
    assert report.epoch_losses == []
    got = load_checkpoint(ck)
    want = init_params(model_cfg(scfg), np.random.default_rng(named_streams(3)["init"]))
    assert sorted(got.tensors) == sorted(want.tensors)
    for name, t in want.tensors.items():
        assert got.tensors[name].tobytes() == t.tobytes()


def test_teacher_loss_decreases(data, tmp_path):
    scfg, train_m, _ = data
    _, report = train(model_cfg(scfg), tcfg(epochs=4), train_m, tmp_path)
    assert report.epoch_losses[-1]["total"] < report.epoch_losses[0]["total"]
    assert report.n_trainable > 0


def test_same_seed_bitwise_identical(data, tmp_path):
    scfg, train_m, _ = data
    ck1, rep1 = train(model_cfg(scfg), tcfg(), train_m, tmp_path / "a")
    ck2, rep2 = train(model_cfg(scfg), tcfg(), train_m, tmp_path / "b")
    assert Path(ck1).read_bytes() == Path(ck2).read_bytes()
    assert rep1.epoch_losses[-1]["total"] == rep2.epoch_losses[-1]["total"]


def test_different_seed_differs(data, tmp_path):
    scfg, train_m, _ = data
    ck1, _ = train(model_cfg(scfg), tcfg(seed=3), train_m, tmp_path / "a")
    ck2, _ = train(model_cfg(scfg), tcfg(seed=4), train_m, tmp_path / "b")
    assert Path(ck1).read_bytes() != Path(ck2).read_bytes()


def test_ukd_weight_zero_matches_student_visual(data, tmp_path):
    scfg, train_m, _ = data
    ck_t, _ = train(model_cfg(scfg), tcfg(epochs=0), train_m, tmp_path / "t")
    ck_d, _ = train(
        model_cfg(scfg),
        tcfg(mode="distill_ukd", teacher_checkpoint=ck_t, loss=LossConfig(ukd_w=0.0)),
        train_m,
        tmp_path / "d",
    )
    ck_s, _ = train(model_cfg(scfg), tcfg(mode="student_visual"), train_m, tmp_path / "s")
    pd_, ps = load_checkpoint(ck_d), load_checkpoint(ck_s)
    for name in ps.names():
        assert np.array_equal(pd_.tensors[name], ps.tensors[name]), name


def test_frozen_teacher_checkpoint_untouched(data, tmp_path):
    scfg, train_m, _ = data
    ck_t, _ = train(model_cfg(scfg), tcfg(epochs=1), train_m, tmp_path / "t")
    before = hashlib.sha256(Path(ck_t).read_bytes()).hexdigest()
    train(
        model_cfg(scfg),
        tcfg(mode="distill_ukd", teacher_checkpoint=ck_t),
        train_m,
        tmp_path / "d",
    )
    assert hashlib.sha256(Path(ck_t).read_bytes()).hexdigest() == before


def test_distill_from_degenerate_teacher_drives_variance_down(data, tmp_path):
    # an untrained teacher emits X_av == X_v, so the student matches it
    # exactly at init and the optimal variance falls toward the lower clamp
    scfg, train_m, _ = data
    ck_t, _ = train(model_cfg(scfg), tcfg(epochs=0), train_m, tmp_path / "t")
    ck_d, report = train(
        model_cfg(scfg),
        tcfg(mode="distill_ukd", teacher_checkpoint=ck_t, epochs=3),
        train_m,
        tmp_path / "d",
    )
    assert report.epoch_losses[-1]["ukd"] < 0.0
    params = load_checkpoint(ck_d)
    recs = read_manifest(train_m)
    seq = __import__("avlab.featureio", fromlist=["read_features"]).read_features(
        recs[0].visual_path
    )
    out = detect(params, seq.data, None, student=True)
    assert out.log_var.mean() < 0.0


def test_init_from_teacher_copies_shared_groups(data, tmp_path):
    scfg, train_m, _ = data
    ck_t, _ = train(model_cfg(scfg), tcfg(epochs=2), train_m, tmp_path / "t")
    ck_d, _ = train(
        model_cfg(scfg),
        tcfg(mode="distill_ukd", teacher_checkpoint=ck_t, init_from_teacher=True, epochs=0),
        train_m,
        tmp_path / "d",
    )
    teacher, student = load_checkpoint(ck_t), load_checkpoint(ck_d)
    for name in student.names():
        group = name.split(".")[0]
        same = np.array_equal(student.tensors[name], teacher.tensors[name])
        if group in ("temporal_visual", "classifier", "prompt_ffn") or name in (
            "class_context",
            "class_base",
        ):
            assert same, name
        elif group in ("enhance", "uncert"):
            # student-only heads stay at their own initialization
            assert student.tensors[name].shape == teacher.tensors[name].shape


# ---------------------------------------------------------------------------
# config and data errors


def test_missing_audio_names_video(data, tmp_path):
    scfg, train_m, _ = data
    recs = read_manifest(train_m)
    lines = []
    for i, r in enumerate(recs):
        lines.append(
            json.dumps(
                {
                    "video_id": r.video_id,
                    "visual_path": r.visual_path,
                    "audio_path": None if i == 0 else r.audio_path,
                    "label": r.label,
                    "frame_gt_path": r.frame_gt_path,
                }
            )
        )
    broken = tmp_path / "broken.jsonl"
    broken.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match=recs[0].video_id):
        train(model_cfg(scfg), tcfg(), broken, tmp_path / "out")


def test_teacher_dim_mismatch(data, tmp_path):
    scfg, train_m, _ = data
    ck_t, _ = train(model_cfg(scfg), tcfg(epochs=0), train_m, tmp_path / "t")
    wide = ModelConfig(d=32, classes=scfg.classes)
    with pytest.raises(ConfigError, match="teacher d=16"):
        train(wide, tcfg(mode="distill_ukd", teacher_checkpoint=ck_t), train_m, tmp_path / "d")


def test_distill_requires_teacher():
    with pytest.raises(ConfigError):
        tcfg(mode="distill_ukd").validate()


def test_teacher_checkpoint_rejected_for_teacher_mode():
    with pytest.raises(ConfigError):
        tcfg(mode="teacher_av", teacher_checkpoint="x.avck").validate()


def test_init_from_teacher_requires_checkpoint():
    with pytest.raises(ConfigError):
        tcfg(mode="student_visual", init_from_teacher=True).validate()


def test_parameter_budget_enforced(data, tmp_path):
    scfg, train_m, _ = data
    fat = ModelConfig(d=16, classes=scfg.classes, h_ffn=4096)
    with pytest.raises(ContractError, match="budget"):
        train(fat, tcfg(), train_m, tmp_path)


# ---------------------------------------------------------------------------
# evaluation


def oracle_score_dump(test_m, out_dir, c):
    """Per-video [A | M] where A is the gt indicator and M picks the gt class."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in read_manifest(test_m):
        gt = read_frame_mask(rec.frame_gt_path)
        n = gt.shape[0]
        a = (gt > 0).astype(np.float32).reshape(-1, 1)
        m = -np.ones((n, c), dtype=np.float32)
        for ci in range(1, c):
            m[gt == ci, ci] = 1.0
        write_features(
            FeatureSequence(rec.video_id, "scores", np.concatenate([a, m], axis=1)),
            out / f"{rec.video_id}.avfe",
        )


def test_evaluate_with_oracle_scores_is_perfect(data, tmp_path):
    scfg, train_m, test_m = data
    ck, _ = train(model_cfg(scfg), tcfg(epochs=0), train_m, tmp_path / "t")
    params = load_checkpoint(ck)
    oracle_score_dump(test_m, tmp_path / "scores", len(scfg.classes))
    report = evaluate(params, test_m, scores_dir=tmp_path / "scores")
    assert report.frame_ap == 1.0
    assert report.avg_map == 1.0
    for th, v in report.map_per_iou.items():
        assert v == 1.0, th


def test_evaluate_random_scores_near_prevalence(data, tmp_path):
    scfg, train_m, test_m = data
    ck, _ = train(model_cfg(scfg), tcfg(epochs=0), train_m, tmp_path / "t")
    params = load_checkpoint(ck)
    c = len(scfg.classes)
    gts = [read_frame_mask(r.frame_gt_path) for r in read_manifest(test_m)]
    prevalence = np.concatenate([g > 0 for g in gts]).mean()
    aps = []
    for trial in range(20):
        rng = np.random.default_rng(trial)
        out = tmp_path / f"s{trial}"
        out.mkdir()
        for rec, gt in zip(read_manifest(test_m), gts):
            n = gt.shape[0]
            mat = np.concatenate(
                [rng.random((n, 1)), rng.uniform(-1, 1, (n, c))], axis=1
            ).astype(np.float32)
            write_features(FeatureSequence(rec.video_id, "scores", mat), out / f"{rec.video_id}.avfe")
        aps.append(evaluate(params, test_m, scores_dir=out).frame_ap)
    assert abs(np.mean(aps) - prevalence) < 0.06


def test_evaluate_uses_checkpoint_mode(data, tmp_path):
    scfg, train_m, test_m = data
    ck, _ = train(model_cfg(scfg), tcfg(mode="student_visual", epochs=1), train_m, tmp_path)
    params = load_checkpoint(ck)
    assert params.meta["mode"] == "student_visual"
    report = evaluate(params, test_m)  # student pathway: no audio needed
    assert report.counts["n_videos"] == 8


def test_evaluate_skips_unannotated_videos(data, tmp_path):
    scfg, train_m, _ = data
    ck, _ = train(model_cfg(scfg), tcfg(epochs=0), train_m, tmp_path / "t")
    report = evaluate(load_checkpoint(ck), train_m)  # train split has no masks
    assert report.frame_ap is None
    assert any("lack frame_gt" in n for n in report.notices)


def test_dump_scores_roundtrip_through_evaluate(data, tmp_path):
    scfg, train_m, test_m = data
    ck, _ = train(model_cfg(scfg), tcfg(epochs=1), train_m, tmp_path / "t")
    params = load_checkpoint(ck)
    direct = evaluate(params, test_m)
    dump_scores(params, test_m, tmp_path / "dump")
    via_dump = evaluate(params, test_m, scores_dir=tmp_path / "dump")
    assert via_dump.frame_ap == pytest.approx(direct.frame_ap, abs=1e-7)
    assert via_dump.avg_map == pytest.approx(direct.avg_map, abs=1e-7)


def test_run_report_roundtrip(data, tmp_path):
    scfg, train_m, test_m = data
    ck, report = train(model_cfg(scfg), tcfg(epochs=1), train_m, tmp_path)
    report.final_eval = evaluate(load_checkpoint(ck), test_m)
    p = tmp_path / "report.json"
    report.save(p)
    back = RunReport.load(p)
    assert back.mode == report.mode
    assert back.epoch_losses == report.epoch_losses
    assert back.n_trainable == report.n_trainable
    assert back.final_eval.frame_ap == report.final_eval.frame_ap
    assert back.config == report.config

"""Optimization loops, evaluation, score export, and run reports.

Modes:
  * ``teacher_av``: audio-visual detector, trains temporal encoders,
    fusion, classifier, prompt path.
  * ``student_visual`` / ``student_audio``: single-modality detector with
    the enhancement and uncertainty heads, task losses only.
  * ``distill_ukd``: student trained with task losses plus the
    uncertainty-weighted feature-matching term against a frozen teacher's
    fused features.

Batching averages per-video scalar losses; every video gets its own tape,
so variable lengths need no padding. All randomness descends from the run
seed through named substreams (data, init, shuffle).
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import losses as ls
from .errors import ConfigError, ContractError, DataError
from .featureio import (
    FeatureSequence,
    read_features,
    read_frame_mask,
    read_manifest,
    expand_scores,
    resample,
    write_features,
)
from .metrics import EvalReport, detection_report, segments_from_mask, sweep_proposals
from .model import (
    TRAINABLE_GROUPS,
    ModelConfig,
    ModelParams,
    bind_params,
    detect,
    init_params,
    load_checkpoint,
    load_class_base,
    save_checkpoint,
    student_forward,
    teacher_forward,
)

log = logging.getLogger("avlab")

MODES = ("teacher_av", "student_visual", "student_audio", "distill_ukd")
STUDENT_MODES = ("student_visual", "student_audio", "distill_ukd")

STREAM_NAMES = ("data", "init", "shuffle")


def named_streams(seed: int) -> dict[str, np.random.SeedSequence]:
    """One independent stream per concern, all derived from the run seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAM_NAMES))
    return dict(zip(STREAM_NAMES, children))


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 96
    learning_rate: float = 1e-5
    epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mode: str = "teacher_av"
    teacher_checkpoint: str | None = None
    init_from_teacher: bool = False
    stride: int = 1
    max_len: int = 256
    loss: ls.LossConfig = field(default_factory=ls.LossConfig)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("batch_size", "epochs", "stride", "max_len"):
            if getattr(self, name) < (0 if name == "epochs" else 1):
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("learning_rate", "beta1", "beta2", "adam_eps"):
            if getattr(self, name) <= 0 or (name.startswith("beta") and getattr(self, name) >= 1):
                raise ConfigError(f"{name} out of range: {getattr(self, name)}")
        if self.mode == "distill_ukd" and not self.teacher_checkpoint:
            raise ConfigError("distill_ukd requires teacher_checkpoint")
        if self.teacher_checkpoint and self.mode == "teacher_av":
            raise ConfigError("teacher_checkpoint is only meaningful for student modes")
        if self.init_from_teacher and not self.teacher_checkpoint:
            raise ConfigError("init_from_teacher requires teacher_checkpoint")
        self.loss.validate()


@dataclass
class RunReport:
    mode: str
    config: dict
    epoch_losses: list[dict]
    n_trainable: int
    final_eval: EvalReport | None = None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "config": self.config,
            "epoch_losses": self.epoch_losses,
            "n_trainable": self.n_trainable,
            "final_eval": self.final_eval.to_dict() if self.final_eval else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        fe = d.get("final_eval")
        return cls(
            mode=d["mode"],
            config=d["config"],
            epoch_losses=d["epoch_losses"],
            n_trainable=d["n_trainable"],
            final_eval=EvalReport.from_dict(fe) if fe else None,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class _Video:
    video_id: str
    xv: np.ndarray
    xa: np.ndarray | None
    label: list[int]
    raw_n: int
    frame_gt: np.ndarray | None


def load_dataset(manifest_path, stride: int, max_len: int, need_audio: bool) -> list[_Video]:
    videos = []
    for rec in read_manifest(manifest_path):
        vseq = read_features(rec.visual_path)
        raw_n = vseq.n_frames
        xv = resample(vseq, stride, max_len).data
        xa = None
        if rec.audio_path is not None:
            aseq = read_features(rec.audio_path)
            if aseq.n_frames != raw_n:
                raise DataError(
                    f"video {rec.video_id}: visual N={raw_n} but audio N={aseq.n_frames}"
                )
            xa = resample(aseq, stride, max_len).data
        elif need_audio:
            raise DataError(f"video {rec.video_id}: audio features required but missing")
        gt = None
        if rec.frame_gt_path is not None:
            gt = read_frame_mask(rec.frame_gt_path)
            if gt.shape[0] != raw_n:
                raise DataError(
                    f"video {rec.video_id}: frame_gt length {gt.shape[0]} != raw N {raw_n}"
                )
        videos.append(_Video(rec.video_id, xv, xa, rec.label, raw_n, gt))
    if not videos:
        raise DataError(f"{manifest_path}: manifest contains no videos")
    return videos


class Adam:
    """First-order adaptive updates; state per named tensor."""

    def __init__(self, names, shapes, lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros(shapes[n], dtype=np.float32) for n in names}
        self.v = {n: np.zeros(shapes[n], dtype=np.float32) for n in names}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for n, g in grads.items():
            g = g.astype(np.float32, copy=False)
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            update = (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            tensors[n] = tensors[n] - self.lr * update


def _student_input(video: _Video, mode: str) -> np.ndarray:
    if mode == "student_audio":
        if video.xa is None:
            raise DataError(f"video {video.video_id}: audio features required but missing")
        return video.xa
    return video.xv


def _forward_and_loss(params, cfg: TrainConfig, video: _Video, teacher_xav):
    tape = dc.Tape(np.float32)
    nodes = bind_params(tape, params)
    if cfg.mode == "teacher_av":
        out = teacher_forward(
            tape, nodes, params.config, tape.leaf(video.xv), tape.leaf(video.xa)
        )
        parts = ls.task_loss(out, video.label, cfg.loss)
    elif cfg.mode == "distill_ukd":
        out = student_forward(tape, nodes, params.config, tape.leaf(video.xv))
        parts = ls.distill_loss(out, tape.leaf(teacher_xav), video.label, cfg.loss)
    else:
        out = student_forward(tape, nodes, params.config, tape.leaf(_student_input(video, cfg.mode)))
        parts = ls.task_loss(out, video.label, cfg.loss)
    return tape, nodes, parts


def train(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    manifest_path,
    out_dir,
    class_base: np.ndarray | None = None,
    config_echo: dict | None = None,
) -> tuple[str, RunReport]:
    """Run one training job; writes model.avck and report.json in out_dir.

    ``config_echo`` replaces the default model+train echo in the report so
    callers resolving a richer config can reproduce the run from the report
    alone.
    """
    cfg.validate()
    t0 = time.monotonic()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    streams = named_streams(cfg.seed)
    init_rng = np.random.default_rng(streams["init"])
    shuffle_rng = np.random.default_rng(streams["shuffle"])

    params = init_params(model_cfg, init_rng)
    if class_base is not None:
        load_class_base(params, class_base)

    teacher = None
    if cfg.teacher_checkpoint:
        teacher = load_checkpoint(cfg.teacher_checkpoint)
        if teacher.config.d != model_cfg.d:
            raise ConfigError(
                f"teacher d={teacher.config.d} does not match student d={model_cfg.d}"
            )
        if cfg.init_from_teacher:
            # inherit whatever the teacher actually trained and the student reuses
            shared = set(TRAINABLE_GROUPS["teacher_av"]) & set(TRAINABLE_GROUPS[cfg.mode])
            for name in list(params.tensors):
                if name.split(".")[0] in shared or name == "class_base":
                    params.tensors[name] = teacher.tensors[name].copy()

    need_audio = cfg.mode in ("teacher_av", "student_audio", "distill_ukd")
    videos = load_dataset(manifest_path, cfg.stride, cfg.max_len, need_audio)

    teacher_xav: dict[str, np.ndarray] = {}
    if cfg.mode == "distill_ukd":
        for v in videos:
            teacher_xav[v.video_id] = detect(teacher, v.xv, v.xa, student=False).X_av

    trainable = params.trainable_names(cfg.mode)
    budget = 10 * model_cfg.d**2 + 8 * model_cfg.n_classes * model_cfg.d
    n_trainable = params.n_trainable(cfg.mode)
    if n_trainable >= budget:
        raise ContractError(f"{n_trainable} trainable parameters exceed budget {budget}")

    shapes = {n: params.tensors[n].shape for n in trainable}
    opt = Adam(trainable, shapes, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)

    epoch_losses: list[dict] = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(videos))
        sums: dict[str, float] = {}
        count = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            grad_sum = {n: np.zeros(shapes[n], dtype=np.float32) for n in trainable}
            for vi in batch:
                video = videos[vi]
                tape, nodes, parts = _forward_and_loss(
                    params, cfg, video, teacher_xav.get(video.video_id)
                )
                tape.backward(parts["total"])
                for name in trainable:
                    g = nodes[name].grad
                    if g is not None:
                        grad_sum[name] += g
                for key, node in parts.items():
                    sums[key] = sums.get(key, 0.0) + node.item()
                count += 1
            scale = 1.0 / len(batch)
            opt.step(params.tensors, {n: g * scale for n, g in grad_sum.items()})
            params.finite_or_raise()
        means = {k: v / count for k, v in sorted(sums.items())}
        epoch_losses.append(means)
        log.info("epoch %d: %s", epoch, " ".join(f"{k}={v:.4f}" for k, v in means.items()))

    params.meta = {"mode": cfg.mode, "seed": cfg.seed}
    ckpt_path = str(out / "model.avck")
    save_checkpoint(params, ckpt_path)

    if teacher is not None:
        after = load_checkpoint(cfg.teacher_checkpoint)
        for name in teacher.names():
            if after.tensors[name].tobytes() != teacher.tensors[name].tobytes():
                raise ContractError(f"teacher parameter {name} changed during distillation")

    # the report must be a pure function of config and data, so elapsed
    # time only goes to the log
    log.info("trained %s in %.1fs", cfg.mode, time.monotonic() - t0)
    report = RunReport(
        mode=cfg.mode,
        config=config_echo or {"model": asdict(model_cfg), "train": _config_echo(cfg)},
        epoch_losses=epoch_losses,
        n_trainable=n_trainable,
    )
    report.save(out / "report.json")
    return ckpt_path, report


def _config_echo(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["loss"] = asdict(cfg.loss)
    return d


# ---------------------------------------------------------------------------
# evaluation and score export


def _detection_for(params: ModelParams, video: _Video, mode: str):
    if mode in STUDENT_MODES:
        return detect(params, _student_input(video, mode), None, student=True)
    if video.xa is None:
        raise DataError(f"video {video.video_id}: audio features required but missing")
    return detect(params, video.xv, video.xa, student=False)


def _mode_of(params: ModelParams, mode: str | None) -> str:
    resolved = mode or params.meta.get("mode") or "teacher_av"
    if resolved not in MODES:
        raise ConfigError(f"unknown evaluation mode {resolved!r}")
    return resolved


def evaluate(
    params: ModelParams,
    manifest_path,
    stride: int = 1,
    max_len: int = 256,
    mode: str | None = None,
    scores_dir=None,
) -> EvalReport:
    """Score every video, expand to raw frame rate, and compute the report.

    ``scores_dir`` substitutes per-video score dumps (AVFE, modality tag 2,
    columns [A | M]) for model forwards — the oracle-injection path.
    """
    mode = _mode_of(params, mode)
    need_audio = mode in ("teacher_av", "student_audio")
    videos = load_dataset(manifest_path, stride, max_len, need_audio)
    class_names = params.config.classes
    c = params.config.n_classes

    all_scores, all_gt = [], []
    preds, gts = [], []
    notices = []
    skipped = 0
    for video in videos:
        if video.frame_gt is None:
            skipped += 1
            continue
        if scores_dir is not None:
            seq = read_features(Path(scores_dir) / f"{video.video_id}.avfe")
            if seq.modality != "scores" or seq.dim != 1 + c:
                raise DataError(
                    f"{video.video_id}: expected score dump with {1 + c} columns"
                )
            if seq.n_frames != video.xv.shape[0]:
                raise DataError(
                    f"{video.video_id}: score dump rows {seq.n_frames} != resampled N {video.xv.shape[0]}"
                )
            a = seq.data[:, 0]
            m = seq.data[:, 1:]
        else:
            det = _detection_for(params, video, mode)
            a, m = det.A, det.M
        a_raw = expand_scores(a, video.raw_n, stride, max_len)
        all_scores.append(a_raw)
        all_gt.append((video.frame_gt > 0).astype(np.int8))
        gts.extend(segments_from_mask(video.frame_gt, video.video_id))
        for ci in range(1, c):
            curve = ((m[:, ci] + 1.0) / 2.0) * a
            curve_raw = expand_scores(curve, video.raw_n, stride, max_len)
            preds.extend(sweep_proposals(curve_raw, ci, video.video_id))
    if skipped:
        notices.append(f"{skipped} videos lack frame_gt; skipped in metrics")
    if not all_scores:
        notices.append("no annotated videos; all metrics absent")
        return detection_report(None, None, [], [], class_names, notices)
    report = detection_report(
        np.concatenate(all_scores),
        np.concatenate(all_gt),
        preds,
        gts,
        class_names,
        notices,
    )
    report.counts["n_videos"] = len(videos) - skipped
    return report


def dump_scores(params: ModelParams, manifest_path, out_dir, stride=1, max_len=256, mode=None):
    """Write per-video [A | M] matrices (AVFE, modality tag 2, resampled N)."""
    mode = _mode_of(params, mode)
    need_audio = mode in ("teacher_av", "student_audio")
    videos = load_dataset(manifest_path, stride, max_len, need_audio)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for video in videos:
        det = _detection_for(params, video, mode)
        mat = np.concatenate([det.A.reshape(-1, 1), det.M], axis=1).astype(np.float32)
        path = out / f"{video.video_id}.avfe"
        write_features(FeatureSequence(video.video_id, "scores", mat), path)
        written.append(str(path))
    return written

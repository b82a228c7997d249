"""Training objectives: top-K BCE, MIL alignment, and uncertainty-weighted
feature distillation.

The alignment branch scores each class by averaging the top-K entries of its
alignment-map column, converts scores to probabilities with a temperature
softmax, and combines a cross-entropy term with a focal term. Multi-label
videos average both terms over the video's positive classes; normal videos
use the normal class as the target.

The distillation term treats the teacher feature as a Gaussian observation
of the student feature with per-frame variance sigma_i^2 = exp(log_var_i):
mean_i [ ||x_teacher_i - x_student_i||^2 / sigma_i^2 + log sigma_i^2 ].
It can go negative when sigma^2 < 1; the log-variance clamp bounds it below.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

from . import diffcore as dc
from .errors import ConfigError

_EPS = 1e-8


@dataclass
class LossConfig:
    k_ratio: float = 1.0 / 16.0
    tau: float = 0.07
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    bce_w: float = 1.0
    align_w: float = 1.0
    task_w: float = 1.0
    ukd_w: float = 1.0

    def validate(self) -> None:
        if not (0.0 < self.k_ratio <= 1.0):
            raise ConfigError(f"k_ratio must be in (0,1], got {self.k_ratio}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.focal_gamma < 0:
            raise ConfigError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        for name in ("focal_alpha", "bce_w", "align_w", "task_w", "ukd_w"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


def top_k(n_frames: int, k_ratio: float) -> int:
    """K = max(1, floor(N * k_ratio))."""
    return max(1, int(math.floor(n_frames * k_ratio)))


def positive_classes(label: list[int]) -> list[int]:
    """Alignment targets: every positive class; class 0 for normal videos."""
    targets = [i for i, v in enumerate(label) if v == 1]
    if not targets:
        raise ConfigError("label vector has no positive class")
    return targets


def topk_bce(a_col: dc.DiffNode, video_label: float, k: int) -> dc.DiffNode:
    """BCE between the top-K mean confidence and the binary video label."""
    a = dc.reshape(a_col, (a_col.values.size,))
    p = dc.topk_mean(a, k)
    # 1 - 1e-8 rounds to 1.0 in float32, so clamp each log argument instead
    log_p = dc.log(dc.clip(p, _EPS, 1.0))
    log_q = dc.log(dc.clip(dc.sub(1.0, p), _EPS, 1.0))
    y = float(video_label)
    return dc.sub(0.0, dc.add(dc.mul(log_p, y), dc.mul(log_q, 1.0 - y)))


def mil_align_scores(m: dc.DiffNode, k: int) -> dc.DiffNode:
    """Per-class video score: mean of the top-K entries of each column of M."""
    n, c = m.values.shape
    if k > n:
        warnings.warn(f"top-K {k} exceeds {n} frames; clamping", stacklevel=2)
        k = n
    return dc.stack([dc.topk_mean(dc.take_column(m, j), k) for j in range(c)])


def _class_probs(scores: dc.DiffNode, tau: float) -> dc.DiffNode:
    return dc.softmax(dc.div(scores, tau))


def _log_prob_at(probs: dc.DiffNode, target: int) -> dc.DiffNode:
    return dc.log(dc.clip(dc.take(probs, target), _EPS, 1.0))


def nce_from_scores(scores: dc.DiffNode, tau: float, targets: list[int]) -> dc.DiffNode:
    """Temperature-softmax cross-entropy, averaged over positive classes."""
    probs = _class_probs(scores, tau)
    terms = [dc.sub(0.0, _log_prob_at(probs, t)) for t in targets]
    return dc.mean_all(dc.stack(terms))


def focal_from_probs(
    probs: dc.DiffNode, targets: list[int], gamma: float, alpha: float
) -> dc.DiffNode:
    """-alpha * (1 - p_t)^gamma * log p_t, averaged over positive classes."""
    terms = []
    for t in targets:
        p_t = dc.clip(dc.take(probs, t), _EPS, 1.0)
        weight = dc.mul(dc.pow_const(dc.sub(1.0, p_t), gamma), alpha)
        terms.append(dc.mul(weight, dc.sub(0.0, dc.log(p_t))))
    return dc.mean_all(dc.stack(terms))


def align_loss(
    m: dc.DiffNode, k: int, tau: float, targets: list[int], gamma: float, alpha: float
) -> dict[str, dc.DiffNode]:
    """Alignment branch: (NCE + focal) / 2 on the MIL class scores."""
    scores = mil_align_scores(m, k)
    probs = _class_probs(scores, tau)
    nce = dc.mean_all(dc.stack([dc.sub(0.0, _log_prob_at(probs, t)) for t in targets]))
    focal = focal_from_probs(probs, targets, gamma, alpha)
    return {"nce": nce, "focal": focal, "align": dc.div(dc.add(nce, focal), 2.0)}


def ukd_loss(
    x_teacher: dc.DiffNode, x_student: dc.DiffNode, log_var: dc.DiffNode
) -> dc.DiffNode:
    """Uncertainty-weighted feature matching; teacher features are constants
    (record them as plain leaves so no gradient reaches the teacher)."""
    diff = dc.sub(x_teacher, x_student)
    sq = dc.sum_axis(dc.square(diff), axis=1)  # L x 1 squared distances
    inv_var = dc.exp(dc.mul(log_var, -1.0))
    return dc.mean_all(dc.add(dc.mul(sq, inv_var), log_var))


def task_loss(
    outputs: dict, label: list[int], cfg: LossConfig
) -> dict[str, dc.DiffNode]:
    """Dual-branch objective shared by teacher and student task training."""
    cfg.validate()
    n = outputs["A"].values.shape[0]
    k = top_k(n, cfg.k_ratio)
    binary = 0.0 if label[0] == 1 else 1.0
    bce = topk_bce(outputs["A"], binary, k)
    parts = align_loss(
        outputs["M"], k, cfg.tau, positive_classes(label), cfg.focal_gamma, cfg.focal_alpha
    )
    total = dc.add(dc.mul(bce, cfg.bce_w), dc.mul(parts["align"], cfg.align_w))
    return {"total": total, "bce": bce, **parts}


def _unit_rows(x: dc.DiffNode) -> dc.DiffNode:
    return dc.div_colvec(x, dc.add(dc.sqrt(dc.sum_axis(dc.square(x), axis=1)), 1e-8))


def distill_loss(
    outputs: dict,
    teacher_xav: dc.DiffNode,
    label: list[int],
    cfg: LossConfig,
) -> dict[str, dc.DiffNode]:
    """Student objective: task_w * task losses + ukd_w * distillation.

    Features enter the matching term at unit scale. Raw feature norms grow
    without bound during teacher training, which would push the squared
    distance past anything the uncertainty can calibrate against; on unit
    vectors the distance is bounded by 4 and the weighting stays live.
    """
    parts = task_loss(outputs, label, cfg)
    ukd = ukd_loss(_unit_rows(teacher_xav), _unit_rows(outputs["X_av"]), outputs["log_var"])
    total = dc.add(dc.mul(parts["total"], cfg.task_w), dc.mul(ukd, cfg.ukd_w))
    return {**parts, "ukd": ukd, "total": total}

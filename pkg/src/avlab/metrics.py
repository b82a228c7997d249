"""Evaluation: frame-level AP, segment-level mAP over IoU thresholds, and
the proposal generator that turns score curves into segments.

AP uses all-points interpolation: the sum of precision evaluated at each
positive, divided by the positive count. Equal scores form one tie group
whose precision is evaluated once, after the whole group; this makes the
metric invariant to the ordering of equal-scored items.

Detection AP ranks pooled predictions per class by score, greedily matches
each one (in rank order) to the unmatched ground-truth segment of the same
video with the largest IoU when that IoU clears the threshold, and applies
the same tie-grouped all-points rule with the ground-truth count as the
recall denominator. IoU threshold comparisons use >= .
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DataError

IOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)
PROPOSAL_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
MIN_PROPOSAL_LEN = 2


@dataclass
class Segment:
    """Half-open temporal span [start, end) of one class within one video."""

    class_index: int
    start: int
    end: int
    score: float
    video_id: str = ""

    def __post_init__(self):
        if self.start < 0 or self.end <= self.start:
            raise ConfigError(f"segment [{self.start}, {self.end}) is empty or negative")

    def iou(self, other: "Segment") -> float:
        inter = max(0, min(self.end, other.end) - max(self.start, other.start))
        union = (self.end - self.start) + (other.end - other.start) - inter
        return inter / union


@dataclass
class EvalReport:
    frame_ap: float | None
    map_per_iou: dict[float, float | None]
    avg_map: float | None
    per_class_ap: dict[str, float | None] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    notices: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "frame_ap": self.frame_ap,
            "map_per_iou": {str(k): v for k, v in self.map_per_iou.items()},
            "avg_map": self.avg_map,
            "per_class_ap": dict(self.per_class_ap),
            "counts": dict(self.counts),
            "notices": list(self.notices),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            frame_ap=d["frame_ap"],
            map_per_iou={float(k): v for k, v in d["map_per_iou"].items()},
            avg_map=d["avg_map"],
            per_class_ap=dict(d.get("per_class_ap", {})),
            counts=dict(d.get("counts", {})),
            notices=list(d.get("notices", [])),
        )


def _tie_grouped_ap(scores: np.ndarray, flags: np.ndarray, n_pos: int) -> float:
    """Shared AP core: flags mark positives, scores rank them, ties group."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    f = flags[order].astype(np.float64)
    boundaries = np.flatnonzero(np.diff(s)) + 1
    tp = fp = 0.0
    ap = 0.0
    start = 0
    for stop in list(boundaries) + [len(s)]:
        g_tp = f[start:stop].sum()
        g_fp = (stop - start) - g_tp
        tp += g_tp
        fp += g_fp
        if g_tp:
            ap += g_tp * (tp / (tp + fp))
        start = stop
    return ap / n_pos


def frame_ap(scores, gt) -> float | None:
    """Average precision of frame scores against a binary mask.

    Returns None when the ground truth has no positive frames (undefined).
    """
    scores = np.asarray(scores, dtype=np.float64)
    gt = np.asarray(gt)
    if scores.ndim != 1 or scores.shape != gt.shape:
        raise ContractError(f"scores {scores.shape} vs gt {gt.shape}")
    if not np.all(np.isfinite(scores)):
        raise DataError("frame scores contain non-finite values")
    pos = gt.astype(bool)
    n_pos = int(pos.sum())
    if n_pos == 0:
        return None
    return _tie_grouped_ap(scores, pos, n_pos)


def proposals_from_curve(
    curve, threshold: float, min_len: int = MIN_PROPOSAL_LEN, class_index: int = 1, video_id: str = ""
) -> list[Segment]:
    """Maximal runs with score > threshold, at least min_len frames long;
    each proposal scores the mean of its run."""
    if not (0.0 < threshold < 1.0):
        raise ConfigError(f"threshold must be in (0,1), got {threshold}")
    curve = np.asarray(curve, dtype=np.float64)
    above = curve > threshold
    segments = []
    i = 0
    n = curve.shape[0]
    while i < n:
        if not above[i]:
            i += 1
            continue
        j = i
        while j < n and above[j]:
            j += 1
        if j - i >= min_len:
            segments.append(
                Segment(class_index, i, j, float(curve[i:j].mean()), video_id)
            )
        i = j
    return segments


def sweep_proposals(
    curve,
    class_index: int,
    video_id: str = "",
    thresholds=PROPOSAL_THRESHOLDS,
    min_len: int = MIN_PROPOSAL_LEN,
) -> list[Segment]:
    """Pooled multi-threshold proposals, deduplicated by (class, start, end)."""
    seen = {}
    for th in thresholds:
        for seg in proposals_from_curve(curve, th, min_len, class_index, video_id):
            seen.setdefault((seg.class_index, seg.start, seg.end), seg)
    return list(seen.values())


def segments_from_mask(mask, video_id: str = "") -> list[Segment]:
    """Ground-truth segments: maximal constant runs of a non-normal class."""
    mask = np.asarray(mask)
    segments = []
    i = 0
    n = mask.shape[0]
    while i < n:
        c = int(mask[i])
        j = i
        while j < n and int(mask[j]) == c:
            j += 1
        if c != 0:
            segments.append(Segment(c, i, j, 1.0, video_id))
        i = j
    return segments


def _match_class(preds: list[Segment], gts: list[Segment], iou_th: float) -> np.ndarray:
    """Greedy in score order; returns a TP flag per prediction (sorted order
    is preserved relative to the input, which must be pre-sorted)."""
    taken = [False] * len(gts)
    flags = np.zeros(len(preds), dtype=bool)
    for i, p in enumerate(preds):
        best = -1
        best_iou = 0.0
        for g_idx, g in enumerate(gts):
            if taken[g_idx] or g.video_id != p.video_id:
                continue
            ov = p.iou(g)
            if ov >= iou_th and ov > best_iou:
                best, best_iou = g_idx, ov
        if best >= 0:
            taken[best] = True
            flags[i] = True
    return flags


def map_at_iou(
    preds: list[Segment], gts: list[Segment], iou_th: float
) -> tuple[float | None, dict[int, float]]:
    """Detection mAP at one IoU threshold.

    Averages per-class AP over classes that have at least one ground-truth
    segment; returns (None, {}) when the ground truth is empty.
    """
    classes = sorted({g.class_index for g in gts})
    if not classes:
        return None, {}
    per_class = {}
    for c in classes:
        class_gts = [g for g in gts if g.class_index == c]
        class_preds = sorted(
            (p for p in preds if p.class_index == c), key=lambda p: -p.score
        )
        if not class_preds:
            per_class[c] = 0.0
            continue
        flags = _match_class(class_preds, class_gts, iou_th)
        scores = np.array([p.score for p in class_preds])
        per_class[c] = _tie_grouped_ap(scores, flags, len(class_gts))
    return float(np.mean(list(per_class.values()))), per_class


def detection_report(
    frame_scores: np.ndarray | None,
    frame_gt: np.ndarray | None,
    preds: list[Segment],
    gts: list[Segment],
    class_names: list[str] | None = None,
    notices: list[str] | None = None,
) -> EvalReport:
    """Assemble the full report; avg_map is the plain mean over thresholds."""
    fap = None
    counts = {"n_pred_segments": len(preds), "n_gt_segments": len(gts)}
    if frame_scores is not None and frame_gt is not None:
        fap = frame_ap(frame_scores, frame_gt)
        counts["n_frames"] = int(np.asarray(frame_gt).shape[0])
        counts["n_pos_frames"] = int(np.asarray(frame_gt).astype(bool).sum())
    map_per_iou: dict[float, float | None] = {}
    last_per_class: dict[int, float] = {}
    for th in IOU_THRESHOLDS:
        m, per_class = map_at_iou(preds, gts, th)
        map_per_iou[th] = m
        if th == IOU_THRESHOLDS[0]:
            last_per_class = per_class
    values = [v for v in map_per_iou.values() if v is not None]
    avg = float(np.mean(values)) if len(values) == len(IOU_THRESHOLDS) else None
    per_class_ap = {
        (class_names[c] if class_names and c < len(class_names) else str(c)): v
        for c, v in last_per_class.items()
    }
    return EvalReport(
        frame_ap=fap,
        map_per_iou=map_per_iou,
        avg_map=avg,
        per_class_ap=per_class_ap,
        counts=counts,
        notices=list(notices or []),
    )

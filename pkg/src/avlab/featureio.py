"""Feature files, manifests, frame masks, temporal resampling, synthetic data.

Binary containers:
  * AVFE feature file: magic ``AVFE``, format version (u32 LE), N (u32 LE),
    d (u32 LE), modality tag (u8), N*d float32 LE row-major, CRC32 of the
    raw payload bytes (u32 LE). Modality tags: 0 visual, 1 audio, 2 score
    dump, 3 class embeddings.
  * AVGT frame mask: magic ``AVGT``, frame count (u32 LE), one u8 class
    index per frame.

Manifests are JSON lines with fixed keys (video_id, visual_path,
audio_path, label, frame_gt_path); relative paths resolve against the
manifest's directory.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    TruncatedFileError,
    VersionError,
)

FEATURE_MAGIC = b"AVFE"
MASK_MAGIC = b"AVGT"
FORMAT_VERSION = 1

MODALITY_TAGS = {"visual": 0, "audio": 1, "scores": 2, "class_embeddings": 3}
_TAG_NAMES = {v: k for k, v in MODALITY_TAGS.items()}

_HEADER = struct.Struct("<4sIIIB")  # magic, version, N, d, modality tag


@dataclass
class FeatureSequence:
    """One video's features for one modality: an N x d float32 matrix."""

    video_id: str
    modality: str
    data: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITY_TAGS:
            raise DataError(f"unknown modality {self.modality!r}")
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError(f"feature matrix must be N x d with N,d >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError(f"non-finite entries in features of {self.video_id!r}")
        self.data = np.ascontiguousarray(arr)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def write_features(seq: FeatureSequence, path) -> None:
    payload = seq.data.astype("<f4", copy=False).tobytes()
    header = _HEADER.pack(
        FEATURE_MAGIC, FORMAT_VERSION, seq.n_frames, seq.dim, MODALITY_TAGS[seq.modality]
    )
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(header + payload + struct.pack("<I", crc))


def read_features(path) -> FeatureSequence:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: shorter than the fixed header")
    magic, version, n, d, tag = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if tag not in _TAG_NAMES:
        raise FormatError(f"{path}: unknown modality tag {tag}")
    expected = _HEADER.size + 4 * n * d + 4
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, layout requires {expected}")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes")
    payload = raw[_HEADER.size : _HEADER.size + 4 * n * d]
    (crc_stored,) = struct.unpack_from("<I", raw, _HEADER.size + 4 * n * d)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise ChecksumError(f"{path}: payload CRC mismatch")
    data = np.frombuffer(payload, dtype="<f4").reshape(n, d)
    name = Path(path).stem
    return FeatureSequence(video_id=name, modality=_TAG_NAMES[tag], data=data.copy())


def write_frame_mask(mask, path) -> None:
    """Per-frame class indices (u8), one per raw frame."""
    arr = np.asarray(mask)
    if arr.ndim != 1 or arr.size == 0:
        raise DataError(f"frame mask must be a non-empty vector, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 255:
        raise DataError("frame mask class indices must fit in u8")
    body = MASK_MAGIC + struct.pack("<I", arr.size) + arr.astype(np.uint8).tobytes()
    Path(path).write_bytes(body)


def read_frame_mask(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: shorter than the mask header")
    if raw[:4] != MASK_MAGIC:
        raise BadMagicError(f"{path}: magic {raw[:4]!r}, expected {MASK_MAGIC!r}")
    (count,) = struct.unpack_from("<I", raw, 4)
    if len(raw) < 8 + count:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, mask requires {8 + count}")
    if len(raw) > 8 + count:
        raise FormatError(f"{path}: {len(raw) - 8 - count} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).copy()


# ---------------------------------------------------------------------------
# manifests


@dataclass
class VideoRecord:
    """One manifest line.

    ``label`` is the video-level multi-hot vector over C classes with class 0
    reserved for normal; a video is anomalous exactly when label[0] == 0.
    ``frame_gt_path`` points at an AVGT mask over raw (pre-resample) frames
    and is present on the test split only.
    """

    video_id: str
    visual_path: str
    audio_path: str | None
    label: list[int]
    frame_gt_path: str | None = None

    def is_anomalous(self) -> bool:
        return self.label[0] == 0


_MANIFEST_KEYS = ("video_id", "visual_path", "audio_path", "label", "frame_gt_path")


def write_manifest(records: list[VideoRecord], path) -> None:
    lines = []
    for r in records:
        row = {
            "video_id": r.video_id,
            "visual_path": r.visual_path,
            "audio_path": r.audio_path,
            "label": list(map(int, r.label)),
            "frame_gt_path": r.frame_gt_path,
        }
        lines.append(json.dumps(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[VideoRecord]:
    base = Path(path).parent
    records = []
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e.strerror}") from e
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{lineno}: not valid JSON ({e.msg})") from e
        missing = [k for k in _MANIFEST_KEYS if k not in row]
        if missing:
            raise DataError(f"{path}:{lineno}: missing keys {missing}")
        label = row["label"]
        if not isinstance(label, list) or not label or any(v not in (0, 1) for v in label):
            raise DataError(f"{path}:{lineno}: label must be a 0/1 vector")

        def resolve(p):
            if p is None:
                return None
            q = Path(p)
            return str(q if q.is_absolute() else base / q)

        records.append(
            VideoRecord(
                video_id=str(row["video_id"]),
                visual_path=resolve(row["visual_path"]),
                audio_path=resolve(row["audio_path"]),
                label=[int(v) for v in label],
                frame_gt_path=resolve(row["frame_gt_path"]),
            )
        )
    return records


# ---------------------------------------------------------------------------
# temporal resampling


def resample_indices(n: int, stride: int, max_len: int) -> np.ndarray:
    """Raw-frame indices kept by resampling: every stride-th frame from 0,
    then uniform subsampling by i -> floor(i*L/max_len) if still too long."""
    if n < 1:
        raise ContractError("resample of an empty sequence")
    if stride < 1 or max_len < 1:
        raise ConfigError(f"stride and max_len must be >= 1, got {stride}, {max_len}")
    idx = np.arange(0, n, stride)
    length = idx.shape[0]
    if length > max_len:
        sub = (np.arange(max_len, dtype=np.int64) * length) // max_len
        idx = idx[sub]
    return idx


def resample(seq: FeatureSequence, stride: int, max_len: int) -> FeatureSequence:
    idx = resample_indices(seq.n_frames, stride, max_len)
    return FeatureSequence(seq.video_id, seq.modality, seq.data[idx])


def expand_scores(scores: np.ndarray, raw_n: int, stride: int, max_len: int) -> np.ndarray:
    """Inverse of resampling for per-frame curves: each raw frame takes the
    score of the closest kept frame at or before it (piecewise-constant hold).
    Works on 1-D vectors or N x k matrices along axis 0."""
    scores = np.asarray(scores)
    kept = resample_indices(raw_n, stride, max_len)
    if scores.shape[0] != kept.shape[0]:
        raise ContractError(
            f"{scores.shape[0]} scores but resampling keeps {kept.shape[0]} of {raw_n} frames"
        )
    pos = np.searchsorted(kept, np.arange(raw_n), side="right") - 1
    return scores[np.maximum(pos, 0)]


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    """Controls the planted-anomaly generator.

    ``anomaly_ratio`` is the anomalous-frame fraction inside anomalous
    videos (half of the videos are anomalous; a video whose target segment
    budget rounds below 2 frames becomes normal instead).
    ``audio_only_separable_fraction`` is the probability that an anomalous
    segment is separable through audio alone: its visual latent keeps only
    a faint trace of the anomaly (``faint_visual_cue`` times the usual
    strength), far below the noise floor a video-level learner can exploit.
    ``onset_ramp`` shapes segment intensity: the anomalous component of the
    latent grows linearly from this value at the first frame of a segment
    to 1.0 at its last, so early frames are weak and only the tail is
    blatant. 1.0 gives flat segments.
    """

    seed: int = 42
    n_train: int = 200
    n_test: int = 60
    d: int = 64
    classes: list[str] = field(
        default_factory=lambda: ["normal", "bang", "shatter", "siren", "crash"]
    )
    anomaly_ratio: float = 0.3
    audio_only_separable_fraction: float = 0.5
    noise_scale: float = 0.8
    onset_ramp: float = 0.35
    faint_visual_cue: float = 0.3
    min_len: int = 24
    max_len: int = 64

    def validate(self) -> None:
        if not (0.0 <= self.anomaly_ratio <= 1.0):
            raise ConfigError(f"anomaly_ratio must be in [0,1], got {self.anomaly_ratio}")
        if not (0.0 <= self.audio_only_separable_fraction <= 1.0):
            raise ConfigError("audio_only_separable_fraction must be in [0,1]")
        if self.min_len < 8 or self.max_len < self.min_len:
            raise ConfigError(f"need 8 <= min_len <= max_len, got {self.min_len}, {self.max_len}")
        if len(self.classes) < 2 or self.classes[0] != "normal":
            raise ConfigError("classes must start with 'normal' and include an anomaly class")
        if self.n_train < 1 or self.n_test < 1 or self.d < 2:
            raise ConfigError("n_train, n_test must be >= 1 and d >= 2")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")
        if not (0.0 < self.onset_ramp <= 1.0):
            raise ConfigError(f"onset_ramp must be in (0,1], got {self.onset_ramp}")
        if not (0.0 <= self.faint_visual_cue <= 1.0):
            raise ConfigError(f"faint_visual_cue must be in [0,1], got {self.faint_visual_cue}")


@dataclass
class _World:
    prototypes: np.ndarray  # C x q latent prototypes
    v_proj: np.ndarray  # q x d
    a_proj: np.ndarray  # q x d


def _make_world(cfg: SynthConfig, rng: np.random.Generator) -> _World:
    c = len(cfg.classes)
    q = max(4, cfg.d // 8)
    prototypes = rng.standard_normal((c, q)) * 3.0
    v_proj = rng.standard_normal((q, cfg.d)) / np.sqrt(q)
    a_proj = rng.standard_normal((q, cfg.d)) / np.sqrt(q)
    return _World(prototypes, v_proj, a_proj)


def _segment_layout(rng, length, n_frames_anom, n_seg):
    """Random non-touching placement of n_seg segments totalling
    n_frames_anom frames inside a video of the given length. Every segment
    gets at least 2 frames (the minimum proposal length downstream)."""
    extra = rng.multinomial(n_frames_anom - 2 * n_seg, np.full(n_seg, 1.0 / n_seg))
    seg_lens = 2 + extra
    free = length - n_frames_anom - (n_seg - 1)  # one forced normal gap between segments
    gaps = rng.multinomial(free, np.full(n_seg + 1, 1.0 / (n_seg + 1)))
    spans = []
    pos = 0
    for i, sl in enumerate(seg_lens):
        pos += gaps[i] + (1 if i > 0 else 0)
        spans.append((pos, pos + int(sl)))
        pos += int(sl)
    return spans


def _video_classes(rng, n_classes, n_seg):
    first = int(rng.integers(1, n_classes))
    chosen = [first]
    if n_classes > 2 and n_seg >= 2 and rng.random() < 0.2:
        second = int(rng.integers(1, n_classes - 1))
        if second >= first:
            second += 1
        chosen.append(second)
    assign = [chosen[i % len(chosen)] for i in range(n_seg)]
    rng.shuffle(assign)
    return chosen, assign


def _synth_video(cfg, world, rng, anomalous: bool):
    c = len(cfg.classes)
    q = world.prototypes.shape[1]
    length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    frame_cls = np.zeros(length, dtype=np.int64)
    audio_only = np.zeros(length, dtype=bool)
    label = [0] * c

    spans = []
    if anomalous:
        target = int(round(cfg.anomaly_ratio * length))
        if target >= 2:
            max_seg = min(3, target // 2, length // 3)
            n_seg = int(rng.integers(1, max(1, max_seg) + 1))
            target = min(target, length - n_seg + 1)  # leave room for forced gaps
            chosen, assign = _video_classes(rng, c, n_seg)
            spans = _segment_layout(rng, length, target, n_seg)
            for (s, e), cls in zip(spans, assign):
                frame_cls[s:e] = cls
                if rng.random() < cfg.audio_only_separable_fraction:
                    audio_only[s:e] = True
            for cls in set(assign):
                label[cls] = 1
        else:
            anomalous = False
    if not anomalous:
        label[0] = 1

    weight = np.ones(length)
    for s, e in spans:
        weight[s:e] = np.linspace(cfg.onset_ramp, 1.0, e - s)
    base = world.prototypes[0]
    latent = (
        base
        + weight[:, None] * (world.prototypes[frame_cls] - base)
        + 0.5 * rng.standard_normal((length, q))
    )
    latent_v = latent.copy()
    if audio_only.any():
        w_faint = cfg.faint_visual_cue * weight[audio_only, None]
        latent_v[audio_only] = (
            base
            + w_faint * (world.prototypes[frame_cls[audio_only]] - base)
            + 0.5 * rng.standard_normal((int(audio_only.sum()), q))
        )
    visual = latent_v @ world.v_proj + cfg.noise_scale * rng.standard_normal((length, cfg.d))
    audio = latent @ world.a_proj + cfg.noise_scale * rng.standard_normal((length, cfg.d))
    return (
        visual.astype(np.float32),
        audio.astype(np.float32),
        frame_cls.astype(np.uint8),
        label,
    )


def synth_generate(cfg: SynthConfig, out_dir) -> tuple[str, str]:
    """Write feature files, masks, and manifests; return the manifest paths.

    Deterministic for a fixed config: the RNG tree is derived solely from
    cfg.seed, with one independent stream per video.
    """
    cfg.validate()
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)

    root = np.random.SeedSequence(cfg.seed)
    ss_world, ss_train, ss_test = root.spawn(3)
    world = _make_world(cfg, np.random.default_rng(ss_world))

    manifest_paths = []
    for split, n_videos, ss in (("train", cfg.n_train, ss_train), ("test", cfg.n_test, ss_test)):
        records = []
        streams = ss.spawn(n_videos)
        for i in range(n_videos):
            rng = np.random.default_rng(streams[i])
            vid = f"{split}_{i:04d}"
            anomalous = i % 2 == 1  # half the split, interleaved
            visual, audio, frame_cls, label = _synth_video(cfg, world, rng, anomalous)
            vpath = f"features/{vid}_v.avfe"
            apath = f"features/{vid}_a.avfe"
            write_features(FeatureSequence(vid, "visual", visual), out / vpath)
            write_features(FeatureSequence(vid, "audio", audio), out / apath)
            gt_path = None
            if split == "test":
                gt_path = f"gt/{vid}.avgt"
                write_frame_mask(frame_cls, out / gt_path)
            records.append(VideoRecord(vid, vpath, apath, label, gt_path))
        mpath = out / f"{split}.jsonl"
        write_manifest(records, mpath)
        manifest_paths.append(str(mpath))
    return manifest_paths[0], manifest_paths[1]

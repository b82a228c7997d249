"""Turn real videos into the detector's feature files.

The detector trains on precomputed per-frame embeddings: one visual and one
audio AVFE file per video with equal sequence length N and d=512. This
adapter samples frames at a stride (16 for long-form material, 4 for
short-form), embeds them with a frozen image encoder, carves the audio track
into windows centered on each sampled frame's timestamp (width = effective
stride / fps seconds), embeds those with a frozen audio encoder, and writes
both sequences plus an optional manifest line.

A video without a usable audio track still produces an audio file, filled
with zero rows, so visual-only baselines keep an identical video set; the
degradation is logged as a warning rather than raised.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import EMBED_DIM, get_audio_encoder, get_image_encoder, get_text_encoder
from .errors import ExtractError
from .formats import append_manifest_line, write_features
from .media import band_energies, read_frames, read_wav, video_meta

log = logging.getLogger("avextract")

LONG_FORM_STRIDE = 16
SHORT_FORM_STRIDE = 4
N_BANDS = 128


@dataclass
class ExtractionJob:
    video_path: str
    visual_out: str
    audio_out: str
    audio_path: str | None = None  # sidecar WAV; None means no audio track
    stride: int = LONG_FORM_STRIDE
    target_len: int | None = None  # force exactly this N instead of striding
    image_encoder: str = "vit-b16-stub"
    audio_encoder: str = "wav2clip-stub"
    label: list[int] = field(default_factory=lambda: [1])  # video-level 0/1 vector

    def validate(self) -> None:
        if self.stride < 1:
            raise ExtractError(f"stride must be >= 1, got {self.stride}")
        if self.target_len is not None and self.target_len < 1:
            raise ExtractError(f"target_len must be >= 1, got {self.target_len}")
        if not self.label or any(v not in (0, 1) for v in self.label):
            raise ExtractError("label must be a non-empty 0/1 vector")


@dataclass
class ExtractResult:
    video_id: str
    n: int
    visual_path: str
    audio_path: str
    manifest_row: dict


def sample_indices(n_frames: int, stride: int, target_len: int | None = None) -> np.ndarray:
    if target_len is not None:
        return np.round(np.linspace(0, n_frames - 1, target_len)).astype(int)
    return np.arange(0, n_frames, stride)


def extract(job: ExtractionJob, manifest_path=None) -> ExtractResult:
    """Embed one video; write visual + audio AVFE files with equal N."""
    job.validate()
    image_enc = get_image_encoder(job.image_encoder)
    audio_enc = get_audio_encoder(job.audio_encoder)

    meta = video_meta(job.video_path)
    idx = sample_indices(meta.n_frames, job.stride, job.target_len)
    visual = image_enc(read_frames(job.video_path, idx))

    samples = None
    if job.audio_path is not None:
        samples, sr = read_wav(job.audio_path)
        if samples.size == 0 or float(np.max(np.abs(samples))) == 0.0:
            log.warning("%s: audio track is silent, emitting zero embeddings", job.video_path)
            samples = None
    else:
        log.warning("%s: no audio track, emitting zero embeddings", job.video_path)

    if samples is None:
        audio = np.zeros((len(idx), EMBED_DIM), dtype=np.float32)
    else:
        width_s = (meta.n_frames / len(idx)) / meta.fps
        bands = np.stack(
            [band_energies(samples, sr, i / meta.fps, width_s, N_BANDS) for i in idx]
        )
        audio = audio_enc(bands)

    if visual.shape != audio.shape:
        raise ExtractError(
            f"modality shape mismatch: visual {visual.shape} vs audio {audio.shape}"
        )
    write_features(job.visual_out, visual, "visual")
    write_features(job.audio_out, audio, "audio")

    video_id = Path(job.video_path).stem
    row = {
        "video_id": video_id,
        "visual_path": str(job.visual_out),
        "audio_path": str(job.audio_out),
        "label": list(job.label),
        "frame_gt_path": None,
    }
    if manifest_path is not None:
        append_manifest_line(manifest_path, row)
    return ExtractResult(
        video_id=video_id,
        n=int(visual.shape[0]),
        visual_path=str(job.visual_out),
        audio_path=str(job.audio_out),
        manifest_row=row,
    )


def embed_class_labels(
    class_names: list[str],
    template: str,
    out_path,
    encoder: str = "text-stub",
) -> np.ndarray:
    """Write the C x 512 class embedding file the detector loads as its
    frozen class base. ``template`` is applied per name, e.g.
    ``"a video of {}"``."""
    if not class_names:
        raise ExtractError("class_names is empty")
    enc = get_text_encoder(encoder)
    emb = enc([template.format(name) for name in class_names])
    write_features(out_path, emb, "class_embeddings")
    return emb

"""Video frames, WAV audio, and the per-frame spectrogram windows."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .errors import MediaError

_FFT_LEN = 2048  # windows are resampled to this length before the FFT


@dataclass
class VideoMeta:
    n_frames: int
    fps: float


def video_meta(path) -> VideoMeta:
    cap = cv2.VideoCapture(str(path))
    try:
        if not cap.isOpened():
            raise MediaError(f"cannot open video {path}")
        n = int(cap.get(cv2.CAP_PROP_FRAME_COUNT))
        fps = float(cap.get(cv2.CAP_PROP_FPS))
    finally:
        cap.release()
    if n <= 0:
        raise MediaError(f"{path}: no decodable frames")
    return VideoMeta(n_frames=n, fps=fps if fps > 0 else 25.0)


def read_frames(path, indices: np.ndarray) -> np.ndarray:
    """Decode sequentially, keeping the requested frame indices."""
    wanted = set(int(i) for i in indices)
    last = max(wanted)
    cap = cv2.VideoCapture(str(path))
    try:
        if not cap.isOpened():
            raise MediaError(f"cannot open video {path}")
        kept = {}
        for i in range(last + 1):
            ok, frame = cap.read()
            if not ok:
                raise MediaError(f"{path}: decode stopped at frame {i}, needed {last + 1}")
            if i in wanted:
                kept[i] = frame
    finally:
        cap.release()
    return np.stack([kept[int(i)] for i in indices])


def read_wav(path) -> tuple[np.ndarray, int]:
    """16/8/32-bit PCM WAV to float32 mono in [-1, 1]."""
    try:
        with wave.open(str(Path(path)), "rb") as w:
            sr = w.getframerate()
            n_ch = w.getnchannels()
            width = w.getsampwidth()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError, OSError) as e:
        raise MediaError(f"cannot read WAV {path}: {e}") from e
    if width == 2:
        samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    elif width == 4:
        samples = np.frombuffer(raw, dtype="<i4").astype(np.float32) / 2147483648.0
    elif width == 1:
        samples = (np.frombuffer(raw, dtype=np.uint8).astype(np.float32) - 128.0) / 128.0
    else:
        raise MediaError(f"{path}: unsupported sample width {width}")
    if n_ch > 1:
        samples = samples.reshape(-1, n_ch).mean(axis=1)
    return samples, sr


def band_energies(
    samples: np.ndarray, sr: int, center_s: float, width_s: float, n_bands: int
) -> np.ndarray:
    """Log magnitude spectrum of the window centered at ``center_s``,
    pooled into ``n_bands`` bands. Out-of-range parts are zero-padded;
    an all-zero window yields an all-zero vector."""
    half = width_s / 2.0
    lo = int(round((center_s - half) * sr))
    hi = max(lo + 2, int(round((center_s + half) * sr)))
    window = np.zeros(hi - lo, dtype=np.float32)
    src_lo, src_hi = max(lo, 0), min(hi, samples.size)
    if src_hi > src_lo:
        window[src_lo - lo : src_hi - lo] = samples[src_lo:src_hi]
    resampled = np.interp(
        np.linspace(0.0, window.size - 1, _FFT_LEN), np.arange(window.size), window
    )
    spec = np.abs(np.fft.rfft(resampled * np.hanning(_FFT_LEN)))
    usable = spec[1 : 1 + (_FFT_LEN // 2 // n_bands) * n_bands]
    pooled = usable.reshape(n_bands, -1).mean(axis=1)
    return np.log1p(pooled).astype(np.float32)

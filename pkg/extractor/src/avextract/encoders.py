"""Encoder registry.

Backends are looked up by identifier string so jobs stay declarative. The
built-in backends are deterministic seeded projections into the detector's
512-dim embedding space: they preserve the interface and the invariants
(fixed d, unit-norm rows, zeros map to zeros) without pretrained weights,
which keeps extraction runnable and byte-reproducible anywhere. A real
backend (CLIP image/text towers, an audio-to-CLIP-space model) drops in by
registering a callable under its identifier.
"""

from __future__ import annotations

import hashlib
import re
from functools import lru_cache

import cv2
import numpy as np

from .errors import EncoderUnavailable

EMBED_DIM = 512

_PATCH = 16  # stub image backend downsamples frames to PATCH x PATCH
_TOKEN_DIM = 256


def _rng_for(key: str) -> np.random.Generator:
    digest = hashlib.blake2b(key.encode(), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


@lru_cache(maxsize=None)
def _projection(key: str, d_in: int) -> np.ndarray:
    rng = _rng_for(key)
    return (rng.standard_normal((d_in, EMBED_DIM)) / np.sqrt(d_in)).astype(np.float32)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    live = norms[:, 0] > 0  # zero rows (silence) stay zero
    out = x.copy()
    out[live] /= norms[live]
    return out


class StubImageEncoder:
    def __init__(self, identifier: str):
        self.identifier = identifier

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        """frames: (N, H, W, 3) uint8 BGR -> (N, 512) float32, unit rows."""
        flat = np.empty((frames.shape[0], _PATCH * _PATCH), dtype=np.float32)
        for i, frame in enumerate(frames):
            gray = cv2.cvtColor(frame, cv2.COLOR_BGR2GRAY)
            small = cv2.resize(gray, (_PATCH, _PATCH), interpolation=cv2.INTER_AREA)
            flat[i] = small.reshape(-1).astype(np.float32) / 255.0 - 0.5
        return _unit_rows(flat @ _projection(self.identifier, _PATCH * _PATCH))


class StubAudioEncoder:
    def __init__(self, identifier: str):
        self.identifier = identifier

    def __call__(self, bands: np.ndarray) -> np.ndarray:
        """bands: (N, n_bands) float32 spectrogram energies -> (N, 512)."""
        bands = np.asarray(bands, dtype=np.float32)
        return _unit_rows(bands @ _projection(self.identifier, bands.shape[1]))


class StubTextEncoder:
    def __init__(self, identifier: str):
        self.identifier = identifier

    @lru_cache(maxsize=4096)
    def _token_vec(self, token: str) -> np.ndarray:
        rng = _rng_for(f"{self.identifier}/{token}")
        return rng.standard_normal(_TOKEN_DIM).astype(np.float32)

    def __call__(self, texts: list[str]) -> np.ndarray:
        rows = np.zeros((len(texts), _TOKEN_DIM), dtype=np.float32)
        for i, text in enumerate(texts):
            tokens = re.findall(r"[a-z0-9]+", text.lower())
            if not tokens:
                raise EncoderUnavailable(f"text {text!r} has no tokens to embed")
            rows[i] = np.mean([self._token_vec(t) for t in tokens], axis=0)
        return _unit_rows(rows @ _projection(self.identifier, _TOKEN_DIM))


IMAGE_BACKENDS = {"vit-b16-stub": StubImageEncoder}
AUDIO_BACKENDS = {"wav2clip-stub": StubAudioEncoder}
TEXT_BACKENDS = {"text-stub": StubTextEncoder}


def _lookup(registry: dict, identifier: str, kind: str):
    try:
        factory = registry[identifier]
    except KeyError:
        known = ", ".join(sorted(registry))
        raise EncoderUnavailable(
            f"no {kind} encoder registered as {identifier!r} (known: {known})"
        ) from None
    return factory(identifier)


def get_image_encoder(identifier: str):
    return _lookup(IMAGE_BACKENDS, identifier, "image")


def get_audio_encoder(identifier: str):
    return _lookup(AUDIO_BACKENDS, identifier, "audio")


def get_text_encoder(identifier: str):
    return _lookup(TEXT_BACKENDS, identifier, "text")

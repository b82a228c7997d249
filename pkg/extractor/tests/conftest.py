import wave

import cv2
import numpy as np
import pytest

FPS = 16.0
SR = 16000


def write_video(path, n_frames, size=32, seed=0):
    rng = np.random.default_rng(seed)
    vw = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"MJPG"), FPS, (size, size))
    assert vw.isOpened(), "cv2 could not open a VideoWriter"
    base = rng.integers(60, 196, (size, size, 3), dtype=np.uint8)
    for i in range(n_frames):
        frame = base.copy()
        # moving bright block so frames actually differ
        x = (i * 3) % (size - 8)
        frame[x : x + 8, x : x + 8] = 255
        vw.write(frame)
    vw.release()


def write_wav(path, seconds, silent=False, seed=0):
    n = int(seconds * SR)
    if silent:
        x = np.zeros(n)
    else:
        rng = np.random.default_rng(seed)
        t = np.arange(n) / SR
        x = 0.3 * np.sin(2 * np.pi * 440 * t) + 0.1 * rng.standard_normal(n)
        x[: n // 4] *= 0.05  # quiet start, louder tail
    pcm = np.clip(x * 32767, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SR)
        w.writeframes(pcm.tobytes())


@pytest.fixture(scope="session")
def studio(tmp_path_factory):
    """Three decodable videos: 160 frames + audio, 80 + audio, 64 without."""
    root = tmp_path_factory.mktemp("media")
    write_video(root / "long.avi", 160, seed=1)
    write_wav(root / "long.wav", 10.0, seed=1)
    write_video(root / "mid.avi", 80, seed=2)
    write_wav(root / "mid.wav", 5.0, seed=2)
    write_video(root / "short.avi", 64, seed=3)
    write_wav(root / "silent.wav", 4.0, silent=True)
    return root

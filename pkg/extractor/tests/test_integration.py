"""End to end: extracted features must be trainable by the detector."""

import numpy as np
import pytest

from avextract import ExtractionJob, embed_class_labels, extract

from avlab.model import ModelConfig, load_checkpoint
from avlab.trainer import TrainConfig, evaluate, train

CLASSES = ["normal", "fighting"]


@pytest.fixture(scope="module")
def extracted(studio, tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifest = root / "train.jsonl"
    jobs = [
        ("long", studio / "long.wav", [0, 1]),
        ("mid", studio / "mid.wav", [1, 0]),
        ("short", None, [1, 0]),
    ]
    for name, wav, label in jobs:
        job = ExtractionJob(
            video_path=str(studio / f"{name}.avi"),
            audio_path=None if wav is None else str(wav),
            visual_out=str(root / f"{name}_v.avfe"),
            audio_out=str(root / f"{name}_a.avfe"),
            label=label,
        )
        extract(job, manifest_path=manifest)
    base = embed_class_labels(CLASSES, "a video of {}", root / "classes.avfe")
    return manifest, base


def test_detector_trains_on_extracted_features(extracted, tmp_path):
    manifest, base = extracted
    mcfg = ModelConfig(d=512, classes=CLASSES)
    cfg = TrainConfig(seed=0, mode="teacher_av", batch_size=2, learning_rate=1e-4, epochs=2)
    ck, report = train(mcfg, cfg, manifest, tmp_path / "run", class_base=base)
    assert len(report.epoch_losses) == 2
    assert all(np.isfinite(e["total"]) for e in report.epoch_losses)

    params = load_checkpoint(ck)
    # the frozen text embeddings must survive the checkpoint round trip
    assert params.tensors["class_base"].tobytes() == base.astype(np.float32).tobytes()


def test_evaluate_reports_unannotated_corpus(extracted, tmp_path):
    manifest, base = extracted
    mcfg = ModelConfig(d=512, classes=CLASSES)
    cfg = TrainConfig(seed=1, mode="teacher_av", batch_size=2, learning_rate=1e-4, epochs=1)
    ck, _ = train(mcfg, cfg, manifest, tmp_path / "run", class_base=base)
    rep = evaluate(load_checkpoint(ck), manifest)
    # no frame masks in the wild corpus: metrics absent, not fabricated
    assert rep.frame_ap is None
    assert any("no annotated videos" in n for n in rep.notices)

"""File formats, resampling, and the planted-anomaly generator."""

import numpy as np
import pytest

from avlab.errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    TruncatedFileError,
    VersionError,
)
from avlab.featureio import (
    FeatureSequence,
    SynthConfig,
    VideoRecord,
    expand_scores,
    read_features,
    read_frame_mask,
    read_manifest,
    resample,
    resample_indices,
    synth_generate,
    write_features,
    write_frame_mask,
    write_manifest,
)


# ---------------------------------------------------------------------------
# AVFE container


def test_feature_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.standard_normal((16, 512)).astype(np.float32)
    p = tmp_path / "x.avfe"
    write_features(FeatureSequence("x", "visual", data), p)
    back = read_features(p)
    assert back.modality == "visual"
    assert back.data.dtype == np.float32
    assert np.array_equal(back.data, data)  # bitwise, not approx


def test_one_by_one_file_length(tmp_path):
    # layout arithmetic: magic 4 + version 4 + N 4 + d 4 + tag 1 = 17 header
    # bytes, one float32 payload, one u32 CRC
    p = tmp_path / "tiny.avfe"
    write_features(FeatureSequence("tiny", "audio", np.zeros((1, 1), np.float32)), p)
    assert p.stat().st_size == (4 + 4 + 4 + 4 + 1) + 4 + 4 == 25


@pytest.mark.parametrize("modality", ["visual", "audio", "scores", "class_embeddings"])
def test_all_modality_tags_roundtrip(tmp_path, modality):
    data = np.arange(12, dtype=np.float32).reshape(3, 4)
    p = tmp_path / f"{modality}.avfe"
    write_features(FeatureSequence("v", modality, data), p)
    assert read_features(p).modality == modality


def test_corrupted_crc_rejected(tmp_path):
    p = tmp_path / "x.avfe"
    write_features(FeatureSequence("x", "visual", np.ones((2, 3), np.float32)), p)
    raw = bytearray(p.read_bytes())
    raw[20] ^= 0xFF  # flip a payload byte, CRC no longer matches
    p.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        read_features(p)


def test_truncated_file_rejected(tmp_path):
    p = tmp_path / "x.avfe"
    write_features(FeatureSequence("x", "visual", np.ones((4, 4), np.float32)), p)
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) - 9])
    with pytest.raises(TruncatedFileError):
        read_features(p)
    p.write_bytes(raw[:10])  # shorter than even the header
    with pytest.raises(TruncatedFileError):
        read_features(p)


def test_bad_magic_and_version_rejected(tmp_path):
    p = tmp_path / "x.avfe"
    write_features(FeatureSequence("x", "visual", np.ones((1, 2), np.float32)), p)
    raw = bytearray(p.read_bytes())
    wrong_magic = bytes(raw)
    p.write_bytes(b"NOPE" + wrong_magic[4:])
    with pytest.raises(BadMagicError):
        read_features(p)
    bumped = bytearray(wrong_magic)
    bumped[4] = 99  # version field
    p.write_bytes(bytes(bumped))
    with pytest.raises(VersionError):
        read_features(p)


def test_trailing_bytes_rejected(tmp_path):
    p = tmp_path / "x.avfe"
    write_features(FeatureSequence("x", "visual", np.ones((1, 2), np.float32)), p)
    p.write_bytes(p.read_bytes() + b"\x00")
    with pytest.raises(FormatError):
        read_features(p)


def test_nonfinite_features_refused():
    bad = np.ones((2, 2), np.float32)
    bad[0, 0] = np.nan
    with pytest.raises(DataError):
        FeatureSequence("x", "visual", bad)


def test_frame_mask_roundtrip(tmp_path):
    mask = np.array([0, 0, 2, 2, 2, 0, 1], dtype=np.uint8)
    p = tmp_path / "m.avgt"
    write_frame_mask(mask, p)
    assert np.array_equal(read_frame_mask(p), mask)
    raw = p.read_bytes()
    p.write_bytes(raw[:9])
    with pytest.raises(TruncatedFileError):
        read_frame_mask(p)
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        read_frame_mask(p)


# ---------------------------------------------------------------------------
# manifests


def test_manifest_roundtrip_and_relative_paths(tmp_path):
    recs = [
        VideoRecord("a", "features/a_v.avfe", "features/a_a.avfe", [0, 1, 0], "gt/a.avgt"),
        VideoRecord("b", "features/b_v.avfe", None, [1, 0, 0], None),
    ]
    p = tmp_path / "m.jsonl"
    write_manifest(recs, p)
    back = read_manifest(p)
    assert [r.video_id for r in back] == ["a", "b"]
    assert back[0].visual_path == str(tmp_path / "features/a_v.avfe")
    assert back[0].is_anomalous() and not back[1].is_anomalous()
    assert back[1].audio_path is None and back[1].frame_gt_path is None


def test_manifest_rejects_malformed_lines(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"video_id": "a"}\n')
    with pytest.raises(DataError):
        read_manifest(p)
    p.write_text("not json\n")
    with pytest.raises(DataError):
        read_manifest(p)
    p.write_text(
        '{"video_id":"a","visual_path":"v","audio_path":null,"label":[2,0],"frame_gt_path":null}\n'
    )
    with pytest.raises(DataError):
        read_manifest(p)


# ---------------------------------------------------------------------------
# resampling


def test_resample_every_16th_of_64():
    assert resample_indices(64, 16, 256).tolist() == [0, 16, 32, 48]


def test_resample_identity():
    idx = resample_indices(10, 1, 10)
    assert idx.tolist() == list(range(10))
    seq = FeatureSequence("v", "visual", np.arange(40, dtype=np.float32).reshape(10, 4))
    out = resample(seq, 1, 10)
    assert np.array_equal(out.data, seq.data)


def test_resample_5000_to_256_by_index_formula():
    # independent enumeration of the stated rule: stride first, then
    # i -> floor(i*L/max_len) over the strided list
    strided = list(range(0, 5000, 16))
    length = len(strided)
    expected = [strided[(i * length) // 256] for i in range(256)]
    got = resample_indices(5000, 16, 256)
    assert got.shape[0] == 256
    assert got.tolist() == expected


def test_resample_contract_errors():
    with pytest.raises(ContractError):
        resample_indices(0, 1, 10)
    with pytest.raises(ConfigError):
        resample_indices(10, 0, 10)


def test_expand_scores_piecewise_hold():
    # 8 raw frames, stride 3 keeps [0, 3, 6]; each raw frame takes the score
    # of the latest kept frame at or before it
    out = expand_scores(np.array([1.0, 2.0, 3.0]), raw_n=8, stride=3, max_len=10)
    assert out.tolist() == [1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 3.0, 3.0]
    mat = np.array([[1.0, 9.0], [2.0, 8.0], [3.0, 7.0]])
    out2 = expand_scores(mat, raw_n=8, stride=3, max_len=10)
    assert out2.shape == (8, 2)
    assert out2[:, 0].tolist() == [1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 3.0, 3.0]
    with pytest.raises(ContractError):
        expand_scores(np.ones(4), raw_n=8, stride=3, max_len=10)


# ---------------------------------------------------------------------------
# synthetic generator


def small_cfg(**kw):
    base = dict(seed=7, n_train=12, n_test=10, d=32, min_len=16, max_len=32)
    base.update(kw)
    return SynthConfig(**base)


def test_synth_zero_ratio_all_normal(tmp_path):
    train, test = synth_generate(small_cfg(anomaly_ratio=0.0), tmp_path)
    for path in (train, test):
        for rec in read_manifest(path):
            assert rec.label[0] == 1 and sum(rec.label) == 1
            if rec.frame_gt_path:
                assert read_frame_mask(rec.frame_gt_path).max() == 0


def test_synth_same_seed_byte_identical(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    synth_generate(small_cfg(), a)
    synth_generate(small_cfg(), b)
    rel = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert rel == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for r in rel:
        assert (a / r).read_bytes() == (b / r).read_bytes(), r


def test_synth_mask_matches_labels(tmp_path):
    _, test = synth_generate(small_cfg(), tmp_path)
    saw_anomalous = 0
    for rec in read_manifest(test):
        mask = read_frame_mask(rec.frame_gt_path)
        classes_in_mask = set(int(c) for c in np.unique(mask)) - {0}
        labeled = {i for i, v in enumerate(rec.label) if v and i > 0}
        assert classes_in_mask == labeled
        if rec.is_anomalous():
            saw_anomalous += 1
            assert len(classes_in_mask) >= 1
            # segments are at least 2 frames and separated by normal frames
            changes = np.flatnonzero(np.diff((mask > 0).astype(int)))
            spans = np.split(np.flatnonzero(mask > 0), np.flatnonzero(np.diff(np.flatnonzero(mask > 0)) > 1) + 1)
            assert all(len(s) >= 2 for s in spans)
    assert saw_anomalous == 5  # half of n_test, interleaved


def test_synth_anomaly_fraction_tracks_ratio(tmp_path):
    # pooled over 5 seeds, anomalous-video frame fraction within 10% relative
    ratio = 0.3
    anom = total = 0
    for seed in range(5):
        out = tmp_path / f"s{seed}"
        _, test = synth_generate(small_cfg(seed=seed, anomaly_ratio=ratio, n_test=16), out)
        for rec in read_manifest(test):
            if not rec.is_anomalous():
                continue
            mask = read_frame_mask(rec.frame_gt_path)
            anom += int((mask > 0).sum())
            total += mask.size
    measured = anom / total
    assert abs(measured - ratio) / ratio < 0.10, measured


def test_synth_feature_files_validate(tmp_path):
    train, _ = synth_generate(small_cfg(), tmp_path)
    recs = read_manifest(train)
    v = read_features(recs[0].visual_path)
    a = read_features(recs[0].audio_path)
    assert v.modality == "visual" and a.modality == "audio"
    assert v.n_frames == a.n_frames
    assert v.dim == a.dim == 32


# ---------------------------------------------------------------------------
# oracle probe: audio must add information beyond visual


def probe_ap(y, s):
    # all-points average precision: mean of precision at each positive, with
    # tied scores treated as one group (average precision over the group)
    order = np.argsort(-s, kind="stable")
    y = np.asarray(y, dtype=float)[order]
    s = np.asarray(s)[order]
    tp = fp = 0
    ap = 0.0
    i = 0
    n = len(y)
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        g_tp = y[i:j].sum()
        g_fp = (j - i) - g_tp
        # within a tie group precision is evaluated once at the group end
        tp += g_tp
        fp += g_fp
        ap += g_tp * (tp / (tp + fp))
        i = j
    return ap / y.sum()


def ridge_scores(train_x, train_y, test_x, lam=1.0):
    d = train_x.shape[1]
    w = np.linalg.solve(train_x.T @ train_x + lam * np.eye(d), train_x.T @ train_y)
    return test_x @ w


def test_audio_adds_signal_beyond_visual(tmp_path):
    _, test = synth_generate(SynthConfig(), tmp_path)
    recs = read_manifest(test)
    feats_v, feats_a, ys = [], [], []
    for rec in recs:
        feats_v.append(read_features(rec.visual_path).data)
        feats_a.append(read_features(rec.audio_path).data)
        ys.append((read_frame_mask(rec.frame_gt_path) > 0).astype(float))
    fit = slice(0, len(recs) // 2)
    held = slice(len(recs) // 2, len(recs))

    def stackup(parts, sl):
        return np.concatenate(parts[sl], axis=0)

    yv_fit, yv_held = np.concatenate(ys[fit]), np.concatenate(ys[held])
    xv_fit, xv_held = stackup(feats_v, fit), stackup(feats_v, held)
    xa_fit, xa_held = stackup(feats_a, fit), stackup(feats_a, held)
    xc_fit = np.concatenate([xv_fit, xa_fit], axis=1)
    xc_held = np.concatenate([xv_held, xa_held], axis=1)

    ap_visual = probe_ap(yv_held, ridge_scores(xv_fit, yv_fit, xv_held))
    ap_concat = probe_ap(yv_held, ridge_scores(xc_fit, yv_fit, xc_held))
    assert ap_concat > ap_visual, (ap_visual, ap_concat)

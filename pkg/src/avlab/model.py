"""Detector graph: temporal encoders, gated fusion, dual-branch heads.

The teacher consumes visual+audio features and produces frame confidences A,
an alignment map M against class embeddings, and fused features X_av. The
student consumes one modality, adds an enhancement conv and a per-frame
log-variance head, and is otherwise the same dual-branch detector.

Parameters live in a flat name -> float32 array mapping so checkpoints,
optimizer state, and gradient plumbing all address tensors the same way.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    ContractError,
    DimensionError,
    TruncatedFileError,
    VersionError,
)

CHECKPOINT_MAGIC = b"AVCK"
CHECKPOINT_VERSION = 1

FUSION_MODES = ("adaptive", "off", "add", "concat_linear")

# parameter-name prefixes that receive gradients, per training mode
TRAINABLE_GROUPS = {
    "teacher_av": (
        "temporal_visual",
        "temporal_audio",
        "fusion_gate",
        "fusion_res",
        "classifier",
        "class_context",
        "prompt_ffn",
    ),
    "student_visual": (
        "temporal_visual",
        "enhance",
        "uncert",
        "classifier",
        "class_context",
        "prompt_ffn",
    ),
}
TRAINABLE_GROUPS["student_audio"] = TRAINABLE_GROUPS["student_visual"]
TRAINABLE_GROUPS["distill_ukd"] = TRAINABLE_GROUPS["student_visual"]

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


@dataclass
class ModelConfig:
    """Structural hyperparameters. Hidden widths default relative to d."""

    d: int = 64
    classes: list[str] = field(
        default_factory=lambda: ["normal", "bang", "shatter", "siren", "crash"]
    )
    h_res: int | None = None  # fusion residual hidden
    h_cls: int | None = None  # classifier hidden
    h_ffn: int | None = None  # prompt FFN hidden
    h_unc: int | None = None  # uncertainty net hidden
    window: int = 9  # temporal attention window (odd)
    fusion: str = "adaptive"

    def __post_init__(self):
        if self.d < 4:
            raise ConfigError(f"d must be >= 4, got {self.d}")
        if self.h_res is None:
            self.h_res = max(1, self.d // 2)
        if self.h_cls is None:
            self.h_cls = max(1, self.d // 4)
        if self.h_ffn is None:
            self.h_ffn = max(1, self.d // 2)
        if self.h_unc is None:
            self.h_unc = max(1, self.d // 4)
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"window must be odd and >= 1, got {self.window}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if len(self.classes) < 2 or self.classes[0] != "normal":
            raise ConfigError("classes must start with 'normal' plus at least one anomaly class")
        if len(self.classes) > self.d:
            raise ConfigError("need C <= d for the orthogonal class-base construction")

    @property
    def n_classes(self) -> int:
        return len(self.classes)


@dataclass
class DetectionOutput:
    """Per-video detector outputs (plain arrays, forward values only)."""

    A: np.ndarray  # (N,) anomaly confidence in [0,1]
    M: np.ndarray  # (N, C) cosine alignment map in [-1, 1]
    X_av: np.ndarray  # (N, d) fused (teacher) or enhanced (student) features
    X_cp: np.ndarray  # (C, d) instance-conditioned class embeddings
    log_var: np.ndarray | None = None  # (N,) student only


class ModelParams:
    """Flat named-parameter store plus the structural config."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = {k: np.asarray(v, dtype=np.float32) for k, v in tensors.items()}
        self.frozen = {"class_base"}
        self.meta: dict = {}  # free-form provenance (training mode, seed)

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def trainable_names(self, mode: str) -> list[str]:
        if mode not in TRAINABLE_GROUPS:
            raise ConfigError(f"unknown training mode {mode!r}")
        prefixes = TRAINABLE_GROUPS[mode]
        return [
            n
            for n in self.names()
            if n not in self.frozen and any(n.split(".")[0] == p for p in prefixes)
        ]

    def n_trainable(self, mode: str) -> int:
        return int(sum(self.tensors[n].size for n in self.trainable_names(mode)))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def finite_or_raise(self) -> None:
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise ContractError(f"parameter {name} has non-finite entries")


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Initialize parameters.

    Residual-path output maps start at zero so the untrained network is the
    identity pathway (fusion residual, temporal value map, prompt FFN output,
    enhancement kernel, log-variance output). All biases start at zero.
    """
    d, c = config.d, config.n_classes
    h_res, h_cls, h_ffn, h_unc = config.h_res, config.h_cls, config.h_ffn, config.h_unc

    def w(shape, fan_in):
        return (rng.standard_normal(shape) / math.sqrt(fan_in)).astype(np.float32)

    def zeros(shape):
        return np.zeros(shape, dtype=np.float32)

    # random orthonormal rows: QR of a d x d draw, first C rows
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    class_base = q[:c].astype(np.float32)

    tensors = {
        "temporal_visual.wqk": w((d, d), d),
        "temporal_visual.wv": zeros((d, d)),
        "temporal_audio.kernel": zeros((3, d, d)),
        "temporal_audio.bias": zeros(d),
        "fusion_gate.w": w((2 * d, d), 2 * d),
        "fusion_gate.b": zeros(d),
        "fusion_res.w1": w((2 * d, h_res), 2 * d),
        "fusion_res.b1": zeros(h_res),
        "fusion_res.w2": zeros((h_res, d)),
        "fusion_res.b2": zeros(d),
        "classifier.w1": w((d, h_cls), d),
        "classifier.b1": zeros(h_cls),
        "classifier.w2": w((h_cls, 1), h_cls),
        "classifier.b2": zeros(1),
        "class_base": class_base,
        "class_context": zeros((c, d)),
        "prompt_ffn.w1": w((d, h_ffn), d),
        "prompt_ffn.b1": zeros(h_ffn),
        "prompt_ffn.w2": zeros((h_ffn, d)),
        "prompt_ffn.b2": zeros(d),
        "enhance.kernel": zeros((3, d, d)),
        "enhance.bias": zeros(d),
        "uncert.k1": w((3, d, h_unc), 3 * d),
        "uncert.b1": zeros(h_unc),
        "uncert.k2": w((3, h_unc, h_unc), 3 * h_unc),
        "uncert.b2": zeros(h_unc),
        "uncert.k3": zeros((3, h_unc, 1)),
        "uncert.b3": zeros(1),
    }
    return ModelParams(config, tensors)


def load_class_base(params: ModelParams, embeddings: np.ndarray) -> None:
    """Replace the frozen class embeddings (e.g. from a text encoder dump)."""
    want = (params.config.n_classes, params.config.d)
    if embeddings.shape != want:
        raise DimensionError(f"class embeddings {embeddings.shape}, model expects {want}")
    params.tensors["class_base"] = np.asarray(embeddings, dtype=np.float32).copy()


# ---------------------------------------------------------------------------
# forward graph pieces. Each takes the tape, a name->DiffNode dict, and input
# nodes; all return nodes on the same tape.


def bind_params(tape: dc.Tape, params: ModelParams) -> dict[str, dc.DiffNode]:
    return {name: tape.leaf(t) for name, t in params.tensors.items()}


def _linear(x, w, b):
    return dc.add_rowvec(dc.matmul(x, w), b)


def _window_mask(n: int, window: int, dtype) -> np.ndarray:
    half = window // 2
    idx = np.arange(n)
    banned = np.abs(idx[:, None] - idx[None, :]) > half
    return np.where(banned, -1e9, 0.0).astype(dtype)


def temporal_encode_visual(tape, nodes, config, x):
    """Residual single-head attention restricted to a local window.

    Query and key share one projection; the value map starts at zero so the
    block is the identity at initialization.
    """
    n = x.values.shape[0]
    qk = dc.matmul(x, nodes["temporal_visual.wqk"])
    logits = dc.div(dc.matmul(qk, dc.transpose(qk)), math.sqrt(config.d))
    mask = tape.leaf(_window_mask(n, config.window, np.float64))
    attn = dc.softmax(dc.add(logits, mask), axis=1)
    mixed = dc.matmul(attn, dc.matmul(x, nodes["temporal_visual.wv"]))
    return dc.add(x, mixed)


def temporal_encode_audio(tape, nodes, config, x):
    """Residual temporal convolution, kernel width 3."""
    conv = dc.add_rowvec(
        dc.conv1d(x, nodes["temporal_audio.kernel"], pad=1), nodes["temporal_audio.bias"]
    )
    return dc.add(x, conv)


def adaptive_fuse(tape, nodes, config, x_v, x_a):
    """Gated residual fusion: X_av = X_v + W * res(concat(X_a, X_v))."""
    if x_v.values.shape != x_a.values.shape:
        raise DimensionError(f"fuse shape mismatch: {x_v.values.shape} vs {x_a.values.shape}")
    cat = dc.concat_cols(x_a, x_v)
    gate = dc.sigmoid(_linear(cat, nodes["fusion_gate.w"], nodes["fusion_gate.b"]))
    hidden = dc.gelu(_linear(cat, nodes["fusion_res.w1"], nodes["fusion_res.b1"]))
    res = _linear(hidden, nodes["fusion_res.w2"], nodes["fusion_res.b2"])
    fused = dc.add(x_v, dc.mul(gate, res))
    return fused, gate


def classify(tape, nodes, config, x):
    """Frame confidence A in (0,1), returned as an N x 1 column."""
    hidden = dc.relu(_linear(x, nodes["classifier.w1"], nodes["classifier.b1"]))
    return dc.sigmoid(_linear(hidden, nodes["classifier.w2"], nodes["classifier.b2"]))


def global_rep(tape, a_col, x):
    """Confidence-weighted video representation, scale-invariant in A."""
    num = dc.matmul(dc.transpose(a_col), x)  # 1 x d
    denom = dc.add(dc.reshape(dc.sum_all(a_col), ()), 1e-8)
    pooled = dc.div(num, denom)
    norm = dc.add(dc.sqrt(dc.sum_axis(dc.square(pooled), axis=1)), 1e-8)
    return dc.div_colvec(pooled, norm)  # 1 x d, unit length


def class_embeddings(tape, nodes):
    return dc.add(nodes["class_base"], nodes["class_context"])


def av_prompt(tape, nodes, config, x_c, x_p, x_av):
    """Instance-conditioned class embeddings.

    Per-class weights come from softmaxed scaled dot products between class
    embeddings and the global representation; each class receives its scaled
    copy of the global representation, added to the class embedding and
    refined by an FFN with an outer skip.
    """
    logits = dc.div(dc.matmul(x_c, dc.transpose(x_p)), math.sqrt(config.d))  # C x 1
    s_p = dc.softmax(logits, axis=0)
    x_mp = dc.matmul(s_p, x_p)  # C x d, row c = s_p[c] * x_p
    pre = dc.add(x_mp, x_c)
    hidden = dc.gelu(_linear(pre, nodes["prompt_ffn.w1"], nodes["prompt_ffn.b1"]))
    ffn = _linear(hidden, nodes["prompt_ffn.w2"], nodes["prompt_ffn.b2"])
    return dc.add(ffn, x_c), s_p


def _unit_rows(x):
    norm = dc.add(dc.sqrt(dc.sum_axis(dc.square(x), axis=1)), 1e-8)
    return dc.div_colvec(x, norm)


def align_map(tape, x, x_cp):
    """Row-wise cosine similarities, N x C in [-1, 1]."""
    return dc.matmul(_unit_rows(x), dc.transpose(_unit_rows(x_cp)))


def enhance_visual(tape, nodes, x):
    """Student feature enhancement: X + ReLU(conv(X)), identity at init."""
    conv = dc.add_rowvec(dc.conv1d(x, nodes["enhance.kernel"], pad=1), nodes["enhance.bias"])
    return dc.add(x, dc.relu(conv))


def predict_uncertainty(tape, nodes, x):
    """Per-frame log-variance through three temporal convolutions,
    clamped to keep exp(log_var) finite. Returns an N x 1 column."""
    h = dc.relu(dc.add_rowvec(dc.conv1d(x, nodes["uncert.k1"], pad=1), nodes["uncert.b1"]))
    h = dc.relu(dc.add_rowvec(dc.conv1d(h, nodes["uncert.k2"], pad=1), nodes["uncert.b2"]))
    raw = dc.add_rowvec(dc.conv1d(h, nodes["uncert.k3"], pad=1), nodes["uncert.b3"])
    return dc.clip(raw, LOG_VAR_MIN, LOG_VAR_MAX)


def teacher_forward(tape, nodes, config: ModelConfig, x_v_raw, x_a_raw) -> dict:
    """Full audio-visual pathway. Returns nodes keyed A (N x 1), M, X_av,
    X_cp, S_p, and W (None unless fusion is adaptive)."""
    x_v = temporal_encode_visual(tape, nodes, config, x_v_raw)
    gate = None
    if config.fusion == "off":
        x_av = x_v
    else:
        x_a = temporal_encode_audio(tape, nodes, config, x_a_raw)
        if config.fusion == "adaptive":
            x_av, gate = adaptive_fuse(tape, nodes, config, x_v, x_a)
        elif config.fusion == "add":
            x_av = dc.add(x_v, x_a)
        else:  # concat_linear
            cat = dc.concat_cols(x_a, x_v)
            x_av = _linear(cat, nodes["fusion_gate.w"], nodes["fusion_gate.b"])
    return _detector_heads(tape, nodes, config, x_av, gate)


def student_forward(tape, nodes, config: ModelConfig, x_raw) -> dict:
    """Single-modality pathway with enhancement and uncertainty heads."""
    x_enc = temporal_encode_visual(tape, nodes, config, x_raw)
    x_vs = enhance_visual(tape, nodes, x_enc)
    out = _detector_heads(tape, nodes, config, x_vs, None)
    out["log_var"] = predict_uncertainty(tape, nodes, x_enc)
    return out


def _detector_heads(tape, nodes, config, x_av, gate):
    a_col = classify(tape, nodes, config, x_av)
    x_p = global_rep(tape, a_col, x_av)
    x_c = class_embeddings(tape, nodes)
    x_cp, s_p = av_prompt(tape, nodes, config, x_c, x_p, x_av)
    m = align_map(tape, x_av, x_cp)
    return {"A": a_col, "M": m, "X_av": x_av, "X_cp": x_cp, "S_p": s_p, "W": gate}


def detect(params: ModelParams, x_v: np.ndarray, x_a: np.ndarray | None, student: bool) -> DetectionOutput:
    """Forward-only convenience wrapper returning plain arrays."""
    tape = dc.Tape(np.float32)
    nodes = bind_params(tape, params)
    if student:
        out = student_forward(tape, nodes, params.config, tape.leaf(x_v))
    else:
        if x_a is None:
            raise ContractError("teacher detection requires audio features")
        out = teacher_forward(tape, nodes, params.config, tape.leaf(x_v), tape.leaf(x_a))
    log_var = out.get("log_var")
    return DetectionOutput(
        A=out["A"].values.reshape(-1).copy(),
        M=out["M"].values.copy(),
        X_av=out["X_av"].values.copy(),
        X_cp=out["X_cp"].values.copy(),
        log_var=None if log_var is None else log_var.values.reshape(-1).copy(),
    )


# ---------------------------------------------------------------------------
# checkpoints: magic, version, JSON manifest (names, shapes, offsets), then
# one float32-LE blob, then a CRC32 of the blob.


def save_checkpoint(params: ModelParams, path) -> None:
    names = params.names()
    entries = []
    offset = 0
    blobs = []
    for name in names:
        t = params.tensors[name].astype("<f4", copy=False)
        raw = t.tobytes()
        entries.append(
            {"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "frozen": sorted(params.frozen),
        "meta": params.meta,
        "entries": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(blobs)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    out = (
        CHECKPOINT_MAGIC
        + struct.pack("<II", CHECKPOINT_VERSION, len(hbytes))
        + hbytes
        + payload
        + struct.pack("<I", crc)
    )
    Path(path).write_bytes(out)


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise TruncatedFileError(f"{path}: shorter than the checkpoint header")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if len(raw) < 12 + hlen:
        raise TruncatedFileError(f"{path}: manifest extends past end of file")
    header = json.loads(raw[12 : 12 + hlen].decode())
    entries = header["entries"]
    payload_len = sum(e["nbytes"] for e in entries)
    expected = 12 + hlen + payload_len + 4
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, layout requires {expected}")
    payload = raw[12 + hlen : 12 + hlen + payload_len]
    (crc_stored,) = struct.unpack_from("<I", raw, 12 + hlen + payload_len)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise ChecksumError(f"{path}: parameter payload CRC mismatch")
    config = ModelConfig(**header["config"])
    tensors = {}
    for e in entries:
        chunk = payload[e["offset"] : e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).copy()
    params = ModelParams(config, tensors)
    params.frozen = set(header.get("frozen", ["class_base"]))
    params.meta = dict(header.get("meta", {}))
    return params

"""Config-driven command line: synth, train, distill, eval, score, gradcheck.

Precedence, lowest to highest: preset defaults, config file keys, --set
overrides, dedicated flags. The fully resolved config is echoed into every
run report. Set AVLAB_LOG=INFO (or DEBUG) for per-epoch log lines.
"""

from __future__ import annotations

import os

os.environ.setdefault("OMP_NUM_THREADS", "1")  # single-threaded numerics

import argparse
import copy
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import AvlabError, ConfigError, DataError
from .featureio import SynthConfig, synth_generate
from .losses import LossConfig
from .model import ModelConfig, load_checkpoint
from .trainer import (
    MODES,
    TrainConfig,
    dump_scores,
    evaluate,
    train,
)
from .verification import loss_gradchecks, op_gradchecks

log = logging.getLogger("avlab")

PRESETS = {
    "desk": {
        "model": {"d": 64},
        "train": {"batch_size": 8, "learning_rate": 1e-3, "epochs": 10},
    },
    "paper": {
        "model": {"d": 512},
        "train": {"batch_size": 96, "learning_rate": 1e-5, "epochs": 10},
    },
}

_SECTIONS = {"synth": SynthConfig, "model": ModelConfig, "train": TrainConfig, "loss": LossConfig}
# keys owned by the run seed, the subcommand, or another section
_BANNED = {
    "synth": {"seed"},
    "model": {"classes"},
    "train": {"seed", "mode", "loss", "teacher_checkpoint"},
    "loss": set(),
}
_TOP_KEYS = {"preset", "seed", "manifest", "eval_manifest", "teacher", "out_dir"}


@dataclass
class RunConfig:
    seed: int
    manifest: str | None
    eval_manifest: str | None
    teacher: str | None
    out_dir: str
    synth: SynthConfig
    model: ModelConfig
    train: TrainConfig
    resolved: dict


def _section_fields(cls, banned):
    return {f.name for f in dataclasses.fields(cls)} - banned


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _apply_set(data: dict, pair: str) -> None:
    if "=" not in pair:
        raise ConfigError(f"--set expects key=value, got {pair!r}")
    key, _, raw = pair.partition("=")
    value = yaml.safe_load(raw)
    node = data
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {p} is not a section")
    node[parts[-1]] = value


def _coerce(key: str, value, default):
    # yaml leaves bare scientific notation like 1e-4 as a string
    if not isinstance(value, str) or isinstance(default, bool) or not isinstance(default, (int, float)):
        return value
    try:
        return type(default)(value)
    except ValueError as e:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from e


def build_run_config(config_path, sets=(), **flags) -> RunConfig:
    """Resolve preset -> file -> --set -> flags into validated dataclasses."""
    file_data = {}
    if config_path:
        try:
            text = Path(config_path).read_text()
        except OSError as e:
            raise DataError(f"cannot read config {config_path}: {e}") from e
        file_data = yaml.safe_load(text) or {}
        if not isinstance(file_data, dict):
            raise ConfigError(f"{config_path}: top level must be a mapping")

    preset = file_data.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    data = _merge(PRESETS[preset], {k: v for k, v in file_data.items() if k != "preset"})
    for pair in sets:
        _apply_set(data, pair)
    for key, value in flags.items():
        if value is not None:
            data[key] = value

    for key in data:
        if key not in _TOP_KEYS | set(_SECTIONS):
            raise ConfigError(f"unknown config key {key!r}")
    sections = {}
    for name, cls in _SECTIONS.items():
        body = data.get(name, {})
        if not isinstance(body, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        allowed = _section_fields(cls, _BANNED[name])
        defaults = {f.name: f.default for f in dataclasses.fields(cls)}
        for key in body:
            if key in _BANNED[name]:
                raise ConfigError(f"{name}.{key} is controlled elsewhere; remove it")
            if key not in allowed:
                raise ConfigError(f"unknown config key {name}.{key}")
        sections[name] = {k: _coerce(f"{name}.{k}", v, defaults[k]) for k, v in body.items()}

    try:
        seed = int(data.get("seed", 42))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"seed: expected an integer, got {data.get('seed')!r}") from e
    try:
        synth = SynthConfig(seed=seed, **sections["synth"])
        synth.validate()
        model = ModelConfig(classes=list(synth.classes), **sections["model"])
        loss = LossConfig(**sections["loss"])
        train_cfg = TrainConfig(seed=seed, loss=loss, **sections["train"])
        train_cfg.validate()
    except TypeError as e:
        raise ConfigError(f"bad config value: {e}") from e

    resolved = {
        "preset": preset,
        "seed": seed,
        "manifest": data.get("manifest"),
        "eval_manifest": data.get("eval_manifest"),
        "teacher": data.get("teacher"),
        "out_dir": data.get("out_dir", "runs/out"),
        "synth": dataclasses.asdict(synth),
        "model": dataclasses.asdict(model),
        "train": dataclasses.asdict(train_cfg),
    }
    return RunConfig(
        seed=seed,
        manifest=data.get("manifest"),
        eval_manifest=data.get("eval_manifest"),
        teacher=data.get("teacher"),
        out_dir=data.get("out_dir", "runs/out"),
        synth=synth,
        model=model,
        train=train_cfg,
        resolved=resolved,
    )


def _key_listing() -> str:
    lines = ["config keys and defaults:"]
    lines.append("  seed=42  manifest=null  eval_manifest=null  teacher=null  out_dir=runs/out  preset=desk")
    for name, cls in _SECTIONS.items():
        inst = cls()
        parts = []
        for f in dataclasses.fields(cls):
            if f.name in _BANNED[name] or f.name in ("classes", "loss"):
                continue
            parts.append(f"{f.name}={getattr(inst, f.name)}")
        lines.append(f"  {name}.{{{', '.join(parts)}}}")
    lines.append("  synth.classes defaults to [normal, bang, shatter, siren, crash]")
    lines.append("presets: desk (d=64, batch 8, lr 1e-3), paper (d=512, batch 96, lr 1e-5)")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# subcommands


def _require(value, name: str):
    if not value:
        raise ConfigError(f"{name} is required (config key or flag)")
    return value


def cli_synth(rc: RunConfig) -> int:
    out = Path(_require(rc.out_dir, "out_dir"))
    train_m, test_m = synth_generate(rc.synth, out)
    print(f"wrote {train_m}")
    print(f"wrote {test_m}")
    return 0


def _run_training(rc: RunConfig, mode: str, init_from_teacher: bool = False) -> int:
    rc.train.mode = mode
    if mode != "teacher_av":
        rc.train.teacher_checkpoint = rc.teacher
        rc.train.init_from_teacher = init_from_teacher
    if mode == "distill_ukd":
        _require(rc.teacher, "teacher")
    manifest = _require(rc.manifest, "manifest")
    rc.resolved["train"]["mode"] = mode
    rc.resolved["train"]["teacher_checkpoint"] = rc.train.teacher_checkpoint
    rc.resolved["train"]["init_from_teacher"] = rc.train.init_from_teacher
    ckpt, report = train(rc.model, rc.train, manifest, rc.out_dir, config_echo=rc.resolved)
    if rc.train.epochs == 0:
        print("zero epochs requested; checkpoint equals initialization")
        final = float("nan")
    else:
        final = report.epoch_losses[-1]["total"]
    if rc.eval_manifest:
        report.final_eval = evaluate(load_checkpoint(ckpt), rc.eval_manifest,
                                     rc.train.stride, rc.train.max_len)
        report.save(Path(rc.out_dir) / "report.json")
        print(f"eval frame AP: {report.final_eval.frame_ap}")
    print(f"mode {mode}: {rc.train.epochs} epochs, final loss {final:.4f}")
    print(f"checkpoint: {ckpt}")
    return 0


def cli_eval(checkpoint, manifest, scores_dir, out, stride, max_len) -> int:
    params = load_checkpoint(_require(checkpoint, "checkpoint"))
    report = evaluate(params, _require(manifest, "manifest"), stride, max_len,
                      scores_dir=scores_dir)
    print(f"frame AP: {report.frame_ap}")
    print(f"avg mAP:  {report.avg_map}")
    for th, v in report.map_per_iou.items():
        print(f"  mAP@{th}: {v}")
    for notice in report.notices:
        print(f"note: {notice}")
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        print(f"report: {out}")
    return 0


def cli_score(checkpoint, manifest, out, stride, max_len) -> int:
    params = load_checkpoint(_require(checkpoint, "checkpoint"))
    written = dump_scores(params, _require(manifest, "manifest"),
                          _require(out, "out"), stride, max_len)
    print(f"wrote {len(written)} score files to {out}")
    return 0


def cli_gradcheck(seeds: int) -> int:
    worst: dict[str, float] = {}
    for seed in range(seeds):
        for name, err in op_gradchecks(seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
        for name, err in loss_gradchecks(seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
    for name in sorted(worst):
        print(f"{name}: {worst[name]:.3e}")
    overall = max(worst.values())
    print(f"worst relative error: {overall:.3e} over {seeds} seeds")
    if overall >= 1e-4:
        print("FAIL: tolerance 1e-4 exceeded", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="avlab",
        description=__doc__,
        epilog=_key_listing(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("-c", "--config", help="YAML config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set train.epochs=3")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", dest="out_dir")

    sp = sub.add_parser("synth", help="generate the synthetic benchmark")
    common(sp)

    for name, mode_help in (("train", "train a detector"), ("distill", "distill a visual student")):
        sp = sub.add_parser(name, help=mode_help)
        common(sp)
        sp.add_argument("--manifest")
        sp.add_argument("--eval-manifest", dest="eval_manifest")
        if name == "train":
            sp.add_argument("--mode", default="teacher_av",
                            choices=[m for m in MODES if m != "distill_ukd"])
            sp.add_argument("--teacher", help="optional warm-start checkpoint")
        else:
            sp.add_argument("--teacher", help="teacher checkpoint (required)")
        sp.add_argument("--init-from-teacher", action="store_true")

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--scores-dir", help="use score dumps instead of model forwards")
    sp.add_argument("--out", help="write the report JSON here")
    sp.add_argument("--stride", type=int, default=1)
    sp.add_argument("--max-len", type=int, default=256)

    sp = sub.add_parser("score", help="export per-video score matrices")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--stride", type=int, default=1)
    sp.add_argument("--max-len", type=int, default=256)

    sp = sub.add_parser("gradcheck", help="finite-difference verification suite")
    sp.add_argument("--seeds", type=int, default=3)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("AVLAB_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return cli_gradcheck(args.seeds)
        if args.command == "eval":
            return cli_eval(args.checkpoint, args.manifest, args.scores_dir,
                            args.out, args.stride, args.max_len)
        if args.command == "score":
            return cli_score(args.checkpoint, args.manifest, args.out,
                             args.stride, args.max_len)
        flags = {"seed": args.seed, "out_dir": args.out_dir}
        if args.command in ("train", "distill"):
            flags["manifest"] = args.manifest
            flags["eval_manifest"] = args.eval_manifest
            flags["teacher"] = args.teacher
        rc = build_run_config(args.config, args.set, **flags)
        if args.command == "synth":
            return cli_synth(rc)
        mode = "distill_ukd" if args.command == "distill" else args.mode
        return _run_training(rc, mode, args.init_from_teacher)
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except AvlabError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

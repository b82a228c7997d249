"""Command line: extract one video, or embed class labels."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import EncoderUnavailable, ExtractError, MediaError
from .extract import LONG_FORM_STRIDE, ExtractionJob, embed_class_labels, extract


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avextract")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("extract", help="embed one video into visual + audio AVFE files")
    e.add_argument("--video", required=True)
    e.add_argument("--audio", default=None, help="sidecar WAV with the audio track")
    e.add_argument("--out-dir", required=True)
    e.add_argument("--stride", type=int, default=LONG_FORM_STRIDE)
    e.add_argument("--target-len", type=int, default=None,
                   help="force exactly N sampled frames instead of striding")
    e.add_argument("--manifest", default=None, help="append a manifest line here")
    e.add_argument("--label", default="1", help="comma-separated 0/1 video label")
    e.add_argument("--image-encoder", default="vit-b16-stub")
    e.add_argument("--audio-encoder", default="wav2clip-stub")

    l = sub.add_parser("labels", help="embed class names into a class-base file")
    l.add_argument("--names", required=True, help="comma-separated class names")
    l.add_argument("--template", default="a video of {}")
    l.add_argument("--out", required=True)
    l.add_argument("--encoder", default="text-stub")
    return p


def main(argv=None) -> int:
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "extract":
            out = Path(args.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            stem = Path(args.video).stem
            job = ExtractionJob(
                video_path=args.video,
                visual_out=str(out / f"{stem}_v.avfe"),
                audio_out=str(out / f"{stem}_a.avfe"),
                audio_path=args.audio,
                stride=args.stride,
                target_len=args.target_len,
                image_encoder=args.image_encoder,
                audio_encoder=args.audio_encoder,
                label=[int(v) for v in args.label.split(",")],
            )
            res = extract(job, manifest_path=args.manifest)
            print(f"{res.video_id}: N={res.n}")
            print(f"visual: {res.visual_path}")
            print(f"audio:  {res.audio_path}")
        else:
            names = [n.strip() for n in args.names.split(",") if n.strip()]
            emb = embed_class_labels(names, args.template, args.out, encoder=args.encoder)
            print(f"wrote {emb.shape[0]} x {emb.shape[1]} class embeddings to {args.out}")
        return 0
    except MediaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ExtractError, EncoderUnavailable, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

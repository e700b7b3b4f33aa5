"""``inrmark`` command line: fit | pretrain | embed | sample | attack | extract | evaluate."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import ExperimentConfig
from .distortions import DistortionSpec
from .errors import DomainError, InrMarkError


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _spec(text: str) -> DistortionSpec:
    try:
        return DistortionSpec.parse(text)
    except DomainError as err:
        raise argparse.ArgumentTypeError(str(err)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inrmark", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_ in [
        ("fit", "fit a SIREN to one image (stage 1)"),
        ("pretrain", "pre-train the watermark decoder (stage 2)"),
        ("embed", "fine-tune a fitted INR to carry a message (stage 3)"),
        ("evaluate", "bit accuracy / PSNR over resolutions x attacks"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("sample", help="render an INR checkpoint to a PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--out", required=True, help="output PNG path")

    p = sub.add_parser("attack", help="apply one distortion to a PNG")
    p.add_argument("--image", required=True)
    p.add_argument("--spec", type=_spec, required=True, help="e.g. identity, gn:0.05, jpeg:50, crop:0.25")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output PNG path")

    p = sub.add_parser("extract", help="decode the message from an image")
    p.add_argument("--decoder", required=True, help="decoder checkpoint directory")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", default=None, help="embed checkpoint to score against")
    p.add_argument("--out", default=None, help="write the JSON report here")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "fit":
            print(pipeline.run_fit(_load_config(args), args.out))
        elif args.command == "pretrain":
            print(pipeline.run_pretrain(_load_config(args), args.out))
        elif args.command == "embed":
            print(pipeline.run_embed(_load_config(args), args.out))
        elif args.command == "evaluate":
            rows = pipeline.run_evaluate(_load_config(args), args.out)
            for r in rows:
                print(f"{r['height']}x{r['width']}\t{r['distortion']}\t{r['bit_accuracy']:.2f}\t{r['psnr']:.2f}")
        elif args.command == "sample":
            print(pipeline.run_sample(args.checkpoint, args.height, args.width, args.out))
        elif args.command == "attack":
            print(pipeline.run_attack(args.image, args.spec, args.out, args.seed))
        elif args.command == "extract":
            report = pipeline.run_extract(args.decoder, args.image, args.checkpoint)
            text = json.dumps(report, indent=2)
            if args.out:
                with open(args.out, "w") as fh:
                    fh.write(text)
            print(text)
    except (InrMarkError, FileNotFoundError) as err:
        print(f"inrmark: error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

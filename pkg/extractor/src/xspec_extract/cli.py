"""Command line front end: image folder in, XSFT dataset out."""

import argparse
import sys

from xspec.errors import XspecError
from xspec.feature_store import Domain

from .errors import (
    InvalidConfigError,
    NoImagesFound,
    UnreadableImage,
    WeightsMissing,
)
from .extract import ExtractConfig, extract

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_MODEL = 5


def _parse_resize(text: str) -> tuple:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise InvalidConfigError(f"--resize expects HxW, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="xspec-extract",
        description="Extract backbone feature maps from an image directory.",
    )
    ap.add_argument("--input", required=True, help="image directory (flat, or one numeric subdir per identity)")
    ap.add_argument("--domain", required=True, choices=["rgb", "ir"])
    ap.add_argument("--resize", default="128x64", help="HxW, e.g. 128x64 or 224x224")
    ap.add_argument("--out", required=True, help="output dataset directory")
    ap.add_argument("--weights", default=None, help="backbone state-dict file; omit for seeded random filters")
    ap.add_argument("--no-pool-after", action="store_true", help="stop before the third pooling stage (spatial /4)")
    ap.add_argument("--seed", type=int, default=0, help="seed for the random-filter fallback")
    ap.add_argument("--batch-size", type=int, default=8)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExtractConfig(
            input_dir=args.input,
            domain=Domain.RGB if args.domain == "rgb" else Domain.IR,
            out_dir=args.out,
            resize=_parse_resize(args.resize),
            pool_after=not args.no_pool_after,
            weights=args.weights,
            seed=args.seed,
            batch_size=args.batch_size,
        )
        manifest = extract(cfg)
    except InvalidConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NoImagesFound, UnreadableImage, XspecError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except WeightsMissing as exc:
        print(f"weights error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    print(f"wrote features to {manifest.parent}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

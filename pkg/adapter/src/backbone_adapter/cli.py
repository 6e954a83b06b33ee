"""Command-line front end: one flag per AdapterConfig field."""

import argparse
import sys

from .adapter import AdapterConfig, AdapterError, emit_predictions


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="backbone-adapter",
        description="Run an image backbone over a manifest and write a "
        "prediction CSV (image_id,p0..pK-1, rows in manifest order).",
    )
    parser.add_argument("--manifest", required=True, help="CSV of image_id,path")
    parser.add_argument("--out", required=True, help="prediction CSV to write")
    parser.add_argument(
        "--backbone",
        default="stub",
        help="'stub' or 'torchvision:<model>' (default: stub)",
    )
    parser.add_argument("--num-classes", type=int, default=3)
    parser.add_argument("--weights", help="local weights file for real backbones")
    parser.add_argument(
        "--image-dir", help="base for relative paths (default: manifest directory)"
    )
    parser.add_argument("--device", default="cpu")
    parser.add_argument(
        "--resize",
        default="none",
        help="square edge length for preprocessing, or 'none' (default)",
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.resize == "none":
            resize = None
        else:
            try:
                resize = int(args.resize)
            except ValueError:
                raise AdapterError(
                    [f"--resize expects an integer or 'none', got {args.resize!r}"]
                ) from None
        config = AdapterConfig(
            manifest=args.manifest,
            out=args.out,
            backbone=args.backbone,
            num_classes=args.num_classes,
            weights=args.weights,
            image_dir=args.image_dir,
            device=args.device,
            resize=resize,
        )
        count = emit_predictions(config)
    except AdapterError as err:
        for line in err.reports:
            print(f"error: {line}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    print(f"{count} rows -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

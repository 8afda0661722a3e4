"""Command-line front end.

Exit codes: 0 success, 1 I/O or bad-input errors, 2 usage errors (argparse),
3 "no artifact patches detected" (annotate more A-type ROIs and rerun).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .idsn import PipelineError, dump_pairs
from .image import FormatError, load_image, save_unit_png
from .metrics import Region, compare, region_snr
from .pipeline import (
    PROFILES,
    PipelineConfig,
    apply_profile,
    classify_image,
    label_map,
    run_pipeline,
    synthesize_for_dump,
)


def _load_config(args) -> PipelineConfig:
    """Config file, then profile, then explicit flags, in override order."""
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text())
        config = PipelineConfig.from_dict(doc)
    else:
        config = PipelineConfig()
    if getattr(args, "profile", None):
        config = apply_profile(config, args.profile)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "no_attention", False):
        overrides["attention_enabled"] = False
    if overrides:
        config = config.with_overrides(overrides)
    return config


def _cmd_denoise(args) -> int:
    config = _load_config(args)
    record = run_pipeline(args.image, args.rois, config,
                          out_root=args.out, save_pairs=args.save_pairs)
    print(json.dumps(record.to_dict(), indent=2))
    return 0


def _cmd_classify(args) -> int:
    config = _load_config(args)
    patches, labels = classify_image(args.image, args.rois, config)
    image = load_image(args.image)
    save_unit_png(label_map(image, patches, labels), args.out)
    counts = {label: labels.count(label) for label in ("A", "N")}
    print(f"wrote {args.out}: {counts['A']} A / {counts['N']} N patches")
    return 0


def _cmd_synth(args) -> int:
    config = _load_config(args).with_overrides({"pair_count": args.count})
    pairs = synthesize_for_dump(args.image, args.rois, config)
    dump_pairs(pairs, args.out)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def _parse_region(text) -> Region:
    parts = text.split(",")
    if len(parts) != 4:
        raise ValueError(f"region must be x,y,w,h, got {text!r}")
    x, y, w, h = (int(p) for p in parts)
    return Region(x=x, y=y, width=w, height=h)


def _cmd_metrics(args) -> int:
    region = _parse_region(args.region)
    image = load_image(args.image)
    if args.baseline:
        report = compare(load_image(args.baseline), image, region)
    else:
        report = region_snr(image, region)
    print(report.to_json(indent=2))
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    data_dir = os.environ.get("OSAR_DATA_DIR") or args.data_dir
    uvicorn.run(create_app(data_dir), host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="osar",
        description="One-shot additive-artifact reduction for 2-d grayscale images",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--image", required=True, help="input image (png/pgm/raw)")
        p.add_argument("--rois", required=True, help="ROI annotation JSON")
        p.add_argument("--config", help="JSON file of config overrides")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--profile", choices=sorted(PROFILES),
                       help="named config profile")

    p = sub.add_parser("denoise", help="run the full train-and-apply pipeline")
    common(p)
    p.add_argument("--out", help="root directory for runs/<id>/ artifacts")
    p.add_argument("--no-attention", action="store_true",
                   help="train without the attention branch")
    p.add_argument("--save-pairs", action="store_true",
                   help="also dump the synthesized pairs to pairs.bin")
    p.set_defaults(func=_cmd_denoise)

    p = sub.add_parser("classify", help="write the patch label map (A=white, N=black)")
    common(p)
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(func=_cmd_classify)

    p = sub.add_parser("synth", help="dump synthesized dirty/clean pairs")
    common(p)
    p.add_argument("--count", type=int, required=True, help="number of pairs")
    p.add_argument("--out", required=True, help="output pairs.bin path")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("metrics", help="region SNR report as JSON")
    p.add_argument("--image", required=True)
    p.add_argument("--region", required=True, help="x,y,w,h rectangle")
    p.add_argument("--baseline", help="input image to compute deltas against")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("serve", help="start the HTTP API")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--data-dir", default=".",
                   help="artifact root (OSAR_DATA_DIR overrides)")
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (FormatError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

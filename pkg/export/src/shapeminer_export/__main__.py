"""CLI: python -m shapeminer_export --manifest M --out dir/ --augs 10"""

import argparse
import logging
import sys

from .backbones import ModelUnavailableError
from .export import AugmentationSpec, ExportJob, export_features


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="shapeminer_export",
        description="Export global embeddings, dense feature maps, saliency "
        "and foreground masks for every image in a manifest.",
    )
    parser.add_argument("--manifest", required=True, help="input manifest JSON")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--augs", type=int, default=10,
                        help="augmentation draws per image (default 10)")
    parser.add_argument("--seed", type=int, default=0,
                        help="augmentation seed (default 0)")
    parser.add_argument("--backbone", choices=("pretrained", "fallback"),
                        default="pretrained",
                        help="feature backend (default pretrained)")
    parser.add_argument("--weights-dir", default=None,
                        help="directory holding TorchScript weight archives")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    job = ExportJob(
        manifest=args.manifest,
        out_dir=args.out,
        augmentations=AugmentationSpec(count=args.augs, seed=args.seed),
        backbone=args.backbone,
        weights_dir=args.weights_dir,
    )
    try:
        manifest = export_features(job)
    except ModelUnavailableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"exported {len(manifest['entries'])} entries to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

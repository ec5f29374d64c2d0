"""`vggt-export`: turn a directory of masked images into PMAP files."""

import argparse
import sys

from .backends import SyntheticBackend, VGGTBackend
from .errors import BridgeError
from .exporter import export


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="vggt-export",
        description="Export per-view point maps + confidences to .pmap files",
    )
    p.add_argument("--images", required=True, help="directory of masked images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--floor", type=float, default=0.1,
                   help="confidence floor in raw model units (default 0.1)")
    p.add_argument("--backend", choices=("vggt", "synthetic"), default="vggt")
    p.add_argument("--checkpoint", default=None,
                   help="TorchScript checkpoint for --backend vggt")
    p.add_argument("--device", default="cpu")
    p.add_argument("--seed", type=int, default=0,
                   help="synthetic-backend seed (ignored by vggt)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.backend == "vggt":
            if args.checkpoint is None:
                raise BridgeError(
                    "--backend vggt needs --checkpoint; use --backend "
                    "synthetic to exercise the pipeline without the model"
                )
            backend = VGGTBackend(args.checkpoint, device=args.device)
        else:
            backend = SyntheticBackend(seed=args.seed)
        written = export(args.images, args.out, confidence_floor=args.floor,
                         backend=backend)
    except BridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""CLI: dermfuse-export --network {alexnet|vgg16} --out model.onnx [--opset N]."""

from __future__ import annotations

import argparse
import logging
import sys

from .export import ExportError, ExportSpec, export


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dermfuse-export",
        description="Export AlexNet/VGG-16 to ONNX with fc6/fc7/fc8 outputs",
    )
    parser.add_argument("command", choices=["export"], nargs="?", default="export")
    parser.add_argument("--network", required=True, choices=["alexnet", "vgg16"])
    parser.add_argument("--out", required=True, help="destination .onnx path")
    parser.add_argument("--opset", type=int, default=13, help="ONNX opset (>= 11)")
    parser.add_argument("--weights", choices=["pretrained", "random"], default="pretrained",
                        help="'random' skips the weight download (untrained export)")
    parser.add_argument("--seed", type=int, default=0, help="seed for random weights and the parity tensor")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        path = export(ExportSpec(
            network=args.network, out_path=args.out, opset=args.opset,
            weights=args.weights, seed=args.seed,
        ))
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(path)
    print(f"{path}.parity")
    return 0


if __name__ == "__main__":
    sys.exit(main())

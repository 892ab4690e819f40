"""Command-line entry point.

Results go to stdout as ``key=value`` lines (or CSV for rd-sweep);
diagnostics go to stderr. Exit codes: 0 success, 1 data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import math
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import gradcheck, plotting
from .codec import CodecConfig, decode, encode, quantize_mm
from .entropy import Bitstream
from .errors import CodecError
from .metrics import DEFAULT_NORMAL_K, RdCurve, bd_rate, d1_psnr, d2_psnr
from .mopa import NpaPredictor
from .nn.weights import ModelWeights
from .pcio import read_cloud, write_ply
from .sweep import rd_sweep


def _fraction(text: str) -> Fraction:
    try:
        f = Fraction(text.strip())
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a fraction: {text!r}")
    if not 0 < f <= 1:
        raise argparse.ArgumentTypeError(f"scale must lie in (0, 1], got {text}")
    return f


def _fractions(text: str) -> list:
    return [_fraction(t) for t in text.split(",") if t.strip()]


def _positive(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not v > 0 or not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _fmt(v: float) -> str:
    return "inf" if v == math.inf else f"{v:.6f}"


def _load_model(path, k=None):
    if path is None:
        print("warning: no --weights given, using seed-0 random weights", file=sys.stderr)
        weights = CodecConfig().load_weights()
    else:
        weights = ModelWeights.load(path)
    return NpaPredictor(weights, k)


def _quantized_input(path, precision):
    cloud = read_cloud(path)
    return quantize_mm(cloud.points, precision)


def cmd_encode(args):
    coords = _quantized_input(args.input, args.precision)
    pred = _load_model(args.weights, args.k)
    cfg = CodecConfig(scale=args.scale, base_scale_threshold=args.base_threshold)
    data = encode(coords, cfg, pred).to_bytes()
    Path(args.out).write_bytes(data)
    print(f"points={len(coords)}")
    print(f"bytes={len(data)}")
    print(f"bpp={8 * len(data) / len(coords):.6f}")


def cmd_decode(args):
    bs = Bitstream.from_bytes(Path(args.input).read_bytes())
    pred = _load_model(args.weights, bs.header.k)
    rec = decode(bs, model=pred)
    write_ply(rec.points.astype(np.float64) * args.precision, args.out, binary=args.binary)
    print(f"points={len(rec.points)}")


def cmd_eval(args):
    ref = read_cloud(args.ref).points
    rec = read_cloud(args.rec).points
    print(f"d1_psnr={_fmt(d1_psnr(ref, rec, args.peak))}")
    print(f"d2_psnr={_fmt(d2_psnr(ref, rec, args.peak, args.normal_k))}")


def cmd_bdrate(args):
    value = bd_rate(RdCurve.from_csv(args.anchor), RdCurve.from_csv(args.test), args.channel)
    print(f"bd_rate={value:.2f}%")


def cmd_rd_sweep(args):
    coords = _quantized_input(args.input, args.precision)
    pred = _load_model(args.weights, args.k)
    rows = rd_sweep(coords, pred, args.scales, args.peak, args.normal_k, args.base_threshold)
    out = Path(args.out)
    csv_path, svg_path = out.with_suffix(".csv"), out.with_suffix(".svg")
    lines = ["bpp,d1_psnr,d2_psnr,scale"]
    for r in rows:
        p = r.point
        lines.append(f"{p.bpp!r},{p.psnr_d1!r},{p.psnr_d2!r},{r.scale}")
    csv_path.write_text("\n".join(lines) + "\n")
    plotting.rd_plot({Path(args.input).stem: [r.point for r in rows]}, svg_path, args.channel)
    print("\n".join(lines))
    print(f"wrote {csv_path} and {svg_path}", file=sys.stderr)


def cmd_train_toy(args):
    from .trainer import read_config, train

    cfg = read_config(args.config)
    out = Path(args.out)
    log_path = out.with_suffix(".log.csv") if args.log is None else Path(args.log)

    def progress(step, loss):
        if args.verbose and step % 10 == 0:
            print(f"step {step} loss {loss:.5f}", file=sys.stderr)

    result = train(cfg, log_path=log_path, progress=progress)
    result.weights.astype(np.float32).save(out)
    plotting.loss_plot(result.log, log_path.with_suffix(".svg"))
    final = result.log[-1][1] if result.log else float("nan")
    print(f"steps={cfg.steps}")
    print(f"final_loss={final:.6f}")
    print(f"seconds={result.seconds:.1f}")
    print(f"model_hash={result.weights.astype(np.float32).hash.hex()}")


def cmd_gradcheck(args):
    results = gradcheck.run_all(args.seed, e2e=not args.layers_only)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="npacodec", description="Learned point-cloud geometry codec.")
    sub = ap.add_subparsers(dest="command", required=True)

    def model_args(p):
        p.add_argument("--weights", help="NPAW weights file (default: seed-0 random weights)")
        p.add_argument("--k", type=int, help="override the neighbor count stored in the weights")

    p = sub.add_parser("encode", help="compress a point cloud")
    p.add_argument("--input", required=True)
    model_args(p)
    p.add_argument("--scale", type=_fraction, default=Fraction(1), help="scaling factor num/den in (0, 1]")
    p.add_argument("--precision", type=_positive, default=1.0,
                   help="quantization step, in the input's units")
    p.add_argument("--base-threshold", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct a point cloud")
    p.add_argument("--input", required=True)
    p.add_argument("--weights")
    p.add_argument("--precision", type=_positive, default=1.0,
                   help="multiply decoded lattice coordinates by this step")
    p.add_argument("--binary", action="store_true", help="write binary little-endian PLY")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="D1/D2 PSNR between two clouds")
    p.add_argument("--ref", required=True)
    p.add_argument("--rec", required=True)
    p.add_argument("--peak", type=_positive, required=True)
    p.add_argument("--normal-k", type=int, default=DEFAULT_NORMAL_K)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bdrate", help="BD-rate between two R-D CSV files")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--channel", choices=("d1", "d2"), default="d1")
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("rd-sweep", help="R-D curve over scaling factors (CSV + SVG)")
    p.add_argument("--input", required=True)
    model_args(p)
    p.add_argument("--scales", type=_fractions, required=True, help="comma list, e.g. 1,1/2,1/4")
    p.add_argument("--precision", type=_positive, default=1.0)
    p.add_argument("--peak", type=_positive, help="PSNR peak (default: largest bbox side)")
    p.add_argument("--normal-k", type=int, default=DEFAULT_NORMAL_K)
    p.add_argument("--channel", choices=("d1", "d2"), default="d1", help="channel to plot")
    p.add_argument("--base-threshold", type=int, default=64)
    p.add_argument("--out", default="rd", help="output prefix for .csv and .svg")
    p.set_defaults(func=cmd_rd_sweep)

    p = sub.add_parser("train-toy", help="train on the synthetic corpus")
    p.add_argument("--config", required=True, help="flat key = value file")
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all backward passes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers-only", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except (CodecError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

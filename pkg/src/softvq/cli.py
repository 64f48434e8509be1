"""Command line interface: train, compress, decompress, eval, sweep."""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from softvq import codec
from softvq.checkpoint import load_checkpoint, model_checksum, save_checkpoint
from softvq.datasets import load_dataset, load_pnm, save_pnm
from softvq.nets import NetConfig
from softvq.training import TrainConfig, rd_sweep, train, write_sweep_csv


def _add_data_args(p):
    p.add_argument("--data", required=True, help="dataset file or directory")
    p.add_argument("--format", required=True, choices=["cifar10", "pnm-dir"],
                   help="dataset layout")
    p.add_argument("--limit", type=int, default=None,
                   help="use only the first N images")


def _add_hyper_args(p, grid=False):
    if grid:
        p.add_argument("--alpha", default="0,0.001,0.01",
                       help="comma-separated soft cross-entropy weights to sweep")
        p.add_argument("--k", default="8,32,128",
                       help="comma-separated codebook sizes to sweep")
        p.add_argument("--seed", default="0", help="comma-separated seeds")
    else:
        p.add_argument("--alpha", type=float, default=0.001,
                       help="soft cross-entropy weight (rate pressure)")
        p.add_argument("--k", type=int, default=32, help="codebook size")
        p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beta", type=float, default=1.0,
                   help="hard cross-entropy weight (entropy-model fit speed)")
    p.add_argument("--sigma", type=float, default=1.0,
                   help="quantization softmax sharpness")
    p.add_argument("--m", type=int, default=8, help="quantization vector dimension")
    p.add_argument("--folds", type=int, default=1, help="stride-2 downsampling stages")
    p.add_argument("--latent-channels", type=int, default=None,
                   help="latent channels (default: smallest multiple of m >= 8)")
    p.add_argument("--width", type=int, default=32, help="channels per stage")
    p.add_argument("--blocks", type=int, default=2, help="residual blocks")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=1e-3, help="peak learning rate")
    p.add_argument("--batch", type=int, default=32, help="batch size")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="softvq",
        description="Learned transform compression with soft vector quantization.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and save a checkpoint")
    _add_data_args(p_train)
    _add_hyper_args(p_train)
    p_train.add_argument("--model", required=True, help="checkpoint output path")
    p_train.add_argument("--log-csv", default=None, help="per-epoch metrics CSV")
    p_train.add_argument("--quiet", action="store_true")

    p_comp = sub.add_parser("compress", help="compress a PGM/PPM image (or a directory)")
    p_comp.add_argument("--model", required=True, help="checkpoint path")
    p_comp.add_argument("--input", required=True, help="image file or directory")
    p_comp.add_argument("--output", required=True, help="bitstream file or directory")

    p_dec = sub.add_parser("decompress", help="decode a bitstream back to an image")
    p_dec.add_argument("--model", required=True, help="checkpoint path")
    p_dec.add_argument("--input", required=True, help="bitstream file")
    p_dec.add_argument("--output", required=True, help="image output (.pgm/.ppm)")

    p_eval = sub.add_parser("eval", help="measure bpp/mse over a dataset")
    p_eval.add_argument("--model", required=True, help="checkpoint path")
    _add_data_args(p_eval)
    p_eval.add_argument("--out-csv", required=True, help="metrics CSV output")

    p_sweep = sub.add_parser("sweep", help="train a (k, alpha, seed) grid and log RD points")
    _add_data_args(p_sweep)
    _add_hyper_args(p_sweep, grid=True)
    p_sweep.add_argument("--out-csv", required=True, help="RD points CSV output")
    p_sweep.add_argument("--quiet", action="store_true")
    return parser


def _net_config(args, image_shape):
    h, w, c = image_shape
    latent = args.latent_channels
    if latent is None:
        from softvq.estimator import default_latent_channels
        latent = default_latent_channels(args.m)
    return NetConfig(height=h, width=w, channels=c,
                     widths=(args.width,) * max(args.folds, 1),
                     downsample_folds=args.folds, latent_channels=latent,
                     num_residual_blocks=args.blocks)


def _train_config(args, **overrides):
    kw = dict(alpha=args.alpha, beta=args.beta, sigma=args.sigma, k=args.k,
              m=args.m, epochs=args.epochs, batch_size=args.batch,
              base_lr=args.lr, seed=args.seed)
    kw.update(overrides)
    return TrainConfig(**kw)


def _load_images(args):
    data = load_dataset(args.data, args.format)
    images = data.images
    if args.limit is not None:
        images = images[:args.limit]
    if images.ndim == 3:
        images = images[..., None]
    return images


def cmd_train(args):
    images = _load_images(args)
    net_cfg = _net_config(args, images.shape[1:])
    model, history = train(images, net_cfg, _train_config(args),
                           log_path=args.log_csv, verbose=not args.quiet)
    save_checkpoint(model, args.model)
    last = history[-1]
    print(f"saved {args.model}: final mse={last.distortion:.2f}, "
          f"hard_xent={last.hard_xent:.4f} nats, "
          f"H(q)={last.model_entropy_bits:.3f} bits")
    return 0


def cmd_compress(args):
    model = load_checkpoint(args.model)
    model_hash = model_checksum(model)
    if os.path.isdir(args.input):
        names = sorted(f for f in os.listdir(args.input)
                       if f.lower().endswith((".pgm", ".ppm")))
        if not names:
            raise ValueError(f"no .pgm/.ppm files in {args.input}")
        os.makedirs(args.output, exist_ok=True)

        def one(name):
            blob = codec.compress(model, load_pnm(os.path.join(args.input, name)),
                                  model_hash)
            out = os.path.join(args.output, os.path.splitext(name)[0] + ".svq")
            with open(out, "wb") as fh:
                fh.write(blob)
            return out, len(blob)

        with ThreadPoolExecutor(max_workers=codec.worker_count()) as pool:
            for out, size in pool.map(one, names):
                print(f"{out}: {size} bytes")
        return 0

    image = load_pnm(args.input)
    blob = codec.compress(model, image, model_hash)
    with open(args.output, "wb") as fh:
        fh.write(blob)
    pixels = image.shape[0] * image.shape[1]
    print(f"{args.output}: {len(blob)} bytes, {len(blob) * 8 / pixels:.4f} bpp")
    return 0


def cmd_decompress(args):
    model = load_checkpoint(args.model)
    with open(args.input, "rb") as fh:
        blob = fh.read()
    image = codec.decompress(model, blob)
    save_pnm(args.output, image)
    print(f"{args.output}: {image.shape[1]}x{image.shape[0]}")
    return 0


def cmd_eval(args):
    model = load_checkpoint(args.model)
    images = _load_images(args)
    agg, rows = codec.evaluate_model(model, images, per_image=True)
    codec.write_eval_csv(args.out_csv, rows, agg)
    print(f"{agg.n_images} images: bpp={agg.bpp:.4f} mse={agg.mse:.2f} "
          f"hard_xent_bpp={agg.hard_xent_bpp:.4f} "
          f"H(q)={agg.model_entropy_bits:.3f} bits")
    return 0


def cmd_sweep(args):
    images = _load_images(args)
    net_cfg = _net_config(args, images.shape[1:])
    ks = [int(v) for v in str(args.k).split(",")]
    alphas = [float(v) for v in str(args.alpha).split(",")]
    seeds = [int(v) for v in str(args.seed).split(",")]
    base = _train_config(args, k=ks[0], alpha=alphas[0], seed=seeds[0])
    points = rd_sweep(images, net_cfg, base, ks, alphas, seeds,
                      verbose=not args.quiet)
    write_sweep_csv(args.out_csv, points)
    print(f"wrote {len(points)} RD points to {args.out_csv}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "compress": cmd_compress,
    "decompress": cmd_decompress,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

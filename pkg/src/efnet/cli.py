"""``efnet`` command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import bench as benchmod
from . import data, dbtc, verify
from .config import parse_config
from .errors import ConfigError, EFNetError
from .model import build_model, forward, load_checkpoint, save_checkpoint
from .train import evaluate, train_toy

EXIT_OK, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_verify(args) -> int:
    results = verify.run_all(instances=args.instances, grad_seeds=args.grad_seeds, seed=args.seed)
    print(verify.format_report(results))
    return EXIT_OK if all(r.ok for r in results) else EXIT_VERIFY


def planted_tokens(n: int, clusters: int, seed: int) -> dbtc.TokenSet:
    """n tokens on a grid, features drawn around ``clusters`` well-separated means."""
    rng = np.random.default_rng(seed)
    h = max(1, math.isqrt(n))
    w = -(-n // h)
    means = 4.0 * rng.standard_normal((clusters, 2))
    label = rng.integers(0, clusters, n)
    feats = means[label] + 0.3 * rng.standard_normal((n, 2))
    return dbtc.TokenSet(feats, dbtc.grid_coords(h, w)[:n], np.zeros(n), h, w)


def cmd_cluster_demo(args) -> int:
    if args.n < 2:
        raise ConfigError("n", "must be >= 2")
    ts = planted_tokens(args.n, args.clusters, args.seed)
    k = dbtc.default_k(args.n, args.k)
    m = math.ceil(args.ratio * args.n)
    out, res = dbtc.cluster_downsample(ts, args.tau, k=k, ratio=args.ratio, position="none")
    sizes = np.bincount(res.assignment, minlength=len(res.centers))
    print(f"N={args.n} tau={args.tau} k={k} ratio={args.ratio} -> M={m}")
    print("centers:", " ".join(map(str, res.centers)))
    print("cluster sizes:", " ".join(map(str, sizes)))
    if args.n <= 256:
        same, err, _ = verify.compare_with_oracle(ts, args.tau, k, m)
        print(f"oracle: {'agree' if same else 'DISAGREE'} (max error {err:.2e})")
        return EXIT_OK if same else EXIT_VERIFY
    return EXIT_OK


def cmd_gen(args) -> int:
    samples = data.gen_synthetic(args.n, args.hw, args.hw, args.k, seed=args.seed, thermal_only_frac=args.thermal_only)
    data.save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples ({args.hw}×{args.hw}, K={args.k}) to {args.out}")
    return EXIT_OK


def _check_extent(cfg, samples) -> None:
    h, w = samples[0].labels.shape
    if (h, w) != (cfg.height, cfg.width):
        raise ConfigError("resolution", f"config has {cfg.height}×{cfg.width} but data is {h}×{w}")


def cmd_train(args) -> int:
    cfg, tc = parse_config(Path(args.config).read_text(encoding="utf-8"))
    samples = data.load_dataset(args.data)
    _check_extent(cfg, samples)
    n_test = int(round(tc.holdout * len(samples)))
    train, test = samples[: len(samples) - n_test], samples[len(samples) - n_test :]
    model = build_model(cfg, seed=tc.seed)
    report = train_toy(model, (train, test), tc, log_every=args.log_every)
    curve = report.loss_curve
    head, tail = np.mean(curve[:10]), np.mean(curve[-10:])
    print(f"trained {tc.steps} steps on {len(train)} samples; loss {head:.4f} -> {tail:.4f}")
    if test:
        print(f"held-out ({len(test)}): {report.summary()}")
    save_checkpoint(model, args.out)
    print(f"checkpoint: {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load_checkpoint(args.ckpt)
    s = data.load_pair(args.rgb, args.thermal)
    _check_extent(model.config, [s])
    labels = forward(model, s.rgb, s.thermal).labels()
    data.write_pgm(args.out, labels, raw=True)
    counts = np.bincount(labels.ravel(), minlength=model.config.num_classes)
    print(f"wrote {args.out}; class pixel counts {counts.tolist()}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    samples = data.load_dataset(args.data)
    _check_extent(model.config, samples)
    print(f"all pixels ({len(samples)} samples): {evaluate(model, samples).summary()}")
    if all(s.thermal_only is not None for s in samples) and any(s.thermal_only.any() for s in samples):
        print(f"thermal-only pixels: {evaluate(model, samples, mask='thermal_only').summary()}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if any(n < 2 for n in args.sizes):
        raise ConfigError("sizes", "every size must be >= 2")
    rows = benchmod.bench(args.sizes, channels=args.channels, tau=args.tau, k=args.k, ratio=args.ratio,
                          seed=args.seed, repeats=args.repeats, timing=not args.counts_only)
    print(benchmod.format_table(rows, args.tau, args.k, args.ratio))
    if args.json:
        Path(args.json).write_text(benchmod.to_json(rows, args.tau, args.k, args.ratio), encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="efnet", description="Early-fusion RGB-T segmentation toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the self-verification suites")
    p.add_argument("--instances", type=int, default=200, help="random clustering instances")
    p.add_argument("--grad-seeds", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("cluster-demo", help="cluster planted blobs and compare with the oracle")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--ratio", type=float, default=0.25)
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_cluster_demo)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--hw", type=int, default=64)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--thermal-only", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="predict a label map for one image pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--thermal", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="mIoU of a checkpoint on a dataset directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="time clustering against pooling")
    p.add_argument("--sizes", type=_int_list, default=[256, 1024, 4096])
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--ratio", type=float, default=0.25)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--counts-only", action="store_true", help="skip timing; operation counts only")
    p.add_argument("--json", help="also write machine-readable rows here")
    p.set_defaults(fn=cmd_bench)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or getattr(args, "log_every", 0) else logging.WARNING,
                        format="%(message)s")
    try:
        return args.fn(args)
    except (EFNetError, OSError) as exc:
        print(f"efnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``duoseg {train,sweep,synth,eval,slice}``.

Exit codes: 0 success, 1 partial sweep failure, 2 user/config error,
3 training abort.
"""
import argparse
import json
import logging
import os
import sys

from .config import MODES, ConfigError, load_config
from .data import DataError, generate_synthetic_dataset, slice_volume, write_dataset
from .runs import RunError, default_out_root, evaluate_run, sweep, train_run
from .trainer import TrainingAborted

log = logging.getLogger("duoseg")


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _overrides(args):
    train = {
        "mode": getattr(args, "mode", None),
        "label_fraction": getattr(args, "label_fraction", None),
        "seed": args.seed,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "batches_per_epoch": args.batches_per_epoch,
    }
    return {"train": train}


def _add_train_flags(p):
    p.add_argument("--config", help="TOML config file ([data] and [train] tables)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--batches-per-epoch", type=int)
    p.add_argument("--out", help="output root (default: $DUOSEG_OUT or ./runs)")


def cmd_train(args):
    config = load_config(args.config, _overrides(args))
    run_dir, report = train_run(config, out_root=args.out or default_out_root())
    rec = report.records[0]
    print(f"{run_dir}\tdsc={rec.dsc_percent:.2f}\tmae={rec.mae:.4f}")
    return 0


def cmd_sweep(args):
    config = load_config(args.config, _overrides(args))
    bad = [m for m in args.modes if m not in MODES]
    if bad:
        raise ConfigError(f"unknown mode(s) {', '.join(bad)}; valid modes: {', '.join(MODES)}")
    sweep_dir, reports, failures = sweep(config, args.modes, args.fractions, out_root=args.out or default_out_root())
    print(sweep_dir)
    for f in failures:
        print(f"FAILED {f['mode']} @ {f['label_fraction']:g}: {f['error']}", file=sys.stderr)
    return 1 if failures else 0


def cmd_synth(args):
    out = args.output
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise ConfigError(f"{out} exists and is not empty; pass --force to overwrite")
    samples = generate_synthetic_dataset(args.n, args.res, args.seed, args.noise)
    write_dataset(samples, out, params={"n": args.n, "resolution": args.res, "seed": args.seed, "noise_level": args.noise})
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_eval(args):
    config = load_config(args.config) if args.config else None
    result = evaluate_run(
        args.run_dir,
        checkpoint=args.checkpoint,
        config=config,
        split_name=args.split,
        data_dir=args.data_dir,
        resolution=args.res,
        export_confidence=args.export_confidence,
        panels=args.panels,
        out_dir=args.out,
    )
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_slice(args):
    paths = slice_volume(args.volume, args.axis, args.output)
    print(f"wrote {len(paths)} slices to {args.output}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="duoseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training job")
    _add_train_flags(p)
    p.add_argument("--mode", help=f"one of: {', '.join(MODES)}")
    p.add_argument("--label-fraction", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="modes x label fractions, then a comparison table")
    _add_train_flags(p)
    p.add_argument("--modes", type=lambda s: [m for m in s.split(",") if m], default=["duo_segnet", "supervised_only"])
    p.add_argument("--fractions", type=_floats, default=[0.05, 0.2, 0.5])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="write a synthetic ellipse dataset")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="evaluate a run's checkpoint")
    p.add_argument("run_dir")
    p.add_argument("--checkpoint", default="best.pt")
    p.add_argument("--config", help="verify the checkpoint was trained with this config")
    p.add_argument("--split", default="test", choices=["test", "train_labeled"])
    p.add_argument("--data-dir", help="evaluate on <dir>/images + <dir>/masks instead of the run's split")
    p.add_argument("--res", type=int, help="resolution of --data-dir images (must match training)")
    p.add_argument("--export-confidence", action="store_true")
    p.add_argument("--panels", type=int, default=0)
    p.add_argument("--out", help="output directory (default: <run_dir>/eval)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("slice", help="slice a raw volume into 2D PNGs")
    p.add_argument("volume", help="<name>.raw with a <name>.json header next to it")
    p.add_argument("--axis", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_slice)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, DataError, RunError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingAborted as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

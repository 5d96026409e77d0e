"""Command line entry point: synth, train, eval, decompose and metrics subcommands."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dataio
from .errors import ShadingNetError, UsageError
from .train import RunConfig, decompose, evaluate, load_net, metrics_dirs, train, write_report

log = logging.getLogger("shadingnet")


def _resolution(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        vals = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad resolution {text!r}, use e.g. 64 or 64x96")
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or min(vals) <= 0:
        raise argparse.ArgumentTypeError(f"bad resolution {text!r}")
    return vals


def cmd_synth(args) -> int:
    m = dataio.generate_dataset(args.n, args.seed, args.res, args.out)
    print(f"wrote {len(m['samples'])} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    overrides = {"dataset_dir": args.data, "output_dir": args.out, "resolution": args.res,
                 "batch_size": args.batch_size, "lr": args.lr, "lr_halve_every": args.lr_halve_every,
                 "epochs": args.epochs, "seed": args.seed,
                 "checkpoint_every": args.checkpoint_every}
    if args.config:
        cfg = RunConfig.from_json(args.config, **overrides)
    else:
        cfg = RunConfig(**{k: v for k, v in overrides.items() if v is not None})

    def progress(rec):
        log.info("epoch %d step %d lr %.6g loss %.6f (%.0f ms)",
                 rec["epoch"], rec["step"], rec["lr"], rec["total"], rec["ms"])

    train(cfg, progress=progress)
    print(f"final checkpoint: {Path(cfg.output_dir) / 'final.shdn'}")
    return 0


def cmd_eval(args) -> int:
    net = load_net(args.checkpoint)
    report = evaluate(args.data, net, args.split, args.out)
    print(report.table())
    return 0


def cmd_decompose(args) -> int:
    net = load_net(args.checkpoint)
    maps = decompose(args.image, net, args.out)
    print(f"wrote {', '.join(sorted(maps))} to {args.out}")
    return 0


def cmd_metrics(args) -> int:
    report = metrics_dirs(args.pred, args.gt)
    if args.out:
        write_report(report, args.out)
    if args.json:
        print(report.to_json())
    else:
        print(report.table())
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shadingnet", description="Fine-grained intrinsic image decomposition lab.")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--res", type=_resolution, default=(64, 64))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a dataset's train split")
    t.add_argument("--config", help="JSON file with RunConfig keys; flags override it")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--out", help="run output directory")
    t.add_argument("--res", type=_resolution)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-halve-every", type=int, help="epochs between learning-rate halvings")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("train", "test", "all"), default="test")
    e.add_argument("--out", help="directory for report.json and report.txt")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("decompose", help="decompose a single image")
    d.add_argument("--image", required=True)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decompose)

    m = sub.add_parser("metrics", help="compare predicted maps against ground truth")
    m.add_argument("--pred", required=True)
    m.add_argument("--gt", required=True)
    m.add_argument("--out", help="directory for report.json and report.txt")
    m.add_argument("--json", action="store_true", help="print JSON instead of the table")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except ShadingNetError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())

"""``macnet`` command line: generate, train, eval, ablate, dump-attention."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="macnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write train/val JSONL and the vocabulary")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-n", type=int, default=20000)
    p.add_argument("--val-n", type=int, default=2000)
    p.add_argument("--grid", type=int, default=5)
    p.add_argument("--objects", type=int, nargs=2, default=(3, 8), metavar=("MIN", "MAX"))
    p.add_argument("--max-hops", type=int, default=2)
    p.add_argument("--paraphrase", type=float, default=0.0, help="synonym substitution probability")
    p.add_argument("--out-dir", default=None, help=f"defaults to ${harness.OUT_ENV}")

    def training_flags(p):
        p.add_argument("--config", default=None, help="flat key = value file")
        p.add_argument("--data-dir", required=True)
        p.add_argument("--out", default=None, help=f"defaults to ${harness.OUT_ENV}")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")

    training_flags(sub.add_parser("train", help="train one model"))

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    ema = p.add_mutually_exclusive_group()
    ema.add_argument("--use-ema", dest="use_ema", action="store_true", default=True)
    ema.add_argument("--raw", dest="use_ema", action="store_false", help="evaluate the raw weights")
    p.add_argument("--predictions", default=None, help="write per-example predictions here")

    p = sub.add_parser("ablate", help="train a grid of config variants under one seed")
    training_flags(p)
    p.add_argument("--grid-spec", required=True, help='"field=v1,v2; field2=..." or a JSON file')

    p = sub.add_parser("dump-attention", help="per-step word and grid attention for one instance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--instance", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--raw", dest="use_ema", action="store_false", default=True)
    return parser


def run(args) -> dict:
    if args.command == "generate":
        return harness.cmd_generate(args.seed, args.train_n, args.val_n, args.out_dir, grid=args.grid,
                                    objects=tuple(args.objects), max_hops=args.max_hops,
                                    paraphrase=args.paraphrase)
    if args.command == "train":
        return harness.cmd_train(args.data_dir, args.out, args.seed, args.config, _overrides(args.set))
    if args.command == "eval":
        return harness.cmd_eval(args.checkpoint, args.data, args.use_ema, args.predictions)
    if args.command == "ablate":
        result = harness.cmd_ablate(args.grid_spec, args.data_dir, args.out, args.seed, args.config,
                                    _overrides(args.set))
        print(harness.format_table(result["rows"]), end="", file=sys.stderr)
        return result
    if args.command == "dump-attention":
        dump = harness.cmd_dump_attention(args.checkpoint, args.data, args.instance, args.out, args.use_ema)
        print(dump.pop("text"), end="", file=sys.stderr)
        return dump
    raise ValueError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        result = run(args)
    except Exception as e:  # surfaced as machine-readable JSON
        print(json.dumps({"error": type(e).__name__, "message": str(e), "command": args.command}))
        return 2 if isinstance(e, (ValueError, KeyError, FileNotFoundError)) else 1
    print(json.dumps(result, indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command line: ``titans {train,eval,bench,selftest,gen}``.

Configuration comes from an optional ``--config`` file of ``key=value``
lines, then shortcut flags, then ``--set key=value`` overrides (last wins).
Exit codes: 0 success, 1 usage, 2 numerical failure, 3 config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from titans import __version__
from titans.config import RunConfig, parse_config, parse_pairs
from titans.errors import ConfigError, ContractError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# shortcut flag -> config key
_SHORTCUTS = {
    "variant": "variant", "steps": "steps", "task": "task", "lr": "lr",
    "batch_size": "batch_size", "seed": "seed", "data_seed": "data_seed",
    "seq_len": "seq_len", "mem_depth": "mem_depth", "chunk_size": "chunk_size",
}


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="file of key=value lines")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    for flag in _SHORTCUTS:
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, default=None)


def _run_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config is not None:
        cfg = parse_config(args.config.read_text(), cfg)
    pairs = {key: getattr(args, flag) for flag, key in _SHORTCUTS.items() if getattr(args, flag) is not None}
    for item in args.set:
        pairs.update(parse_pairs(item))
    return cfg.with_overrides(pairs)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="titans", description="Neural long-term memory models on synthetic tasks.")
    parser.add_argument("--version", action="version", version=f"titans {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write metrics plus a checkpoint")
    _add_config_args(p)
    p.add_argument("--out", type=Path, default=Path("runs/latest"), help="output directory")
    p.add_argument("--min-gap", type=int, default=0, help="sniah-toy: least needle-to-query distance")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    _add_config_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--batches", type=int, default=8)
    p.add_argument("--min-gap", type=int, default=0)

    p = sub.add_parser("bench", help="tokens/second of sequential vs chunked paths and per memory depth")
    _add_config_args(p)
    p.add_argument("--lengths", type=int, nargs="+", default=[4096])
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--depths", type=int, nargs="+", default=[1, 2, 3, 4])
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", type=Path, default=None, help="metrics file stem (writes .csv and .jsonl)")

    sub.add_parser("selftest", help="run the bundled oracle and property checks")

    p = sub.add_parser("gen", help="dump task instances as JSON lines")
    _add_config_args(p)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.add_argument("--min-gap", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help="output file (default: stdout)")
    return parser


def _cmd_train(args) -> int:
    from titans.train import train

    cfg = _run_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.txt").write_text(cfg.to_text())
    log = None if args.quiet else (
        lambda r: print(f"step {r.step:>6}  loss {r.loss:.4f}  acc {r.accuracy:.3f}  "
                        f"tok/s {r.tokens_per_sec:.0f}", flush=True))
    train(cfg.model, cfg.task, cfg.train, out_dir=args.out, min_gap=args.min_gap, log=log)
    print(f"checkpoint: {args.out / 'model.ttnc'}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from titans.model import load_checkpoint
    from titans.train import evaluate

    cfg = _run_config(args)
    model = load_checkpoint(args.checkpoint)
    result = evaluate(model, cfg.task, args.batches, cfg.train.batch_size, args.min_gap)
    print(json.dumps(result))
    return EXIT_OK


def _cmd_bench(args) -> int:
    from titans.bench import bench_throughput, format_table

    cfg = _run_config(args)
    results = bench_throughput(cfg.model, args.lengths, args.batch, args.depths,
                               repeats=args.repeats, metrics_stem=args.out)
    print(format_table(results))
    return EXIT_OK


def _cmd_selftest(args) -> int:
    from titans.selftest import run_selftest

    results = run_selftest()
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def _cmd_gen(args) -> int:
    from titans.tasks import make_batch

    cfg = _run_config(args)
    inputs, targets = make_batch(cfg.task, args.count, 0, args.split, args.min_gap)
    lines = "".join(json.dumps({"inputs": i.tolist(), "targets": t.tolist()}) + "\n"
                    for i, t in zip(inputs, targets))
    if args.out is None:
        sys.stdout.write(lines)
    else:
        args.out.write_text(lines)
    return EXIT_OK


_COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "bench": _cmd_bench,
             "selftest": _cmd_selftest, "gen": _cmd_gen}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_default_dtype(torch.float64)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

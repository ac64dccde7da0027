"""Command-line entry point: generate, train, eval, ablate, dump-attention.

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numeric failure.
Errors print a single ``error: <kind>: <reason>`` line on stderr.
"""

from __future__ import annotations

import argparse
import sys

from . import commands
from .checkpoint import CheckpointError
from .config import ConfigError
from .optim import NumericError
from .synth import DataError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bgnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    gen = sub.add_parser("generate", help="write train/val synthetic splits")
    gen.add_argument("--config")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--seed", type=int)

    tr = sub.add_parser("train", help="train one model")
    tr.add_argument("--config")
    tr.add_argument("--data", required=True, help="directory with train.jsonl and val.jsonl")
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--variant", choices=("bgn", "ban", "sdp"))
    tr.add_argument("--layers", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--resume", help="checkpoint to continue from")

    ev = sub.add_parser("eval", help="soft-accuracy report for a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True, help="dataset file or directory (uses val.jsonl)")
    ev.add_argument("--out", help="report path (default <checkpoint>.eval.json)")

    ab = sub.add_parser("ablate", help="train/evaluate the variant x layers x seed grid")
    ab.add_argument("--config")
    ab.add_argument("--data", required=True)
    ab.add_argument("--out", required=True, help="output directory")
    ab.add_argument("--cells", help="comma list like bgn:1,ban:1 (default: full grid)")

    dump = sub.add_parser("dump-attention", help="write per-layer attention maps for one record")
    dump.add_argument("--checkpoint", required=True)
    dump.add_argument("--data", required=True)
    dump.add_argument("--index", type=int, required=True)
    dump.add_argument("--out", required=True)
    return parser


def _parse_cells(text: str | None):
    if not text:
        return None
    cells = []
    for item in text.split(","):
        variant, _, layers = item.partition(":")
        if variant not in ("bgn", "ban", "sdp") or not layers.isdigit():
            raise UsageError(f"bad cell {item!r}; expected variant:L")
        cells.append((variant, int(layers)))
    return cells


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb == "generate":
            commands.cmd_generate(args.config, args.out, args.seed)
        elif args.verb == "train":
            if args.layers is not None and args.layers < 1:
                raise UsageError("--layers must be >= 1")
            commands.cmd_train(args.config, args.data, args.out, args.variant, args.layers, args.seed, args.resume)
        elif args.verb == "eval":
            commands.cmd_eval(args.checkpoint, args.data, args.out)
        elif args.verb == "ablate":
            commands.cmd_ablate(args.config, args.data, args.out, _parse_cells(args.cells))
        elif args.verb == "dump-attention":
            commands.cmd_dump_attention(args.checkpoint, args.data, args.index, args.out)
    except (UsageError, ConfigError) as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, IndexError, OSError) as exc:
        print(f"error: data: {exc}".replace("\n", " "), file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

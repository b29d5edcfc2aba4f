"""Command-line entry point.

    georec <tokenize|pretrain|posttrain|eval|ablate|gendata> --config FILE [--seed N] [--out DIR]

Exit codes: 0 success, 1 output directory locked or unexpected failure, 2 config error,
3 missing input, 4 data or degeneracy error (including training divergence).
"""
from __future__ import annotations

import argparse
import sys

from . import checkpoint, config, data, evaluation, pipeline, rl, tokenizer

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA = 0, 1, 2, 3, 4

_DATA_ERRORS = (data.DataError, tokenizer.TokenizerError, checkpoint.CheckpointError, evaluation.EvalError,
                rl.RewardError, FloatingPointError)


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="georec", description="Geography-aware generative recommendation.")
    p.add_argument("command", choices=pipeline.COMMANDS)
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--variant", action="append", default=None,
                   help="ablate only: variant to run, repeatable; overrides the config's variants")
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    try:
        cfg = config.load(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.variant:
            overrides["variants"] = tuple(args.variant)
        cfg = config.from_dict({**cfg.to_dict(), **overrides}) if overrides else cfg
        pipeline.run(args.command, cfg, args.out)
    except config.ConfigError as e:
        return _fail(EXIT_CONFIG, f"config error: {e}")
    except FileNotFoundError as e:
        return _fail(EXIT_MISSING, f"missing input: {e}")
    except _DATA_ERRORS as e:
        return _fail(EXIT_DATA, f"data error: {e}")
    except pipeline.LockError as e:
        return _fail(EXIT_FAIL, str(e))
    return EXIT_OK


def _fail(code: int, msg: str) -> int:
    print(f"georec: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())

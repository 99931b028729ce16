"""Command-line entry point.

Every RunConfig field is a flag (``--hidden-dim 32``, ``--disable-deficit``);
``--config FILE`` supplies a key=value file that flags override.  Failures
exit with status 1 and one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from .config import RunConfig, load_config
from .data import sessions_to_records, write_log
from .pipeline import PipelineError, cmd_eval, cmd_predict, cmd_preprocess, cmd_train
from .synthetic import SyntheticConfig, gen_synthetic

log = logging.getLogger("infodeficit")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction,
                           default=None)
        else:
            p.add_argument(flag, dest=f.name, default=None)


def _parse_past(items) -> list[tuple[str, list[str]]]:
    # given oldest first on the command line, stored most recent first
    out = []
    for item in items or []:
        query, _, urls = item.partition("::")
        out.append((query, [u for u in urls.split(",") if u]))
    return out[::-1]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="infodeficit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="segment, filter, split and encode a TSV log")
    _add_config_flags(p)

    p = sub.add_parser("gen-synthetic", help="write a synthetic TSV log")
    p.add_argument("--output", required=True)
    p.add_argument("--sessions", type=int, default=SyntheticConfig.n_sessions)
    p.add_argument("--lexicon-size", type=int, default=SyntheticConfig.vocab_size)
    p.add_argument("--deficit-strength", type=float, default=SyntheticConfig.deficit_strength)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model on preprocessed examples")
    _add_config_flags(p)
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint if it exists")

    p = sub.add_parser("eval", help="evaluate one or more checkpoints")
    _add_config_flags(p)
    p.add_argument("--ckpt", action="append", default=[], help="repeat for multi-seed means")
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--baseline", action="store_true", help="add the baseline row")

    p = sub.add_parser("predict", help="score one query with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--past", action="append", metavar="QUERY::URL1,URL2",
                   help="one past step, oldest first; repeatable")
    p.add_argument("--candidate", action="append", default=[])
    p.add_argument("--workdir", default=None, help="where vocab.tsv lives")
    return ap


def _config(args) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    return load_config(args.config, overrides)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    if args.command == "gen-synthetic":
        cfg = SyntheticConfig(n_sessions=args.sessions, vocab_size=args.lexicon_size,
                              seed=args.seed, deficit_strength=args.deficit_strength)
        sessions, _ = gen_synthetic(cfg)
        write_log(sessions_to_records(sessions), args.output)
        print(json.dumps({"sessions": len(sessions), "output": args.output}))
        return 0
    if args.command == "predict":
        rows = cmd_predict(args.ckpt, args.query, _parse_past(args.past), args.candidate,
                           args.workdir)
        for name, value in rows:
            print(f"{name}\t{value:.6f}")
        return 0
    cfg = _config(args)
    if args.command == "preprocess":
        report = cmd_preprocess(cfg)
    elif args.command == "train":
        report = cmd_train(cfg, resume=args.resume)
    else:
        report = cmd_eval(cfg, args.ckpt, args.split, args.baseline)
    sys.stdout.write(report.text())
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except PipelineError as exc:
        err = {"error": exc.code, "message": str(exc)}
    except (ValueError, KeyError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc).strip("'\"")}
    sys.stderr.write(json.dumps(err) + "\n")
    return 1


if __name__ == "__main__":
    sys.exit(main())

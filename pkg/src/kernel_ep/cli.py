"""Command-line entry point: ``kernel-ep <verb> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import KernelEPError, PreconditionError
from .experiments import (
    EXPERIMENTS,
    KL_HEADER,
    collect_pool,
    evaluate_operator,
    kl_summary,
    load_config,
    load_messages,
    run_experiment,
    save_messages,
    train_operator,
    write_csv,
)
from .kjit import load_operator, save_operator

log = logging.getLogger("kernel_ep")


def _overrides(pairs: Optional[List[str]]):
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise PreconditionError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_run(args) -> int:
    cfg = load_config(args.config, _overrides(args.set))
    res = run_experiment(cfg, args.output_dir)
    print(f"{cfg.experiment}: wrote {len(res.artifacts)} artifacts to {res.output_dir}")
    for k, v in res.summary.items():
        print(f"  {k} = {v}")
    return 0


def cmd_collect(args) -> int:
    cfg = load_config(args.config, _overrides(args.set))
    pool = collect_pool(cfg, np.random.SeedSequence(cfg.seed))
    out = Path(args.out or Path(cfg.output_dir) / "messages.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_messages(out, pool)
    print(f"collected {len(pool)} messages into {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args.set))
    if args.messages:
        records = load_messages(args.messages)
    else:
        records = collect_pool(cfg, np.random.SeedSequence(cfg.seed))
    records = [r for r in records if r[1] == args.target]
    if args.limit:
        records = records[:args.limit]
    if len(records) < 2:
        raise PreconditionError(f"need at least two messages towards neighbour {args.target}")
    op, chosen = train_operator(records, cfg, seed=cfg.seed)
    out = Path(args.out or Path(cfg.output_dir) / "operator.npz")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_operator(op, out)
    print(f"trained on {len(records)} messages; saved {out}")
    for k, v in chosen.items():
        print(f"  {k} = {v}")
    return 0


def cmd_eval(args) -> int:
    op = load_operator(args.operator)
    records = [r for r in load_messages(args.messages) if r[1] == op.target_var]
    if not records:
        raise PreconditionError(f"no messages towards neighbour {op.target_var} in {args.messages}")
    rows = evaluate_operator(op, records)
    if args.out:
        write_csv(args.out, KL_HEADER, rows)
    for k, v in kl_summary(rows):
        print(f"{k} = {v}")
    return 0


def cmd_report(args) -> int:
    out = Path(args.output_dir)
    summary = out / "summary.txt"
    if not summary.is_file():
        raise PreconditionError(f"{out} holds no summary.txt; run an experiment first")
    print(summary.read_text(), end="")
    print("artifacts:")
    for p in sorted(out.iterdir()):
        print(f"  {p.name} ({p.stat().st_size} bytes)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kernel-ep", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def with_config(p):
        p.add_argument("config", help="INI experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        return p

    p = with_config(sub.add_parser("run", help=f"run an experiment ({', '.join(EXPERIMENTS)})"))
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_run)

    p = with_config(sub.add_parser("collect-messages", help="log logistic-factor messages from EP runs"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_collect)

    p = with_config(sub.add_parser("train-operator", help="batch-train a learned operator"))
    p.add_argument("--messages", help="messages CSV (collected afresh when omitted)")
    p.add_argument("--target", type=int, default=0, help="neighbour the operator sends to")
    p.add_argument("--limit", type=int, default=0, help="use at most this many messages")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-operator", help="log KL of a saved operator on a messages file")
    p.add_argument("operator")
    p.add_argument("messages")
    p.add_argument("--out", help="write per-message rows to this CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="print an experiment's summary")
    p.add_argument("output_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except KernelEPError as exc:
        print(f"error in {args.verb}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

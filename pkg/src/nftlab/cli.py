"""Command line: ``nftlab <command> [--config PATH] [--seed N] [--out DIR] [--override key=value ...]``.

Exit status is 0 on success, 1 when a run or check fails and 2 for usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from .checkpoint import CheckpointError
from .config import load_config
from .errors import RunAbortedError, TrainingDivergedError

log = logging.getLogger("nftlab")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="dotted config override, repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="nftlab", description="Negative-aware flow-matching finetuning lab")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    sub.add_parser("pretrain", parents=[common], help="fit the base velocity model")
    for method in ("nft", "grpo", "rft"):
        p = sub.add_parser(f"rl-{method}", parents=[common], help=f"finetune with {method}")
        p.add_argument("--init", help="pretrained checkpoint (default <out>/pretrain.ckpt, trained if missing)")
        p.add_argument("--force", action="store_true", help="load a checkpoint whose config digest differs")

    p = sub.add_parser("eval", parents=[common], help="mean reward of a checkpoint")
    p.add_argument("--checkpoint", help="default <out>/nft/final.ckpt")
    p.add_argument("--samples", type=int)

    p = sub.add_parser("verify", parents=[common], help="run the numerical identity suites")
    p.add_argument("--full", action="store_true", help="also run convergence-order and marginal checks")

    p = sub.add_parser("ablate", parents=[common], help="sweep one finetuning axis")
    p.add_argument("--axis", required=True, choices=("beta", "eta", "weighting", "sampler", "negative"))
    p.add_argument("--values", required=True, help="comma-separated values, e.g. 0.1,1")

    p = sub.add_parser("plot", parents=[common], help="reward curves from metrics CSV files to SVG")
    p.add_argument("csv", nargs="*", help="metrics files (default: every <out>/*/metrics.csv)")
    p.add_argument("--phase", default="eval", choices=("eval", "rollout"))
    p.add_argument("--svg", help="output file (default <out>/rewards.svg)")
    return parser


def _cmd_pretrain(cfg, args):
    from .runs import run_pretrain

    run_pretrain(cfg)
    print(f"pretrained model written to {Path(cfg.out) / 'pretrain.ckpt'}")
    return 0


def _cmd_rl(cfg, args, method):
    from .runs import run_rl, summarize

    result = run_rl(cfg, method, init=args.init, force=args.force)
    s = summarize(result.rows)
    print(f"{method}: final eval reward {s['final_eval']:.4f} (best {s['best_eval']:.4f}); outputs in {Path(cfg.out) / method}")
    return 0


def _cmd_eval(cfg, args):
    from .runs import run_eval

    path = args.checkpoint or Path(cfg.out) / "nft" / "final.ckpt"
    score = run_eval(cfg, path, args.samples)
    print(f"mean reward {score:.6f}  ({path})")
    return 0


def _cmd_verify(cfg, args):
    from .verify import run_suites

    results = run_suites(full=args.full)
    return 0 if all(r.passed for r in results) else 1


def _cmd_ablate(cfg, args):
    from .runs import run_ablation

    values = [v for v in args.values.split(",") if v.strip()]
    summary = run_ablation(cfg, args.axis, values)
    print(f"{'value':>12} {'early_slope':>12} {'final_eval':>11} {'best_eval':>10}")
    for row in summary:
        print(f"{str(row['value']):>12} {row['early_slope']:>12.5f} {row['final_eval']:>11.4f} {row['best_eval']:>10.4f}")
    print(f"summary written to {Path(cfg.out) / f'ablate_{args.axis}' / 'summary.csv'}")
    return 0


def _cmd_plot(cfg, args):
    from .plotting import line_chart, reward_curves, write_svg

    paths = [Path(p) for p in args.csv] or sorted(Path(cfg.out).glob("**/metrics.csv"))
    if not paths:
        print(f"no metrics files found under {cfg.out}", file=sys.stderr)
        return 1
    labels = [str(p.parent.relative_to(cfg.out)) if p.is_relative_to(cfg.out) else p.parent.name for p in paths]
    svg = line_chart(
        reward_curves(paths, labels, args.phase),
        title=f"mean raw reward ({args.phase})",
        xlabel="iteration",
        ylabel="mean raw reward",
    )
    target = write_svg(args.svg or Path(cfg.out) / "rewards.svg", svg)
    print(f"wrote {target}")
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.override, args.seed, args.out)
    except (OSError, ValueError, ValidationError) as exc:
        print(f"error: cannot load config: {exc}", file=sys.stderr)
        return 2
    handlers = {
        "pretrain": _cmd_pretrain,
        "rl-nft": lambda c, a: _cmd_rl(c, a, "nft"),
        "rl-grpo": lambda c, a: _cmd_rl(c, a, "grpo"),
        "rl-rft": lambda c, a: _cmd_rl(c, a, "rft"),
        "eval": _cmd_eval,
        "verify": _cmd_verify,
        "ablate": _cmd_ablate,
        "plot": _cmd_plot,
    }
    try:
        return handlers[args.command](cfg, args)
    except (CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RunAbortedError, TrainingDivergedError) as exc:
        print(f"error: run aborted: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

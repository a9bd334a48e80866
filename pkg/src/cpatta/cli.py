"""Command line entry point: ``cpatta run --config run.yaml [overrides]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, dump_config, load_config
from .harness import RunError, emit, format_efficiency, run
from .stream import StreamError

# option name -> config key
OVERRIDES = {
    "alpha": ("alpha", float),
    "k": ("k", int),
    "temperature": ("temperature", float),
    "selection": ("selection", str),
    "weighting": ("weighting", str),
    "n_human": ("n_human", int),
    "n_human_shift": ("n_human_shift", int),
    "n_model": ("n_model", int),
    "budget": ("budget", int),
    "eta_h": ("eta_h", float),
    "eta_m": ("eta_m", float),
    "seed": ("seed", int),
    "stream": ("stream", str),
    "features": ("features", str),
    "out": ("out", str),
    "format": ("format", str),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpatta", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run the adaptation loop on a stream")
    p.add_argument("--config", help="YAML key-value config file")
    p.add_argument("--alpha", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--selection", choices=["cp", "random"])
    p.add_argument("--weighting", choices=["adaptive", "uniform", "geometric"])
    p.add_argument("--n-human", dest="n_human", type=int)
    p.add_argument("--n-human-shift", dest="n_human_shift", type=int)
    p.add_argument("--n-model", dest="n_model", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--eta-h", dest="eta_h", type=float)
    p.add_argument("--eta-m", dest="eta_m", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--stream", choices=["synthetic", "file"])
    p.add_argument("--features", help="feature file for --stream file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", choices=["jsonl", "csv"])
    p.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = {key: getattr(args, opt) for opt, (key, _) in OVERRIDES.items()}
    try:
        cfg = load_config(args.config, overrides)
        if args.print_config:
            sys.stdout.write(dump_config(cfg))
            return 0
        seeds = cfg.seeds()
        for seed in seeds:
            records, summary = run(cfg, seed)
            if cfg.out:
                out = Path(cfg.out) / f"seed_{seed}" if len(seeds) > 1 else Path(cfg.out)
                emit(records, summary, out, cfg.format)
            print(
                f"seed={seed} realtime_acc={summary.realtime_accuracy:.4f} "
                f"post_acc={summary.post_adaptation_accuracy:.4f} "
                f"gap_rt={summary.coverage_gap_rt:.4f} gap_pre={summary.coverage_gap_pre:.4f} "
                f"eff_h={format_efficiency(summary.eff_h)} eff_m={format_efficiency(summary.eff_m)} "
                f"budget={summary.budget_used}/{summary.budget_total}"
            )
    except (ConfigError, StreamError, RunError) as exc:
        print(f"cpatta: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

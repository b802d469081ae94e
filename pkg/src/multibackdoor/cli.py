"""Command line entry point: ``multibackdoor {run,sweep,ablate-replay} <config> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .attack import ConfigError
from .config import load_config
from .experiment import SWEEP_PARAMS, ablate_replay, run_experiment, summary_text, sweep
from .federation import DEFENSES

log = logging.getLogger("multibackdoor")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="experiment config file (key = value lines, [attacker] sections)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (default: the config's 'out' key)")
    common.add_argument("--defense", choices=DEFENSES, help="override the aggregation defense")
    common.add_argument("--jobs", type=int, help="threads for client training within a round")
    common.add_argument("-v", "--verbose", action="store_true", help="log every evaluated round")

    p = argparse.ArgumentParser(prog="multibackdoor", description="Federated multi-target backdoor simulator")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run one experiment")
    sw = sub.add_parser("sweep", parents=[common], help="one run per value of a sensitivity factor")
    sw.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    sw.add_argument("--values", required=True,
                    help="comma-separated values, e.g. 80,90,100 or 15:15,20:20 for block_position")
    sw.add_argument("--stealth-only", action="store_true", help="skip training, report PSNR/SSIM/energy only")
    sub.add_parser("ablate-replay", parents=[common], help="the config with and without backdoor replay")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, validate=False)
        over = {k: v for k, v in (("seed", args.seed), ("defense", args.defense), ("n_jobs", args.jobs))
                if v is not None}
        cfg = replace(cfg, **over)
        if args.out:
            cfg = replace(cfg, out=args.out)
        cfg.validate()
        out = Path(cfg.out)
        if args.command == "run":
            res = run_experiment(cfg, out)
            sys.stdout.write(summary_text(res.summary))
        elif args.command == "sweep":
            values = [v for v in args.values.split(",") if v.strip()]
            rows = sweep(cfg, args.param, values, out, run=not args.stealth_only)
            for r in rows:
                print(", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
        else:
            results = ablate_replay(cfg, out)
            for name, res in results.items():
                asr30 = [res.summary[f"attacker_{i + 1}_asr30"] for i in range(len(res.config.attackers))]
                shown = " ".join("na" if v is None else f"{v:.3f}" for v in asr30)
                print(f"{name}: final_acc={res.final_acc:.3f} asr30=[{shown}]")
        print(f"outputs written to {out}", file=sys.stderr)
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``flusmc <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .mcmc import McmcConfig

THREADS_ENV = "FLUSMC_THREADS"


def _days(text: str) -> list[int]:
    return [int(t) for t in text.replace(";", ",").split(",") if t.strip()]


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default="reduced", help="built-in setting name or YAML path (default: reduced)")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--threads", type=int, default=None, help=f"worker threads (default: ${THREADS_ENV} or all cores)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="flusmc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="draw a synthetic surveillance data set")
    p.add_argument("--scenario", default="1")

    p = sub.add_parser("mcmc", parents=[common], help="reference posterior by adaptive random-walk Metropolis")
    p.add_argument("--data", required=True)
    p.add_argument("--scenario", default="1")
    p.add_argument("--day", type=_days, required=True, help="analysis day(s), comma separated")
    p.add_argument("--iters", type=int, default=100_000)
    p.add_argument("--burn-in", type=int, default=None)
    p.add_argument("--thin", type=int, default=10)

    p = sub.add_parser("smc", parents=[common], help="sequential Monte Carlo over daily batches")
    p.add_argument("--data", required=True)
    p.add_argument("--scenario", default="1")
    p.add_argument("--mode", choices=("discrete", "continuous"), default="continuous")
    p.add_argument("--kernel", default="hybrid")
    p.add_argument("--ra-star", type=float, default=0.1)
    p.add_argument("--particles", type=int, default=10_000)
    p.add_argument("--stopping", choices=("icc", "fixed"), default="icc")
    p.add_argument("--fixed-iters", type=int, default=1)
    p.add_argument("--last-day", type=int, default=None, help="default: last day of the data")
    p.add_argument("--start-day", type=int, default=0, help="day of the MCMC sample given by --init-mcmc")
    p.add_argument("--init-mcmc", default=None, help="directory with posterior.csv to seed the particles")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--snapshot-days", type=_days, default=[])
    p.add_argument("--no-score", action="store_true", help="skip one-step-ahead predictive scores")

    p = sub.add_parser("compare", parents=[common], help="Gaussian KL of SMC from MCMC posteriors by day")
    p.add_argument("--smc", required=True)
    p.add_argument("--mcmc", required=True)
    p.add_argument("--exclude", nargs="*", default=["beta_B"])

    p = sub.add_parser("diagnose", parents=[common], help="PIT histograms and RPS z statistics of an SMC run")
    p.add_argument("--run", required=True, nargs="+")

    p = sub.add_parser("forecast", parents=[common], help="predictive bands from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--horizon", type=int, default=20)

    p = sub.add_parser("pipeline", parents=[common], help="full landmark protocol")
    p.add_argument("--scenario", default="1")
    p.add_argument("--particles", type=int, default=10_000)
    p.add_argument("--iters", type=int, default=100_000)
    p.add_argument("--burn-in", type=int, default=None)
    p.add_argument("--thin", type=int, default=10)
    p.add_argument("--mode", choices=("discrete", "continuous"), default="continuous")
    p.add_argument("--kernel", default="hybrid")
    p.add_argument("--ra-star", type=float, default=0.1)
    p.add_argument("--landmarks", type=_days, default=None)
    p.add_argument("--kl-days", type=_days, default=None)
    p.add_argument("--horizon", type=int, default=20, help="forecast horizon after the last landmark")
    p.add_argument("--no-score", action="store_true")
    p.add_argument("--dry-run", action="store_true", help="validate the configuration and print the plan")
    return parser


def resolve_threads(flag: int | None) -> int | None:
    if flag is not None:
        return flag
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from . import pipeline as pl

    try:
        cfg = load_config(args.config)
        pl.set_threads(resolve_threads(args.threads))
        out = Path(args.out)
        if args.command == "simulate":
            cfg.streams(args.scenario)
            _, _, files = pl.simulate_stage(cfg, args.scenario, args.seed, out)
        elif args.command == "mcmc":
            data = pl.load_data(args.data, cfg)
            burn = args.burn_in if args.burn_in is not None else args.iters // 5
            mc = McmcConfig(iterations=args.iters, burn_in=burn, thin=args.thin, seed=args.seed)
            seeds = {d: pl.derive_seed(args.seed, "mcmc", d) for d in args.day}
            _, files = pl.mcmc_stage(cfg, data, args.scenario, args.day, mc, out, seeds)
        elif args.command == "smc":
            data = pl.load_data(args.data, cfg)
            st = pl.SmcSettings(scenario=args.scenario, mode=args.mode, kernel=args.kernel, r_A_star=args.ra_star,
                                particles=args.particles, seed=args.seed, stopping=args.stopping,
                                fixed_iters=args.fixed_iters, score=not args.no_score,
                                snapshot_days=tuple(args.snapshot_days))
            st.kernel_config()
            last = args.last_day or data.n_days
            kw = {}
            if args.resume:
                from . import checkpoint as ckpt

                kw["resume"], _ = ckpt.load(args.resume)
            elif args.init_mcmc:
                draws, names = pl.read_posterior(Path(args.init_mcmc) / "posterior.csv")
                if args.start_day not in draws:
                    raise ConfigError(f"no MCMC draws for day {args.start_day} in {args.init_mcmc}")
                space = pl.transform_space(names)
                th = np.zeros((draws[args.start_day].shape[0], len(pl.NAMES)))
                th[:, space.free_index] = draws[args.start_day]
                z = space.to_unconstrained(th)
                kw["start_z"] = pl.seed_from_chain(z, args.particles, np.random.default_rng(args.seed))
                kw["start_day"] = args.start_day
            res = pl.smc_stage(cfg, data, st, out, last, **kw)
            files = res["files"]
            for w in res["warnings"]:
                print(f"warning: {w}", file=sys.stderr)
        elif args.command == "compare":
            files = pl.compare_stage(args.smc, args.mcmc, out, tuple(args.exclude))
        elif args.command == "diagnose":
            files = pl.diagnose_stage(args.run, out)
        elif args.command == "forecast":
            files = pl.forecast_stage(args.checkpoint, args.horizon, out, seed=args.seed)
        elif args.command == "pipeline":
            st = pl.PipelineSettings(scenario=args.scenario, seed=args.seed, particles=args.particles,
                                     mcmc_iterations=args.iters, mcmc_burn_in=args.burn_in, mcmc_thin=args.thin,
                                     mode=args.mode, kernel=args.kernel, r_A_star=args.ra_star,
                                     landmarks=tuple(args.landmarks) if args.landmarks else None,
                                     kl_days=tuple(args.kl_days) if args.kl_days is not None else None,
                                     forecast_horizon=args.horizon, score=not args.no_score)
            manifest = pl.pipeline_run(cfg, st, out, dry_run=args.dry_run)
            if args.dry_run:
                print(json.dumps(manifest["plan"], indent=2))
                return 0
            files = [out / f for f in manifest["files"]] + [out / "manifest.json"]
        else:  # pragma: no cover - argparse enforces the choices
            raise AssertionError(args.command)
    except pl.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for f in files:
        print(f)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

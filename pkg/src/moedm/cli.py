"""Command-line entry point: ``moedm <command> [--config FILE] [--set section.key=value ...]``.

Exit codes: 0 success, 2 verification failure, 3 missing prerequisite,
4 configuration error (including a stage built from a different config).
The environment variable ``MOEDM_RUNS`` overrides ``run.root``.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

from . import checks
from . import pipeline as pl
from .config import ConfigError, load_config
from .rl import ALGOS

EXIT_OK, EXIT_VERIFY, EXIT_MISSING, EXIT_CONFIG = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML experiment config (defaults apply to missing keys)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")
    p.add_argument("--name", help="run name (shorthand for --set run.name=...)")
    p.add_argument("--seed", type=int, help="shorthand for --set run.seed=...")
    p.add_argument("--workers", type=int, help="evaluation processes (0 = all cores)")
    p.add_argument("--force", action="store_true", help="rebuild outputs and accept upstream config mismatches")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moedm", description="Mixture-of-experts dialogue management pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "generate the offline conversation corpus",
        "train-primitive": "train the encoder, decoder and primitive latent prior",
        "train-experts": "train one latent expert per intent",
        "collect": "roll out the behavior policy and build the latent dataset",
        "train-rl": "train offline RL dialogue managers",
        "evaluate": "roll out trained managers against the user simulator",
        "report": "aggregate evaluations into results and table CSVs",
        "verify": "run the oracle-equivalence checks",
    }
    p = {}
    for name, text in helps.items():
        p[name] = sub.add_parser(name, help=text, description=text)
        _common(p[name])
    p["train-rl"].add_argument("--algo", action="append", choices=ALGOS,
                               help="algorithm to train; repeatable (default: config list)")
    p["evaluate"].add_argument("--mode", action="append", choices=("mf", "mb"), help="candidate scoring; repeatable")
    p["evaluate"].add_argument("--algo", action="append", choices=ALGOS, help="algorithm to evaluate; repeatable")
    p["verify"].add_argument("--quick", action="store_true", help="reduced sizes (seconds instead of minutes)")
    p["verify"].add_argument("--planning", action="store_true",
                             help="also train planners on fresh data over 5 seeds and compare to the greedy gap (slow)")
    p["verify"].add_argument("--write-fixtures", action="store_true",
                             help="write fixtures/oracle.json into the run directory")
    return parser


def _config(args):
    overrides = list(args.overrides)
    if os.environ.get("MOEDM_RUNS"):
        overrides.insert(0, f"run.root={_quote(os.environ['MOEDM_RUNS'])}")
    if args.name:
        overrides.append(f"run.name={_quote(args.name)}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"run.workers={args.workers}")
    return load_config(args.config, overrides)


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def verify(run: pl.Run, quick: bool = False, planning: bool = False, out=print) -> bool:
    """Run every check, print one line each, and return whether all passed."""
    results = list(checks.oracle_checks(pl.env_config(run.cfg) if run.cfg.env.noise_free else None))
    results.append(checks.kl_spot_checks())
    results.append(checks.gradient_check(range(10 if quick else 100)))
    results.append(checks.expectile_check(20 if quick else 200))
    results.append(checks.iql_chain_check(4000 if quick else 20_000))
    results.append(checks.ftle_heads_check(4000 if quick else 20_000))
    results.extend(checks.moevrl_check(4000 if quick else 20_000))
    results.append(checks.attribution_check(100 if quick else 500))
    results.append(checks.saiql_identity_check(20 if quick else 100))
    man = run.manifest()
    if "experts" in man:
        results.append(checks.expert_gap_check(run.path("reports/experts.csv")))
    if planning:
        results.extend(checks.planning_checks(run.cfg, pl.load_experts(run), run.log))
    for c in results:
        out(c.line())
    n_fail = sum(not c.ok for c in results)
    out(f"{len(results) - n_fail}/{len(results)} checks passed")
    return n_fail == 0


def run_command(args) -> int:
    cfg = _config(args)
    run = pl.Run(cfg, force=args.force)
    t0 = time.perf_counter()
    cmd = args.command
    if cmd == "gen-data":
        pl.gen_data(run)
    elif cmd == "train-primitive":
        pl.train_primitive(run)
    elif cmd == "train-experts":
        pl.train_experts(run)
    elif cmd == "collect":
        pl.collect(run)
    elif cmd == "train-rl":
        pl.train_rl(run, args.algo)
    elif cmd == "evaluate":
        pl.evaluate(run, args.mode, args.algo)
    elif cmd == "report":
        _, body = pl.report(run)
        sys.stdout.write(body)
    elif cmd == "verify":
        if args.write_fixtures:
            pl.write_fixtures(run)
        ok = verify(run, quick=args.quick, planning=args.planning)
        run.log(f"verify: {'pass' if ok else 'fail'} in {time.perf_counter() - t0:.1f}s")
        return EXIT_OK if ok else EXIT_VERIFY
    run.log(f"{cmd}: done in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run_command(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.StageMismatch as e:
        print(f"stage mismatch: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.MissingPrerequisite as e:
        print(f"missing prerequisite: {e}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``synflow {prune,sweep,verify,imp}``.

Every subcommand writes its report to ``--out`` (or stdout) in ``--format``
csv or json.  The exit status is 1 when a verifier fails or a run crashes
and 0 otherwise.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .netgraph import build_network, max_compression
from .pruner import CompressionSchedule, prune
from .harness.experiments import ExperimentConfig, ScorerSpec, imp_toy, make_dataset, make_scorer, run_sweep
from .harness.report import FORMATS, emit, to_csv, to_json
from .harness.verify import run_verification
from .scoring import SCORERS

log = logging.getLogger("synflow")


def _write(report, args) -> None:
    if args.out:
        path = emit(report, args.format, args.out)
        log.info("wrote %s", path)
    else:
        sys.stdout.write(to_json(report) if args.format == "json" else to_csv(report))


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "scorer", None):
        cfg.scorers = [ScorerSpec(args.scorer, args.iterations)]
    elif getattr(args, "iterations", None) is not None:
        cfg.scorers = [ScorerSpec(s.kind, args.iterations, s.label) for s in cfg.scorers]
    if getattr(args, "schedule", None):
        cfg.schedule = args.schedule
    if args.seed is not None:
        cfg.seeds = [args.seed + k for k in range(len(cfg.seeds))]
    return cfg


def cmd_prune(args) -> int:
    cfg = _config(args)
    spec = cfg.spec
    seed = cfg.seeds[0]
    scorer = cfg.scorers[0]
    params = build_network(spec, seed)
    dataset = make_dataset(spec, cfg.dataset, seed)
    rho = args.rho if args.rho is not None else max_compression(spec)
    report = prune(spec, params, make_scorer(scorer, dataset, seed, cfg.per_class),
                   CompressionSchedule(rho, scorer.iterations, cfg.schedule))
    log.info("%s rho=%g: remaining %s, collapsed=%s, max prune/cut ratio %.3g", scorer.name, rho, report.remaining,
             report.collapsed, report.max_ratio)
    _write(report, args)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.rho is not None:
        cfg.grid = [args.rho]

    def progress(cell):
        log.info("%-16s seed=%d rho=%-10.4g collapsed=%d accuracy=%.3f", cell.scorer, cell.seed, cell.rho,
                 cell.collapsed, cell.accuracy)

    report = run_sweep(cfg, progress)
    for row in report.summary():
        log.info("%-16s rho=%-10.4g collapsed %d/%d accuracy min/mean/max %.3f/%.3f/%.3f", row.scorer, row.rho,
                 row.collapsed_runs, row.runs, row.accuracy_min, row.accuracy_mean, row.accuracy_max)
    _write(report, args)
    crashed = [c for c in report.cells if c.crashed]
    for c in crashed:
        log.error("cell %s seed=%d rho=%g crashed: %s", c.scorer, c.seed, c.rho, c.reason)
    return 1 if crashed else 0


def cmd_verify(args) -> int:
    report = run_verification(args.seed or 0)
    for r in report.results:
        log.info("%-4s %-32s %-24s %.3g (tol %.0e)", "PASS" if r.passed else "FAIL", r.check, r.architecture,
                 r.value, r.tolerance)
    _write(report, args)
    return 0 if report.passed else 1


def cmd_imp(args) -> int:
    cfg = _config(args)
    spec = cfg.spec
    seed = cfg.seeds[0]
    params = build_network(spec, seed)
    dataset = make_dataset(spec, cfg.dataset, seed)
    cycles = args.iterations or 1
    rho = args.rho if args.rho is not None else 10.0
    result = imp_toy(spec, params, dataset, cycles, rho ** (1.0 / cycles), cfg.hyperparams)
    result.report.extra["accuracy"] = result.accuracy
    log.info("IMP %d cycles to rho=%g: remaining %s, collapsed=%s, test accuracy %.3f", cycles, rho,
             result.report.remaining, result.report.collapsed, result.accuracy)
    _write(result.report, args)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synflow", description="Pruning at initialization without data.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scorer=True):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="base seed (overrides the config)")
        p.add_argument("--out", help="output file; stdout if omitted")
        p.add_argument("--format", choices=FORMATS, default="csv")
        if scorer:
            p.add_argument("--scorer", choices=SCORERS)
            p.add_argument("--rho", type=float, help="compression ratio")
            p.add_argument("--iterations", type=int, help="pruning iterations n (IMP: cycles)")
            p.add_argument("--schedule", choices=("linear", "exponential"))

    p = sub.add_parser("prune", help="prune one network at initialization (default rho: maximal compression)")
    common(p)
    p.set_defaults(func=cmd_prune)
    p = sub.add_parser("sweep", help="prune, train and test over a compression grid")
    common(p)
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("verify", help="run the conservation verification suite")
    common(p, scorer=False)
    p.set_defaults(func=cmd_verify)
    p = sub.add_parser("imp", help="toy iterative magnitude pruning with rewinding")
    common(p)
    p.set_defaults(func=cmd_imp)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except Exception as exc:
        log.error("error: %s", exc)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``layerfed run|grid|report``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ScenarioKind, parse_config
from .errors import LayerFedError
from .runner import (ScenarioSummary, grid_search, prepare_data, read_metrics, run_experiment,
                     write_report)


def _load(args):
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, federation=replace(cfg.federation, seed=args.seed))
    if args.scenario:
        cfg = replace(cfg, scenarios=[ScenarioKind.parse(s) for s in args.scenario]).validate()
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(args.output or cfg.output_dir)
    logs = run_experiment(cfg, out)
    for name, mlog in logs.items():
        print(f"{name}: final accuracy {100 * mlog.final_accuracy:.2f}%")
    print(f"results written to {out}")
    return 0


def cmd_grid(args) -> int:
    cfg = _load(args)
    out = Path(args.output or cfg.output_dir)
    result = grid_search(cfg, out / "grid", jobs=args.jobs,
                         data=None if args.jobs > 1 else prepare_data(cfg))
    summaries = []
    for scenario in cfg.scenarios:
        best = result.best.get(scenario.value)
        if best is None:
            print(f"{scenario.value}: every grid point diverged")
            continue
        print(f"{scenario.value}: best point {best.index} {best.params} "
              f"-> {100 * best.final_accuracy:.2f}%")
        summaries.append(ScenarioSummary.from_log(scenario.label, result.best_log(scenario)))
    if summaries:
        write_report(summaries, out)
    print(f"grid table written to {out / 'grid' / 'grid.csv'}")
    return 0


def cmd_report(args) -> int:
    summaries = []
    for run_dir in args.runs:
        path = Path(run_dir)
        files = [path] if path.is_file() else sorted(path.glob("**/metrics.csv"))
        summaries += [read_metrics(f) for f in files]
    if not summaries:
        print("no metrics.csv files found", file=sys.stderr)
        return 1
    jpath, tpath = write_report(summaries, args.output)
    print(tpath.read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layerfed", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, func, help_ in (("run", cmd_run, "run each configured scenario once"),
                              ("grid", cmd_grid, "expand the hyperparameter grid and run it")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config")
        p.add_argument("-o", "--output", help="output directory (default: experiment.output_dir)")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.add_argument("--scenario", action="append", help="run only this scenario (repeatable)")
        p.add_argument("-j", "--jobs", type=int, default=1, help="parallel grid points")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="tabulate final accuracies of finished runs")
    p.add_argument("runs", nargs="+", help="run directories or metrics.csv files")
    p.add_argument("-o", "--output", default=".", help="where to write report.json/report.txt")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except LayerFedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

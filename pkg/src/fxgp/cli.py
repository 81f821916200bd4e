"""Command-line entry point: ``fxgp synth|evolve|backtest|report|export``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal invariant violation.
"""
from __future__ import annotations

import argparse
import logging
import secrets
import sys
from pathlib import Path

from . import analytics as an
from .config import ConfigError, RunConfig
from .evolution import evolve, read_selection, write_artifact
from .market_data import DataError
from .scoring import compute_fitness
from .simulator import run_simulation
from .strategy_tree import StrategySyntaxError, TreeError, read_strategies, serialize, structure_stats

log = logging.getLogger("fxgp")

EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(args) -> RunConfig:
    if not args.config:
        raise UsageError("--config is required")
    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else None
    from .market_data import synthesize
    try:
        ds = synthesize(cfg.synth_spec(seed))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args, ".")
    path = out / "bars.csv"
    ds.to_csv(path)
    print(f"wrote {len(ds)} timestamps x {len(ds.instruments)} instruments "
          f"({len(ds.variables)} variables, {ds.n_days} trading days) to {path}")
    if "ranges" in cfg.data or "split_days" in cfg.data:
        sp = cfg.split(ds)
        for name in sp.PARTITIONS:
            part = sp.partition(name)
            print(f"{name}: {len(part)} datapoints, {part.n_days} days")
    return 0


def cmd_evolve(args) -> int:
    cfg = _load_config(args)
    if cfg.seed is None:
        cfg = cfg.with_seed(secrets.randbits(31))
        log.info("no seed given; drew %d", cfg.seed)
    ds = cfg.load_dataset()
    sp = cfg.split(ds)
    art = evolve(cfg.gp, sp, cfg.traded, cfg.sim, workers=args.workers)
    for a, b in zip(art.generations, art.generations[1:]):
        if b.best > a.best:
            raise AssertionError("best training fitness increased despite elitism")
    out = write_artifact(art, _out_dir(args, f"run_{cfg.seed}"), cfg.snapshot())
    profitable = sum(ind.f_t.value < 1.0 for ind in art.population)
    print(f"seed {cfg.seed}: best f_t {art.generations[-1].best!r}, "
          f"{profitable} profitable of {len(art.population)}")
    print(f"Tr selected {len(art.selected_tr)}, TrVa selected {len(art.selected_trva)}"
          + (" (no individual profitable on both training and validation)" if art.trva_empty else ""))
    if profitable == 0:
        print("no profitable strategy found on the training partition")
    print(f"artifact written to {out}")
    return 0


def _simulate_all(cfg: RunConfig, trees, partition_name: str, names):
    ds = cfg.load_dataset()
    part = cfg.split(ds).partition(partition_name)
    bench = an.buy_and_hold_benchmark(part, cfg.traded)
    cols = part.columns()
    for name, tree in zip(names, trees):
        missing = set(tree.variables()) - set(cols)
        if missing:
            raise DataError(f"{name}: unknown variables {sorted(missing)}")
    results, reports = [], []
    for name, tree in zip(names, trees):
        res = run_simulation(tree, part, cfg.traded, cfg.sim, columns=cols)
        results.append(res)
        reports.append(an.strategy_report(res, bench, name))
    return part, bench, results, reports


def cmd_backtest(args) -> int:
    cfg = _load_config(args)
    entries = read_strategies(Path(args.strategy_file), limits=None)
    if not entries:
        raise DataError(f"{args.strategy_file} contains no strategies")
    names = [f"line_{ln}" for ln, _ in entries]
    part, bench, results, reports = _simulate_all(cfg, [t for _, t in entries], args.partition, names)
    out = _out_dir(args, f"backtest_{args.partition}")
    rows = []
    for (ln, tree), res, rep in zip(entries, results, reports):
        fit = compute_fitness(res, cfg.gp.min_trades)
        (out / f"line_{ln}_eod.csv").write_text(an.series_csv(rep.days, rep.relative_nav, "relative_nav"))
        (out / f"line_{ln}_orders.csv").write_text(res.blotter_csv())
        rows.append({"line": ln, "strategy": serialize(tree), "fitness": fit.value,
                     "penalty": fit.penalty_reason, **res.summary()})
    (out / "reports.csv").write_text(an.reports_csv([bench] + reports))
    (out / "backtest.json").write_text(an.report_json([bench] + reports, {"strategies": rows,
                                                                          "partition": args.partition}))
    (out / "benchmark_eod.csv").write_text(an.series_csv(bench.days, bench.relative_nav, "relative_nav"))
    for rep, row in zip(reports, rows):
        rho = "n/a" if rep.pearson_rho is None else f"{rep.pearson_rho:.2f}"
        print(f"{rep.name}: return {rep.final_return:+.4%} days>0 {rep.days_gt0:.2%} rho {rho} "
              f"p {rep.binom_p:.3g} trades {rep.trade_count:.0f} win {rep.winning_ratio:.2%} "
              f"long {rep.long_ratio:.2%} mdd {rep.max_drawdown:.2%} fitness {row['fitness']!r}")
    return 0


def cmd_report(args) -> int:
    crit = args.criterion
    run_dirs = [Path(d) for d in args.run_dirs]
    cfgs = [RunConfig.from_file(d / "config.snapshot") for d in run_dirs]
    cfg = cfgs[0]
    if any(c.data != cfg.data or c.sim != cfg.sim for c in cfgs[1:]):
        raise ConfigError("run directories were produced from different data or simulation settings")
    runs_trees = [[s.tree for s in read_selection(d, crit)] for d in run_dirs]
    if not any(runs_trees):
        raise DataError(f"no {crit}-selected strategies in the given runs")
    ds = cfg.load_dataset()
    part = cfg.split(ds).partition(args.partition)
    bench = an.buy_and_hold_benchmark(part, cfg.traded)
    cols = part.columns()
    runs_reports = []
    for r, trees in enumerate(runs_trees, start=1):
        reps = []
        for k, tree in enumerate(trees, start=1):
            res = run_simulation(tree, part, cfg.traded, cfg.sim, columns=cols)
            reps.append(an.strategy_report(res, bench, f"run_{r}_rank_{k}"))
        runs_reports.append(reps)
    groups = an.group_reports(runs_reports, bench)
    table = [bench, groups["best_individual"], groups["winners_across_runs"], groups["best_run"],
             groups["global_average"], *groups["per_run_average"]]

    out = _out_dir(args, f"report_{crit.lower()}_{args.partition}")
    (out / "curves").mkdir(exist_ok=True)
    (out / "moving_average").mkdir(exist_ok=True)
    for rep in table + [m for reps in runs_reports for m in reps]:
        (out / "curves" / f"{rep.name}.csv").write_text(
            an.series_csv(rep.days, rep.relative_nav, "relative_nav"))
    for rep in [bench, groups["global_average"], *groups["per_run_average"]]:
        ma = an.moving_average(rep.daily_returns, args.window)
        full = ~ma.partial
        (out / "moving_average" / f"{rep.name}.csv").write_text(
            an.series_csv(rep.days[full], ma.values[full], f"ma{args.window}_daily_return"))
    structure = {f"run_{r}": structure_stats(trees, cfg.data["instruments"])
                 for r, trees in enumerate(runs_trees, start=1) if trees}
    all_trees = [t for trees in runs_trees for t in trees]
    structure["all"] = structure_stats(all_trees, cfg.data["instruments"])
    (out / "summary.csv").write_text(an.reports_csv(table))
    (out / "members.csv").write_text(an.reports_csv([m for reps in runs_reports for m in reps]))
    (out / "summary.json").write_text(an.report_json(table, {
        "criterion": crit, "partition": args.partition, "runs": [str(d) for d in run_dirs],
        "structure": structure}))
    for rep in table:
        print(f"{rep.name:>16}: members {rep.members:3d} return {rep.return_ratio:.4f} "
              f"days>0 {rep.days_gt0:.2%} trades {rep.trade_count:.1f}")
    print(f"report written to {out}")
    return 0


def cmd_export(args) -> int:
    run = Path(args.run_dir)
    sel = read_selection(run, args.criterion)
    lines = [f"# {args.criterion} selection exported from {run}"]
    for k, s in enumerate(sel, start=1):
        note = f"# rank={k} f_t={s.f_t!r}"
        if s.f_v is not None:
            note += f" f_v={s.f_v!r}"
        lines += [note, serialize(s.tree)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"exported {len(sel)} strategies to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration (YAML)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory (file for export)")
    common.add_argument("--workers", type=int, default=1, help="evaluation processes; never changes results")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="fxgp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write synthetic bars as CSV")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("evolve", parents=[common], help="run the GP and write a run artifact")
    s.set_defaults(func=cmd_evolve)

    s = sub.add_parser("backtest", parents=[common], help="simulate a strategy file on one partition")
    s.add_argument("strategy_file")
    s.add_argument("--partition", default="oos", choices=["training", "validation", "oos"])
    s.set_defaults(func=cmd_backtest)

    s = sub.add_parser("report", parents=[common], help="aggregate selected strategies across runs")
    s.add_argument("run_dirs", nargs="+")
    s.add_argument("--criterion", default="Tr", choices=["Tr", "TrVa"])
    s.add_argument("--partition", default="oos", choices=["training", "validation", "oos"])
    s.add_argument("--window", type=int, default=30, help="moving-average window in days")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("export", parents=[common], help="extract selected strategies to a strategy file")
    s.add_argument("run_dir")
    s.add_argument("--criterion", default="Tr", choices=["Tr", "TrVa"])
    s.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, StrategySyntaxError, TreeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except AssertionError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

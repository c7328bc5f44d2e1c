"""Command-line entry point: ``unsyncse {run,sweep,validate,report}``.

Exit codes: 0 success, 1 validation failure, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .chi2 import chi2_threshold
from .config import ConfigError, RunConfig, load_config, override
from .experiment import (ScenarioError, fpr_summary, group_for_pairing, run_paired, summary_from_metrics_files,
                         write_fpr_summary, write_metrics)
from .grid import CaseError, load_case
from .measurements import (GRL_TARGETS, MeterSigmas, ObservabilityError, PlanFunctions, build_plan,
                           flat_state, greedy_pmu_placement)

log = logging.getLogger("unsyncse")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

MANIFEST_NOTE = ("# Moderate asynchronicity is expressed through stagger_scale: 0.5 halves the\n"
                 "# per-group offset spread of floor(f_pmu / n_groups) ticks.\n")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--case", type=Path, help="case file (overrides the config)")
    common.add_argument("--config", type=Path, help="INI run configuration")
    common.add_argument("--output-dir", type=Path)
    common.add_argument("-v", "--verbose", action="store_true")

    grid = _Parser(add_help=False)
    grid.add_argument("--seed", type=int, action="append", help="repeatable")
    grid.add_argument("--jobs", type=int, default=None, help="worker processes (default: CPU count)")
    grid.add_argument("--mode", action="append", choices=("ideal", "traditional", "proposed"))
    grid.add_argument("--scada-period", type=float, action="append")
    grid.add_argument("--grl", action="append", choices=sorted(GRL_TARGETS))
    grid.add_argument("--horizon", type=float, help="seconds")

    p = _Parser(prog="unsyncse", description="State estimation with unsynchronized SCADA and PMU data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("run", parents=[common, grid], help="run one scenario (all modes given share a timeline)")
    sub.add_parser("sweep", parents=[common, grid], help="run the period x mode x GRL grid")
    sub.add_parser("validate", parents=[common], help="self-checks on a case file")
    sub.add_parser("report", parents=[common], help="rebuild summary tables from metric CSVs")
    return p


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = override(cfg, case_path=args.case, output_dir=args.output_dir)
    if hasattr(args, "mode"):
        cfg = override(cfg, seeds=_tuple(args.seed), modes=_tuple(args.mode),
                       scada_periods=_tuple(args.scada_period), grl_targets=_tuple(args.grl), horizon=args.horizon)
    return cfg.validate()


def _tuple(x):
    return None if x is None else tuple(x)


def _run_grid(cfg: RunConfig, jobs: int | None) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_manifest.ini").write_text(MANIFEST_NOTE + cfg.to_ini())
    bundles = group_for_pairing(cfg.scenarios())
    jobs = jobs or os.cpu_count() or 1
    if jobs > 1 and len(bundles) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(bundles))) as pool:
            results = list(pool.map(run_paired, bundles))
    else:
        results = [run_paired(b) for b in bundles]
    metrics = [m for r in results for m in r.values()]
    for m in metrics:
        write_metrics(m, out)
        log.info("%s: FPR %.2f%%, cumulative SE error %.4f", m.config.name, 100 * m.fpr, m.cum_se_error[-1])
    rows = fpr_summary(metrics)
    write_fpr_summary(rows, out / "fpr_summary.csv")
    print(_table(rows))
    return EXIT_OK


def _table(rows) -> str:
    lines = [f"{'GRL':<12}{'period':>8}{'mode':>14}{'FPR %':>10}{'tests':>9}"]
    for r in rows:
        lines.append(f"{r['grl']:<12}{r['scada_period']:>8g}{r['mode']:>14}{r['fpr_percent']:>10.2f}{r['test_count']:>9d}")
    return "\n".join(lines)


def cmd_run(args) -> int:
    cfg = _resolve(args)
    # one timeline: first period, GRL and seed; every configured mode rides along
    cfg = override(cfg, scada_periods=cfg.scada_periods[:1], grl_targets=cfg.grl_targets[:1], seeds=cfg.seeds[:1])
    return _run_grid(cfg, 1)


def cmd_sweep(args) -> int:
    return _run_grid(_resolve(args), args.jobs)


def cmd_validate(args) -> int:
    cfg = _resolve(args)
    checks: list[tuple[str, bool, str]] = []

    try:
        model = load_case(cfg.case_path)
        checks.append(("case parses", True, f"{model.n} buses, {len(model.active_branches)} branches"))
    except CaseError as exc:
        print(f"FAIL case parses: {exc}")
        return EXIT_FAIL

    pmu = greedy_pmu_placement(model, 11)
    plans = {}
    for grl in GRL_TARGETS:
        try:
            plans[grl] = build_plan(model, pmu, grl, MeterSigmas())
            checks.append((f"observable ({grl})", True, f"d = {plans[grl].d}"))
        except ObservabilityError as exc:
            checks.append((f"observable ({grl})", False, str(exc)))

    if "grl_3" in plans:
        plan = plans["grl_3"]
        fn = PlanFunctions(plan, model)
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(20):
            x = flat_state(model) + rng.normal(0, 0.02, model.n_state)
            _, jac = fn.h_and_jacobian(x)
            fd = np.empty_like(jac)
            step = 1e-6
            for k in range(model.n_state):
                e = np.zeros(model.n_state)
                e[k] = step
                fd[:, k] = (fn.h_and_jacobian(x + e)[0] - fn.h_and_jacobian(x - e)[0]) / (2 * step)
            worst = max(worst, np.linalg.norm(jac - fd) / np.linalg.norm(jac))
        checks.append(("Jacobian vs finite differences", worst <= 1e-5, f"relative error {worst:.2e}"))

    table = {(1, 0.95): 3.8415, (10, 0.95): 18.307, (100, 0.95): 124.342}
    err = max(abs(chi2_threshold(d, p) - v) for (d, p), v in table.items())
    checks.append(("chi-squared table", err <= 1e-3, f"max deviation {err:.1e}"))

    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_FAIL


def cmd_report(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.output_dir)
    files = sorted(out.glob("metrics_*.csv"))
    if not files:
        raise ConfigError(f"no metrics_*.csv files in {out}")
    rows = summary_from_metrics_files(files)
    write_fpr_summary(rows, out / "fpr_summary.csv")
    for f in files:
        data = np.genfromtxt(f, delimiter=",", names=True)
        series = np.column_stack([np.atleast_1d(data["tick"]), np.atleast_1d(data["cum_se_error"])])
        np.savetxt(out / f"cum_se_error_{f.stem[len('metrics_'):]}.csv", series, delimiter=",",
                   header="tick,cum_se_error", comments="", fmt=["%d", "%.17g"])
    print(_table(rows))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "validate": cmd_validate, "report": cmd_report}


def run_command(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CaseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ScenarioError as exc:
        print(f"scenario failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()

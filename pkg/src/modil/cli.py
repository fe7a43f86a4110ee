"""Command-line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 data error,
3 runtime error (divergence, failed run), 4 self-check failure,
130 interrupted (completed tasks are checkpointed; rerun to resume).

stdout carries progress lines such as ``strategy=bic seed=0 budget=400
task=3/8 acc=0.71``; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, load_config, validate
from .learners import IL_STRATEGIES, TrainingDivergedError
from .scenario import (Job, RunInterrupted, make_schedule, read_report_csv, read_summary_csv, run_jobs,
                       run_scenario, summarize, write_report_csv, write_summary_csv)
from .sigmod import Dataset, DatasetFormatError, make_dataset, read_dataset, write_dataset

log = logging.getLogger("modil")

EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME, EXIT_SELFCHECK, EXIT_INTERRUPT = 1, 2, 3, 4, 130


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _default_jobs() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _progress(line: str) -> None:
    print(line, flush=True)


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="INI run configuration")
    common.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="run seed (overrides [learner] seed)")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker processes")
    common.add_argument("--dry-run", action="store_true", default=argparse.SUPPRESS,
                        help="print what would be done and exit")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    p = _Parser(prog="modil", description="Class-incremental modulation recognition experiments.",
                parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a dataset file")
    g.add_argument("--output", metavar="FILE", help="dataset path (default: <out>/dataset.modil)")

    r = sub.add_parser("run", parents=[common], help="run the configured strategies")
    r.add_argument("--strategy", help="comma list overriding [learner] strategy")
    r.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)

    s = sub.add_parser("sweep", parents=[common], help="memory-budget sweep")
    s.add_argument("--budgets", required=True, help="ascending comma list, e.g. 100,200,400")
    s.add_argument("--seeds", type=int, default=3, help="number of seeds, starting at the run seed")
    s.add_argument("--strategy", help="comma list of IL strategies to sweep")
    s.add_argument("--no-reference", action="store_true", help="skip the Joint and Finetune reference runs")

    c = sub.add_parser("selfcheck", parents=[common], help="numeric release checks")
    c.add_argument("--inject-fault", metavar="LAYER", help=argparse.SUPPRESS)

    rp = sub.add_parser("report", parents=[common], help="re-render figures from existing CSVs")
    rp.add_argument("paths", nargs="+", help="output directories or CSV files")
    return p


# ---------------------------------------------------------------------------
# helpers


def _resolve(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.values["learner"]["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        cfg.values["output"]["directory"] = args.out
    if getattr(args, "strategy", None):
        cfg.values["learner"]["strategy"] = [s.strip() for s in args.strategy.split(",") if s.strip()]
    validate(cfg, source=cfg.source or "<defaults>")
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg["output"]["directory"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(cfg: RunConfig) -> Dataset:
    path = cfg["dataset"]["path"]
    if path:
        try:
            ds = read_dataset(path)
        except FileNotFoundError:
            raise DataError(f"dataset file not found: {path}") from None
        except DatasetFormatError as exc:
            raise DataError(f"{path}: {exc}") from None
        log.info("read %d frames from %s", len(ds), path)
        return ds
    return make_dataset(cfg["dataset"]["catalog"], **cfg.dataset_kwargs())


def _catalog(cfg: RunConfig, ds: Dataset) -> list[int]:
    names = cfg["dataset"]["catalog"]
    missing = [n for n in names if n not in ds.class_names]
    if missing:
        raise DataError(f"dataset lacks classes {missing}")
    return [ds.class_names.index(n) for n in names]


def _snrs(cfg: RunConfig, ds: Dataset) -> list[int]:
    present = sorted(set(int(s) for s in ds.snr_db))
    wanted = [s for s in cfg["dataset"]["snr_db"] if s in present]
    if not wanted:
        raise DataError(f"dataset has SNRs {present}, config asks for {cfg['dataset']['snr_db']}")
    return wanted


def _print_schedule(cfg: RunConfig, names: list[str], seeds) -> None:
    sch = cfg["schedule"]
    for seed in seeds:
        cs = seed if sch["class_seed"] is None else sch["class_seed"]
        schedule = make_schedule(names, sch["m"], sch["k"], cs)
        print(f"class_seed={cs} tasks={schedule.n_tasks}")
        for t, g in enumerate(schedule.groups):
            print(f"  task {t + 1}: {', '.join(g)}")


def _svg_name(stem: str, snr, n_snr: int) -> str:
    return f"{stem}.svg" if n_snr == 1 else f"{stem}_snr{snr}.svg"


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = _resolve(args)
    path = Path(args.output) if args.output else Path(cfg["output"]["directory"]) / "dataset.modil"
    d = cfg["dataset"]
    if getattr(args, "dry_run", False):
        print(f"would write {len(d['catalog'])} classes x {d['frames_per_class']} frames "
              f"x {len(d['snr_db'])} SNRs to {path}")
        return 0
    path.parent.mkdir(parents=True, exist_ok=True)
    ds = make_dataset(d["catalog"], **cfg.dataset_kwargs())
    write_dataset(path, ds)
    counts = {n: int((ds.labels == i).sum()) for i, n in enumerate(ds.class_names)}
    lines = [f"file: {path.name}", f"sha256: {ds.checksum()}", f"seed: {ds.seed}",
             f"frames: {len(ds)}", f"length: {ds.frame_length}",
             f"snr_db: {','.join(str(s) for s in d['snr_db'])}", f"classes: {len(ds.class_names)}"]
    lines += [f"  {n}: {c}" for n, c in counts.items()]
    Path(str(path) + ".manifest.txt").write_text("\n".join(lines) + "\n")
    cfg.write(path.parent / "config.ini")
    print(f"wrote {path} ({len(ds)} frames)")
    return 0


def _render_runs(reports, out: Path, snrs) -> None:
    from .plotting import plot_accuracy_curves
    for snr in snrs:
        subset = [r for r in reports if r.snr_db == snr]
        if subset:
            plot_accuracy_curves(subset, out / _svg_name("accuracy", snr, len(snrs)), title=f"SNR {snr} dB")


def cmd_run(args) -> int:
    cfg = _resolve(args)
    ds = _load_dataset(cfg)
    catalog = _catalog(cfg, ds)
    snrs = _snrs(cfg, ds)
    seed = cfg["learner"]["seed"]
    if getattr(args, "dry_run", False):
        _print_schedule(cfg, [ds.class_names[c] for c in catalog], [seed])
        print(f"strategies: {', '.join(cfg.strategies)}; snr_db: {', '.join(map(str, snrs))}")
        return 0
    out = _out_dir(cfg)
    cfg.write(out / "config.ini")
    ckpt_dir = out / "checkpoints"
    sch = cfg["schedule"]
    timing = cfg["output"]["timing"]
    jobs = []
    for snr in snrs:
        for strategy in cfg.strategies:
            lc = cfg.learner_config(strategy)
            ck = ckpt_dir / f"{strategy}_s{lc.seed}_b{lc.budget}_snr{snr}.npz"
            jobs.append(Job(lc, sch["m"], sch["k"], cfg.class_seed, snr, str(ck), timing))
    if args.stop_after is not None:
        reports = []
        for j in jobs:
            schedule = make_schedule(catalog, j.m, j.k, j.class_seed)
            reports.append(run_scenario(ds, schedule, j.cfg, j.snr_db, j.checkpoint, j.timing,
                                        stop_after=args.stop_after, progress=_progress))
    else:
        n = getattr(args, "jobs", None) or _default_jobs()
        reports = run_jobs(ds, jobs, catalog, n, _progress)
    if "csv" in cfg["output"]["formats"]:
        write_report_csv(out / "report.csv", reports)
    if "svg" in cfg["output"]["formats"]:
        _render_runs(reports, out, snrs)
    for r in reports:
        print(f"strategy={r.strategy} seed={r.seed} budget={r.budget} final={r.final_accuracy:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    try:
        budgets = [int(b) for b in args.budgets.split(",") if b.strip()]
    except ValueError:
        raise ConfigError(f"--budgets: not a comma list of integers: {args.budgets!r}") from None
    if not budgets or budgets != sorted(budgets):
        raise ConfigError("--budgets must be a non-empty ascending list")
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    swept = [s for s in cfg.strategies if s in IL_STRATEGIES]
    if not swept:
        raise ConfigError("sweep needs at least one of icarl, bic, lucir")
    refs = [] if args.no_reference else [s for s in ("joint", "finetune")]
    ds = _load_dataset(cfg)
    catalog = _catalog(cfg, ds)
    snr = _snrs(cfg, ds)[0]
    base = cfg["learner"]["seed"]
    seeds = [base + i for i in range(args.seeds)]
    if getattr(args, "dry_run", False):
        _print_schedule(cfg, [ds.class_names[c] for c in catalog], seeds)
        print(f"budgets: {budgets}; strategies: {', '.join(swept)}; references: {', '.join(refs) or 'none'}")
        return 0
    out = _out_dir(cfg)
    cfg.write(out / "config.ini")
    runs_dir = out / "runs"
    runs_dir.mkdir(exist_ok=True)
    sch = cfg["schedule"]
    timing = cfg["output"]["timing"]

    def class_seed(s):
        return cfg["schedule"]["class_seed"] if cfg["schedule"]["class_seed"] is not None else s

    def job(strategy, budget, s):
        lc = cfg.learner_config(strategy, seed=s, budget=budget)
        ck = out / "checkpoints" / f"{strategy}_s{s}_b{budget}_snr{snr}.npz"
        return Job(lc, sch["m"], sch["k"], class_seed(s), snr, str(ck), timing)

    jobs = [job(st, b, s) for st in swept for b in budgets for s in seeds]
    jobs += [job(st, 0, s) for st in refs for s in seeds]
    n = getattr(args, "jobs", None) or _default_jobs()
    reports = run_jobs(ds, jobs, catalog, n, _progress)
    for r in reports:
        write_report_csv(runs_dir / f"{r.strategy}_b{r.budget}_s{r.seed}.csv", r)
    main_rows = summarize([r for r in reports if r.strategy in swept])
    ref_rows = summarize([r for r in reports if r.strategy in refs])
    write_summary_csv(out / "summary.csv", main_rows)
    # plot what the CSVs hold, so ``report`` can reproduce the figure exactly
    main_rows = read_summary_csv(out / "summary.csv")
    if ref_rows:
        write_summary_csv(out / "reference.csv", ref_rows)
        ref_rows = read_summary_csv(out / "reference.csv")
    if "svg" in cfg["output"]["formats"]:
        from .plotting import plot_memory_sweep
        plot_memory_sweep(main_rows, out / "sweep.svg", {r["strategy"]: r["mean_final_acc"] for r in ref_rows},
                          title=f"SNR {snr} dB")
    for row in main_rows + ref_rows:
        print(f"strategy={row['strategy']} budget={row['budget']} mean={row['mean_final_acc']:.4f} "
              f"std={row['std_final_acc']:.4f} n={row['n_seeds']}")
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck
    results = run_selfcheck(fault=args.inject_fault, report=_progress)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"selfcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_SELFCHECK
    print("selfcheck passed")
    return 0


def _sweep_title(directory: Path) -> str | None:
    """The sweep's SNR, recovered from one of its per-run CSVs."""
    runs = sorted((directory / "runs").glob("*.csv"))
    if not runs:
        return None
    snr = read_report_csv(runs[0])[0].snr_db
    return None if snr is None else f"SNR {snr} dB"


def cmd_report(args) -> int:
    from .plotting import plot_accuracy_curves, plot_memory_sweep
    done = 0
    for raw in args.paths:
        p = Path(raw)
        if p.is_dir():
            candidates = [p / "report.csv", p / "summary.csv"]
        else:
            candidates = [p]
        candidates = [c for c in candidates if c.exists()]
        if not candidates:
            raise DataError(f"no report.csv or summary.csv at {p}")
        for csv_path in candidates:
            if csv_path.name == "summary.csv" or csv_path.read_text().startswith("budget,"):
                rows = read_summary_csv(csv_path)
                ref_path = csv_path.with_name("reference.csv")
                refs = {r["strategy"]: r["mean_final_acc"] for r in read_summary_csv(ref_path)} if ref_path.exists() else {}
                target = csv_path.with_name("sweep.svg")
                plot_memory_sweep(rows, target, refs, title=_sweep_title(csv_path.parent))
            else:
                reports = read_report_csv(csv_path)
                snrs = sorted({r.snr_db for r in reports}, key=lambda v: (v is None, v))
                for snr in snrs:
                    target = csv_path.with_name(_svg_name(csv_path.stem.replace("report", "accuracy") or "accuracy",
                                                          snr, len(snrs)))
                    plot_accuracy_curves([r for r in reports if r.snr_db == snr], target,
                                         title=None if snr is None else f"SNR {snr} dB")
            print(f"rendered {target}")
            done += 1
    return 0 if done else EXIT_DATA


COMMANDS = {"gen": cmd_gen, "run": cmd_run, "sweep": cmd_sweep, "selfcheck": cmd_selfcheck, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(getattr(args, "verbose", 0) or 0, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RunInterrupted as exc:
        print(f"interrupted: {exc}; rerun the same command to resume", file=sys.stderr)
        return EXIT_INTERRUPT
    except KeyboardInterrupt:
        print("interrupted; completed tasks are checkpointed, rerun the same command to resume", file=sys.stderr)
        return EXIT_INTERRUPT
    except (TrainingDivergedError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

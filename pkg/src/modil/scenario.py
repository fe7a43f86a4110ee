"""Class-incremental schedules, the train/evaluate loop and its reports."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .backbone import checkpoint_bytes, checkpoint_from_bytes
from .learners import (BiasStage, DataHandle, LearnerConfig, LearnerState, new_state, predict,
                       train_task)
from .memory import ExemplarMemory
from .sigmod import TEST, TRAIN, Dataset

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["task_index", "trained_classes", "eval_task", "accuracy", "overall_accuracy",
                  "strategy", "budget", "seed", "snr_db", "wallclock_s"]
SUMMARY_COLUMNS = ["budget", "strategy", "mean_final_acc", "std_final_acc", "n_seeds"]


class ScheduleError(ValueError):
    pass


class RunInterrupted(Exception):
    """Raised when a run stops early; completed tasks are checkpointed."""


@dataclass
class TaskSchedule:
    groups: list[list]
    m: int
    k: int
    seed: int

    @property
    def n_tasks(self) -> int:
        return len(self.groups)

    @property
    def classes(self) -> list:
        return [c for g in self.groups for c in g]


def make_schedule(catalog, m: int, k: int, seed: int = 0) -> TaskSchedule:
    """Shuffle ``catalog`` with ``seed`` and cut it into groups of ``[m, k, k, ...]``."""
    catalog = list(catalog)
    if not m >= k >= 1:
        raise ScheduleError(f"need m >= k >= 1, got m={m}, k={k}")
    if len(catalog) < m or (len(catalog) - m) % k:
        raise ScheduleError(f"{len(catalog)} classes cannot be split into {m} + multiples of {k}")
    order = np.random.default_rng(seed).permutation(len(catalog))
    shuffled = [catalog[i] for i in order]
    groups = [shuffled[:m]] + [shuffled[i:i + k] for i in range(m, len(shuffled), k)]
    return TaskSchedule(groups, m, k, seed)


@dataclass
class Evaluation:
    labels: list[int]  # seen dataset labels, in head order
    confusion: np.ndarray  # rows true, columns predicted, indexed like ``labels``

    @property
    def accuracy(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else 0.0

    @property
    def per_class(self) -> dict[int, float]:
        rows = self.confusion.sum(axis=1)
        return {c: float(self.confusion[i, i] / rows[i]) if rows[i] else 0.0
                for i, c in enumerate(self.labels)}

    def accuracy_on(self, classes) -> float:
        pos = [self.labels.index(c) for c in classes]
        sub = self.confusion[pos]
        return float(sub[np.arange(len(pos)), pos].sum() / sub.sum()) if sub.sum() else 0.0


def evaluate(state: LearnerState, x: np.ndarray, y: np.ndarray, predict_fn=predict) -> Evaluation:
    seen = list(state.seen)
    unseen = set(np.unique(y).tolist()) - set(seen)
    if unseen:
        raise ValueError(f"evaluation frames carry unseen labels {sorted(unseen)}")
    pred = predict_fn(state, x)
    pos = {c: i for i, c in enumerate(seen)}
    cm = np.zeros((len(seen), len(seen)), dtype=np.int64)
    np.add.at(cm, ([pos[int(a)] for a in y], [pos[int(b)] for b in pred]), 1)
    return Evaluation(seen, cm)


@dataclass
class RunReport:
    strategy: str
    budget: int
    seed: int
    snr_db: int | None
    groups: list[list[str]]
    accuracy: list[list[float]] = field(default_factory=list)  # accuracy[t][t'] for t' <= t
    overall: list[float] = field(default_factory=list)
    wallclock: list[float] = field(default_factory=list)
    fingerprint: str = ""

    @property
    def final_accuracy(self) -> float:
        return self.overall[-1]

    @property
    def newest_task_accuracy(self) -> float:
        return self.accuracy[-1][-1]

    @property
    def first_task_accuracy(self) -> float:
        return self.accuracy[-1][0]

    def rows(self) -> list[dict]:
        out = []
        for t, row in enumerate(self.accuracy):
            for t2, acc in enumerate(row):
                out.append({
                    "task_index": t,
                    "trained_classes": "|".join(self.groups[t]),
                    "eval_task": t2,
                    "accuracy": f"{acc:.6f}",
                    "overall_accuracy": f"{self.overall[t]:.6f}",
                    "strategy": self.strategy,
                    "budget": self.budget,
                    "seed": self.seed,
                    "snr_db": "" if self.snr_db is None else self.snr_db,
                    "wallclock_s": f"{self.wallclock[t]:.3f}",
                })
        return out

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "budget": self.budget, "seed": self.seed, "snr_db": self.snr_db,
                "groups": self.groups, "accuracy": self.accuracy, "overall": self.overall,
                "wallclock": self.wallclock, "fingerprint": self.fingerprint}

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)


def write_report_csv(path, reports) -> None:
    if isinstance(reports, RunReport):
        reports = [reports]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerows(r.rows())


def read_report_csv(path) -> list[RunReport]:
    """Rebuild reports from a CSV written by :func:`write_report_csv`."""
    runs: dict[tuple, RunReport] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            snr = int(row["snr_db"]) if row["snr_db"] != "" else None
            key = (row["strategy"], int(row["budget"]), int(row["seed"]), snr)
            rep = runs.setdefault(key, RunReport(key[0], key[1], key[2], snr, []))
            t, t2 = int(row["task_index"]), int(row["eval_task"])
            while len(rep.accuracy) <= t:
                rep.accuracy.append([])
                rep.overall.append(0.0)
                rep.wallclock.append(0.0)
                rep.groups.append([])
            rep.accuracy[t].append(float(row["accuracy"]))
            assert len(rep.accuracy[t]) == t2 + 1, "rows out of order"
            rep.overall[t] = float(row["overall_accuracy"])
            rep.wallclock[t] = float(row["wallclock_s"])
            rep.groups[t] = row["trained_classes"].split("|")
    return list(runs.values())


def fingerprint(cfg: LearnerConfig, schedule: TaskSchedule, dataset: Dataset, snr_db) -> str:
    doc = {
        "learner": cfg.to_dict(),
        "groups": [[int(c) for c in g] for g in schedule.groups],
        "schedule": [schedule.m, schedule.k, schedule.seed],
        "dataset": dataset.checksum(),
        "snr_db": snr_db,
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# checkpoints


def _save_state(path: Path, state: LearnerState, report: RunReport) -> None:
    meta = {
        "seen": [int(c) for c in state.seen],
        "bias_stages": [vars(s) for s in state.bias_stages],
        "history": [h.tolist() for h in state.history],
        "tasks_done": state.tasks_done,
        "memory": state.memory.snapshot() if state.memory is not None else None,
        "report": report.to_dict(),
    }
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, model=np.frombuffer(checkpoint_bytes(state.model), dtype=np.uint8),
             meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))
    os.replace(tmp, path)


def _load_state(path: Path, cfg: LearnerConfig, dataset: Dataset) -> tuple[LearnerState, RunReport]:
    with np.load(path) as z:
        model = checkpoint_from_bytes(z["model"].tobytes())
        meta = json.loads(z["meta"].tobytes().decode())
    state = LearnerState(cfg, model)
    state.seen = meta["seen"]
    state.bias_stages = [BiasStage(**s) for s in meta["bias_stages"]]
    state.history = [np.asarray(h, dtype=np.int64) for h in meta["history"]]
    state.tasks_done = meta["tasks_done"]
    if meta["memory"] is not None:
        state.memory = ExemplarMemory.restore(meta["memory"], dataset.samples)
    if cfg.strategy in ("icarl", "bic", "lucir") and state.tasks_done:
        state.teacher = model.clone_frozen()
    return state, RunReport.from_dict(meta["report"])


# ---------------------------------------------------------------------------
# runs


def class_indices(dataset: Dataset, split: int, classes, snr_db=None) -> dict[int, np.ndarray]:
    out = {}
    for c in classes:
        idx = dataset.indices(split, [c], snr_db)
        if len(idx) == 0:
            raise ValueError(f"no {'train' if split == TRAIN else 'test'} frames for class {c}")
        out[int(c)] = idx
    return out


def run_scenario(dataset: Dataset, schedule: TaskSchedule, cfg: LearnerConfig, snr_db=None,
                 checkpoint: str | Path | None = None, timing: bool = True, stop_after: int | None = None,
                 progress=None, handle: DataHandle | None = None) -> RunReport:
    """Train task by task and fill the accuracy matrix row by row.

    With ``checkpoint`` set, state is saved after every task and an existing
    checkpoint with the same fingerprint is resumed. ``stop_after=t`` raises
    :class:`RunInterrupted` once task ``t`` is saved.
    """
    fp = fingerprint(cfg, schedule, dataset, snr_db)
    names = dataset.class_names
    groups = [[names[c] for c in g] for g in schedule.groups]
    handle = handle or DataHandle(dataset.samples, dataset.labels, dataset.split)
    train_idx = class_indices(dataset, TRAIN, schedule.classes, snr_db)
    test_idx = class_indices(dataset, TEST, schedule.classes, snr_db)
    for idx in test_idx.values():
        if np.any(dataset.split[idx] != TEST):
            raise ValueError("evaluation set contains training frames")

    ckpt = Path(checkpoint) if checkpoint else None
    state = report = None
    if ckpt is not None and ckpt.exists():
        state, report = _load_state(ckpt, cfg, dataset)
        if report.fingerprint != fp:
            log.warning("checkpoint %s belongs to a different configuration; starting over", ckpt)
            state = report = None
        else:
            log.info("resuming %s from task %d", cfg.strategy, state.tasks_done)
    if state is None:
        state = new_state(cfg)
        report = RunReport(cfg.strategy, cfg.budget, cfg.seed, snr_db, groups, fingerprint=fp)

    for t in range(state.tasks_done, schedule.n_tasks):
        start = time.perf_counter()
        group = schedule.groups[t]
        train_task(state, handle, group, {c: train_idx[c] for c in group})
        seen_test = np.concatenate([test_idx[c] for c in state.seen])
        ev = evaluate(state, dataset.samples[seen_test], dataset.labels[seen_test])
        report.accuracy.append([ev.accuracy_on(g) for g in schedule.groups[:t + 1]])
        report.overall.append(ev.accuracy)
        report.wallclock.append(time.perf_counter() - start if timing else 0.0)
        if progress is not None:
            progress(f"strategy={cfg.strategy} seed={cfg.seed} budget={cfg.budget} "
                     f"task={t + 1}/{schedule.n_tasks} acc={ev.accuracy:.2f}")
        if ckpt is not None:
            ckpt.parent.mkdir(parents=True, exist_ok=True)
            _save_state(ckpt, state, report)
        if stop_after is not None and t == stop_after and t < schedule.n_tasks - 1:
            raise RunInterrupted(f"stopped after task {t}")
    return report


@dataclass
class Job:
    cfg: LearnerConfig
    m: int
    k: int
    class_seed: int
    snr_db: int | None = None
    checkpoint: str | None = None
    timing: bool = True


def _run_job(dataset: Dataset, job: Job, catalog, progress=None) -> RunReport:
    schedule = make_schedule(catalog, job.m, job.k, job.class_seed)
    return run_scenario(dataset, schedule, job.cfg, job.snr_db, job.checkpoint, job.timing, progress=progress)


_WORKER_DATASET: Dataset | None = None


def _init_worker(dataset):
    global _WORKER_DATASET
    _WORKER_DATASET = dataset


def _run_job_in_worker(job: Job, catalog, progress=None) -> RunReport:
    return _run_job(_WORKER_DATASET, job, catalog, progress)


def run_jobs(dataset: Dataset, jobs: list[Job], catalog=None, n_workers: int = 1, progress=None) -> list[RunReport]:
    """Run independent jobs, in this process or across a worker pool.

    ``progress`` must be picklable when ``n_workers > 1``; workers call it
    directly.
    """
    catalog = list(range(len(dataset.class_names))) if catalog is None else list(catalog)
    if n_workers <= 1 or len(jobs) <= 1:
        return [_run_job(dataset, j, catalog, progress) for j in jobs]
    with ProcessPoolExecutor(n_workers, initializer=_init_worker, initargs=(dataset,)) as pool:
        futures = [pool.submit(_run_job_in_worker, j, catalog, progress) for j in jobs]
        return [f.result() for f in futures]


def summarize(reports: list[RunReport]) -> list[dict]:
    """Mean and spread of final accuracy per (budget, strategy)."""
    by_key: dict[tuple, list[float]] = {}
    for r in reports:
        by_key.setdefault((r.budget, r.strategy), []).append(r.final_accuracy)
    rows = []
    for (budget, strategy), accs in sorted(by_key.items()):
        a = np.asarray(accs)
        rows.append({
            "budget": budget,
            "strategy": strategy,
            "mean_final_acc": float(a.mean()),
            "std_final_acc": float(a.std(ddof=1)) if len(a) > 1 else 0.0,
            "n_seeds": len(a),
        })
    return rows


def write_summary_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "mean_final_acc": f"{r['mean_final_acc']:.6f}",
                        "std_final_acc": f"{r['std_final_acc']:.6f}"})


def read_summary_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"budget": int(r["budget"]), "strategy": r["strategy"],
                 "mean_final_acc": float(r["mean_final_acc"]), "std_final_acc": float(r["std_final_acc"]),
                 "n_seeds": int(r["n_seeds"])} for r in csv.DictReader(fh)]


def memory_sweep(dataset: Dataset, cfg: LearnerConfig, m: int, k: int, budgets, seeds, snr_db=None,
                 n_workers: int = 1, catalog=None, progress=None) -> tuple[list[RunReport], list[dict]]:
    """One run per (budget, seed); the class order follows the seed."""
    budgets = list(budgets)
    if budgets != sorted(budgets):
        raise ValueError("budgets must be sorted ascending")
    jobs = [Job(replace(cfg, budget=b, seed=s), m, k, s, snr_db) for b in budgets for s in seeds]
    reports = run_jobs(dataset, jobs, catalog, n_workers, progress)
    return reports, summarize(reports)

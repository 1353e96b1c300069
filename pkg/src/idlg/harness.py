"""Experiment driver: single trials, label-accuracy and fidelity benches."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import DEFAULT_THRESHOLDS, AttackAborted, AttackConfig, AttackReport, run_attack
from .data import Dataset, load_dataset, write_pnm
from .model import Architecture, backward, init_model
from .tensor import make_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchConfig:
    dataset: str | Dataset
    methods: tuple[str, ...] = ("idlg", "dlg")
    trials: int = 100
    iterations: int = 300
    base_seed: int = 0
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    out_dir: str | Path | None = None
    optimizer: str = "lbfgs"
    learning_rate: float = 1.0
    workers: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        th = self.thresholds
        if not th or any(t <= 0 for t in th) or any(a <= b for a, b in zip(th, th[1:])):
            raise ValueError(f"thresholds must be positive and strictly decreasing, got {th}")


@dataclass
class TrialRecord:
    trial: int
    seed: int
    method: str
    sample_index: int
    true_label: int
    extracted_label: int = -1
    label_exact: bool = False
    final_mse: float = math.nan
    min_mse: float = math.nan
    iters_to: dict[float, int] = field(default_factory=dict)
    aborted: bool = False
    error: str = ""

    @property
    def label_correct(self) -> bool:
        return not self.aborted and self.extracted_label == self.true_label

    def good_fidelity(self, tau: float) -> bool:
        return not self.aborted and self.final_mse < tau


@dataclass
class MethodSummary:
    method: str
    trials: int
    aborted: int
    label_accuracy: float
    fidelity: dict[float, float]
    mean_final_mse: float
    mean_iters_to_threshold: dict[float, float]


@dataclass
class BenchResult:
    dataset: str
    thresholds: tuple[float, ...]
    summaries: dict[str, MethodSummary]
    records: list[TrialRecord]


def arch_for(dataset: Dataset) -> Architecture:
    return Architecture(dataset.channels, dataset.num_classes)


def run_trial(dataset: Dataset, sample_index: int, method: str, trial_seed: int, iterations: int,
              optimizer: str = "lbfgs", learning_rate: float = 1.0, snapshot_every: int = 0,
              thresholds=DEFAULT_THRESHOLDS) -> AttackReport:
    """Fresh model from ``trial_seed``, honest gradients of one sample, then attack.

    The dummy initialization uses ``trial_seed + 1``.
    """
    if not 0 <= sample_index < len(dataset):
        raise IndexError(f"sample index {sample_index} out of range for {len(dataset)} samples")
    x, c = dataset[sample_index]
    model = init_model(arch_for(dataset), make_rng(trial_seed))
    shared = backward(model, x, c)
    config = AttackConfig(method=method, iterations=iterations, optimizer=optimizer,
                          learning_rate=learning_rate, seed=trial_seed + 1,
                          snapshot_every=snapshot_every, thresholds=tuple(thresholds))
    return run_attack(model, shared, config, ground_truth=x)


_worker_dataset: Dataset | None = None


def _init_worker(dataset: Dataset) -> None:
    global _worker_dataset
    _worker_dataset = dataset


def _trial_job(args) -> TrialRecord:
    trial, seed, method, index, iterations, optimizer, lr, thresholds = args
    dataset = _worker_dataset
    record = TrialRecord(trial, seed, method, index, int(dataset.labels[index]))
    try:
        report = run_trial(dataset, index, method, seed, iterations, optimizer, lr,
                           thresholds=thresholds)
    except AttackAborted as exc:
        record.aborted = True
        record.error = str(exc)
        return record
    record.extracted_label = report.extracted_label
    record.label_exact = report.label_exact
    record.final_mse = report.final_mse
    record.min_mse = report.min_mse
    record.iters_to = dict(report.iterations_to_threshold)
    return record


def summarize(records: list[TrialRecord], methods, thresholds) -> dict[str, MethodSummary]:
    out = {}
    for method in methods:
        rows = [r for r in records if r.method == method]
        n = len(rows)
        finished = [r for r in rows if not r.aborted]
        mean_iters = {}
        for tau in thresholds:
            reached = [r.iters_to[tau] for r in rows if tau in r.iters_to]
            mean_iters[tau] = float(np.mean(reached)) if reached else math.nan
        out[method] = MethodSummary(
            method=method,
            trials=n,
            aborted=n - len(finished),
            label_accuracy=sum(r.label_correct for r in rows) / n if n else math.nan,
            fidelity={tau: sum(r.good_fidelity(tau) for r in rows) / n if n else math.nan
                      for tau in thresholds},
            mean_final_mse=float(np.mean([r.final_mse for r in finished])) if finished else math.nan,
            mean_iters_to_threshold=mean_iters,
        )
    return out


def run_bench(config: BenchConfig) -> BenchResult:
    dataset = config.dataset
    if not isinstance(dataset, Dataset):
        dataset = load_dataset(dataset, seed=config.base_seed)
    jobs = []
    for method in config.methods:
        for t in range(config.trials):
            seed = config.base_seed + t
            jobs.append((t, seed, method, t % len(dataset), config.iterations,
                         config.optimizer, config.learning_rate, tuple(config.thresholds)))
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers, initializer=_init_worker, initargs=(dataset,)) as pool:
            records = list(pool.map(_trial_job, jobs, chunksize=1))
    else:
        _init_worker(dataset)
        records = [_trial_job(job) for job in jobs]
    result = BenchResult(dataset.name, tuple(config.thresholds),
                         summarize(records, config.methods, config.thresholds), records)
    if config.out_dir is not None:
        write_bench_csv(result, config.out_dir)
    return result


def _fmt(v: float) -> str:
    return repr(float(v))


def _tau_name(tau: float) -> str:
    return f"{tau:g}"


def write_bench_csv(result: BenchResult, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    taus = result.thresholds
    summary_path = out / "summary.csv"
    with open(summary_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "dataset", "trials", "label_accuracy"]
                   + [f"fidelity_{_tau_name(t)}" for t in taus]
                   + ["aborted", "mean_final_mse"])
        for s in result.summaries.values():
            w.writerow([s.method, result.dataset, s.trials, _fmt(s.label_accuracy)]
                       + [_fmt(s.fidelity[t]) for t in taus]
                       + [s.aborted, _fmt(s.mean_final_mse)])
    trials_path = out / "trials.csv"
    with open(trials_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["trial", "seed", "method", "extracted_label", "true_label", "final_mse"]
                   + [f"iters_to_{_tau_name(t)}" for t in taus]
                   + ["min_mse", "sample_index", "label_exact", "aborted"])
        for r in result.records:
            w.writerow([r.trial, r.seed, r.method, r.extracted_label, r.true_label, _fmt(r.final_mse)]
                       + [r.iters_to.get(t, -1) for t in taus]
                       + [_fmt(r.min_mse), r.sample_index, int(r.label_exact), int(r.aborted)])
    return summary_path, trials_path


def to_bytes(t: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and scale to bytes, rounding halves up."""
    return np.floor(np.clip(t, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def export_image(t: np.ndarray, path) -> Path:
    """Write a (C, H, W) tensor as PGM (C=1) or PPM (C=3)."""
    path = Path(path)
    write_pnm(to_bytes(np.asarray(t)), path)
    return path


def write_trajectory_csv(report: AttackReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "loss", "mse"])
        mses = report.mse_trajectory or [math.nan] * len(report.loss_trajectory)
        for i, (loss, err) in enumerate(zip(report.loss_trajectory, mses)):
            w.writerow([i, _fmt(loss), _fmt(err)])
    return path

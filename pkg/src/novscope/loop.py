"""Active-learning loop, post-hoc replay and multi-arm benchmark sweeps."""

from __future__ import annotations

import csv
import io
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from novscope.acquisition import POLICIES, AcquisitionConfig, BudgetExceeded, score_policy, select_next
from novscope.dataset import ScanDataset, TwinOracle, seed_sample
from novscope.metrics import (
    METRIC_COLUMNS,
    MetricModels,
    MetricsConfig,
    MetricSeries,
    assemble_series,
    build_metric_models,
    fmt,
    mae_step,
    parse_float,
    surrogate_mean_step,
    surrogate_uncertainty_step,
)
from novscope.seeds import derive_rng, derive_seed
from novscope.surrogate import (
    Architecture,
    FactorizationError,
    KernelHyperparams,
    PatchBatch,
    SurrogateState,
    TrainSchedule,
    posterior,
    train,
)

log = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ("step", "phase", "index", "row", "col", "y", "score", "train_ms", "score_ms", "total_ms")
SUMMARY_METRICS = METRIC_COLUMNS + ("dispersion",)


class ConfigError(ValueError):
    """Configuration inconsistent with itself or with the dataset."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SurrogateConfig:
    c1: int = 8
    c2: int = 16
    latent_dim: int = 2
    padding: str = "auto"
    iterations: int = 200
    step_size: float = 0.01

    def architecture(self, patch_size: int) -> Architecture:
        """Resolve the extractor; ``auto`` padding is valid when the patch allows it, else same."""
        if self.padding == "auto":
            try:
                return Architecture(patch_size, self.c1, self.c2, self.latent_dim, "valid")
            except ValueError:
                return Architecture(patch_size, self.c1, self.c2, self.latent_dim, "same")
        return Architecture(patch_size, self.c1, self.c2, self.latent_dim, self.padding)

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(iterations=self.iterations, step_size=self.step_size)


@dataclass(frozen=True)
class ExperimentConfig:
    policy: str = "beacon"
    budget: int = 300
    n_seed: int = 10
    seed: int = 0
    cold_start: bool = False
    surrogate: SurrogateConfig = SurrogateConfig()
    acquisition: AcquisitionConfig = AcquisitionConfig()
    metrics: MetricsConfig = MetricsConfig()

    @property
    def metrics_seed(self) -> int:
        return self.seed if self.metrics.seed is None else self.metrics.seed

    def validate(self, dataset: Optional[ScanDataset] = None) -> None:
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if self.n_seed < 2:
            raise ConfigError(f"n_seed must be at least 2, got {self.n_seed}")
        if self.budget < self.n_seed:
            raise ConfigError(f"budget {self.budget} is smaller than n_seed {self.n_seed}")
        if dataset is not None:
            if self.budget > dataset.n_candidates:
                raise BudgetExceeded(
                    f"budget exceeds search space: {self.budget} > {dataset.n_candidates} candidates"
                )
            try:
                self.surrogate.architecture(dataset.patch_size)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# trajectory log


@dataclass(eq=False)
class TrajectoryLog:
    step: list = field(default_factory=list)
    phase: list = field(default_factory=list)
    index: list = field(default_factory=list)
    row: list = field(default_factory=list)
    col: list = field(default_factory=list)
    y: list = field(default_factory=list)
    score: list = field(default_factory=list)
    train_ms: list = field(default_factory=list)
    score_ms: list = field(default_factory=list)
    total_ms: list = field(default_factory=list)

    def append(self, phase, index, row, col, y, score=np.nan, train_ms=np.nan, score_ms=np.nan, total_ms=np.nan):
        self.step.append(len(self.step) + 1)
        self.phase.append(phase)
        self.index.append(int(index))
        self.row.append(int(row))
        self.col.append(int(col))
        self.y.append(float(y))
        self.score.append(float(score))
        self.train_ms.append(float(train_ms))
        self.score_ms.append(float(score_ms))
        self.total_ms.append(float(total_ms))

    def __len__(self) -> int:
        return len(self.step)

    @property
    def coords(self) -> np.ndarray:
        return np.column_stack([self.row, self.col]).astype(np.float64) if len(self) else np.zeros((0, 2))

    def to_csv(self, record_timings: bool = False) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRAJECTORY_COLUMNS)
        for i in range(len(self)):
            times = (self.train_ms[i], self.score_ms[i], self.total_ms[i]) if record_timings else (None,) * 3
            writer.writerow(
                [self.step[i], self.phase[i], self.index[i], self.row[i], self.col[i], fmt(self.y[i]), fmt(self.score[i])]
                + [fmt(t) for t in times]
            )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrajectoryLog":
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or tuple(reader.fieldnames) != TRAJECTORY_COLUMNS:
            raise ValueError(f"trajectory header must be {','.join(TRAJECTORY_COLUMNS)}")
        out = cls()
        for line, r in enumerate(reader, start=2):
            try:
                if int(r["step"]) != len(out) + 1:
                    raise ValueError("steps must count up from 1")
                out.append(
                    r["phase"], int(r["index"]), int(r["row"]), int(r["col"]), float(r["y"]),
                    *(parse_float(r[c]) for c in ("score", "train_ms", "score_ms", "total_ms")),
                )
            except (TypeError, ValueError) as exc:
                raise ValueError(f"trajectory row {line}: {exc}") from exc
        return out


def audit_trajectory(traj: TrajectoryLog, dataset: ScanDataset, n_seed: Optional[int] = None) -> None:
    """Raise ValueError naming the first row that breaks the log contract.

    Row numbers count the CSV header as line 1.
    """
    n = dataset.n_candidates
    seen = {}
    for i, j in enumerate(traj.index):
        line = i + 2
        if not 0 <= j < n:
            raise ValueError(f"trajectory row {line}: index {j} outside [0, {n})")
        if j in seen:
            raise ValueError(f"trajectory row {line}: duplicate index {j} (first at row {seen[j]})")
        seen[j] = line
        r, c = dataset.coords(j)
        if (traj.row[i], traj.col[i]) != (r, c):
            raise ValueError(f"trajectory row {line}: coordinates ({traj.row[i]}, {traj.col[i]}) do not match index {j}")
        if n_seed is not None and (traj.phase[i] == "seed") != (i < n_seed):
            raise ValueError(f"trajectory row {line}: phase {traj.phase[i]!r} inconsistent with n_seed={n_seed}")


# ---------------------------------------------------------------------------
# single run


@dataclass(eq=False)
class RunResult:
    config: ExperimentConfig
    trajectory: TrajectoryLog
    metrics: MetricSeries
    surrogate: Optional[SurrogateState]
    counters: dict
    train_sizes: dict
    models: MetricModels
    scores: Optional[np.ndarray] = None


class _Learner:
    """Retrains the surrogate on a growing set and evaluates learning curves."""

    def __init__(self, config: ExperimentConfig, dataset: ScanDataset):
        self.config = config
        self.arch = config.surrogate.architecture(dataset.patch_size)
        self.schedule = config.surrogate.schedule()
        self.batch = _candidate_batch(dataset, self.arch)
        self.truth = dataset.ground_truth() if dataset.has_map else None
        self.train_seed = derive_seed(config.seed, "train")
        self.state: Optional[SurrogateState] = None
        self.learning: dict = {}
        self.train_sizes: dict = {}
        self.last_train_ms = float("nan")

    def update(self, indices: Sequence[int], ys: Sequence[float]):
        idx = np.asarray(indices, dtype=np.int64)
        y = np.asarray(ys, dtype=np.float64)
        t = idx.size
        inputs = self.batch.take(idx)
        if self.state is None or self.config.cold_start:
            state = SurrogateState.create(
                self.arch, inputs, y, seed=self.train_seed, kernel=KernelHyperparams(), indices=idx
            )
        else:
            state = self.state.with_data(inputs, y, indices=idx)
        try:
            start = time.perf_counter()
            state = train(state, self.schedule)
            self.last_train_ms = (time.perf_counter() - start) * 1e3
            post = posterior(state, self.batch)
        except FactorizationError as exc:
            log.error("surrogate factorization failed at step %d: %s", t, exc)
            raise
        self.state = state
        self.train_sizes[t] = state.n
        mae = mae_step(post.mean, self.truth) if self.truth is not None else None
        self.learning[t] = (mae, surrogate_mean_step(post.mean), surrogate_uncertainty_step(post.variance))
        return post


def _candidate_batch(dataset: ScanDataset, arch: Architecture) -> PatchBatch:
    key = ("batch", arch)
    if key not in dataset._cache:
        dataset._cache[key] = PatchBatch(dataset.all_patches(standardize=True), arch)
    return dataset._cache[key]


def run_experiment(
    config: ExperimentConfig,
    dataset: ScanDataset,
    models: Optional[MetricModels] = None,
    oracle=None,
    keep_scores: bool = False,
) -> RunResult:
    """Seed, then retrain, score, select and measure until the budget is spent.

    Learning curves are evaluated after every step from ``n_seed`` on
    (including the final measurement); coverage is evaluated at every step.
    With ``keep_scores`` the result carries the ``(budget - n_seed, N)``
    policy scores of every active step, NaN where already measured.
    """
    config.validate(dataset)
    models = models if models is not None else build_metric_models(dataset, config.metrics, config.metrics_seed)
    oracle = oracle if oracle is not None else TwinOracle(dataset, derive_rng(config.seed, "measurement"))
    thompson = derive_rng(config.seed, "thompson")
    learner = _Learner(config, dataset)
    traj = TrajectoryLog()
    counters: dict = {}
    kept = []

    measured = np.zeros(dataset.n_candidates, dtype=bool)
    for j in seed_sample(range(dataset.n_candidates), config.n_seed, derive_rng(config.seed, "seed-sample")):
        r, c = dataset.coords(j)
        traj.append("seed", j, r, c, oracle.measure(j))
        measured[j] = True

    while True:
        t0 = time.perf_counter()
        post = learner.update(traj.index, traj.y)
        if len(traj) >= config.budget:
            break
        latents = post.latents[np.asarray(traj.index)] if config.acquisition.novelty_space == "latent" else None
        t2 = time.perf_counter()
        scores = score_policy(
            config.policy, post, traj.y, config.acquisition, rng=thompson, history_latents=latents, counters=counters
        )
        decision = select_next(scores, measured, config.policy)
        t3 = time.perf_counter()
        if keep_scores:
            kept.append(np.where(measured, np.nan, scores))
        y = oracle.measure(decision.index)
        measured[decision.index] = True
        r, c = dataset.coords(decision.index)
        t4 = time.perf_counter()
        traj.append(
            "active", decision.index, r, c, y, decision.score,
            learner.last_train_ms, (t3 - t2) * 1e3, (t4 - t0) * 1e3,
        )

    series = assemble_series(traj.index, models, learner.learning)
    scores_out = np.array(kept).reshape(len(kept), dataset.n_candidates) if keep_scores else None
    return RunResult(config, traj, series, learner.state, counters, learner.train_sizes, models, scores_out)


def replay(
    config: ExperimentConfig,
    dataset: ScanDataset,
    traj: TrajectoryLog,
    models: Optional[MetricModels] = None,
    tolerance: float = 1e-8,
) -> MetricSeries:
    """Recompute the metric series of a stored trajectory.

    The oracle is re-queried along the stored indices with the run's
    measurement stream; logged responses must agree to CSV precision.
    Training then follows the same deterministic schedule as the run.
    """
    config = replace(config, budget=len(traj))
    config.validate(dataset)
    audit_trajectory(traj, dataset, config.n_seed)
    models = models if models is not None else build_metric_models(dataset, config.metrics, config.metrics_seed)
    oracle = TwinOracle(dataset, derive_rng(config.seed, "measurement"))
    ys = []
    for i, j in enumerate(traj.index):
        y = oracle.measure(j)
        if abs(y - traj.y[i]) > tolerance * max(1.0, abs(y)):
            raise ValueError(f"trajectory row {i + 2}: logged y={traj.y[i]!r} but the oracle gives {y!r}")
        ys.append(y)
    learner = _Learner(config, dataset)
    for t in range(config.n_seed, len(traj) + 1):
        learner.update(traj.index[:t], ys[:t])
    return assemble_series(traj.index, models, learner.learning)


def spatial_dispersion(traj, window: int) -> np.ndarray:
    """Mean pairwise pixel distance among the last ``window`` acquisitions.

    Entry ``t - 1`` holds the value at step ``t``; steps before ``window``
    are NaN. ``traj`` is a TrajectoryLog or a ``(T, 2)`` coordinate array.
    """
    if window < 2:
        raise ValueError(f"window must be at least 2, got {window}")
    xy = traj.coords if isinstance(traj, TrajectoryLog) else np.asarray(traj, dtype=np.float64)
    out = np.full(len(xy), np.nan)
    for t in range(window, len(xy) + 1):
        out[t - 1] = pdist(xy[t - window : t]).mean()
    return out


# ---------------------------------------------------------------------------
# benchmark


@dataclass(eq=False)
class BenchmarkResult:
    config: ExperimentConfig
    policies: tuple
    seeds: tuple
    runs: dict
    failures: list
    summary: dict
    models: MetricModels

    def summary_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["policy", "step"]
        for m in SUMMARY_METRICS:
            header += [f"{m}_median", f"{m}_q25", f"{m}_q75"]
        writer.writerow(header)
        for policy in self.policies:
            if policy not in self.summary:
                continue
            stats = self.summary[policy]
            for i in range(self.config.budget):
                row = [policy, i + 1]
                for m in SUMMARY_METRICS:
                    row += [fmt(stats[m][q][i]) for q in ("median", "q25", "q75")]
                writer.writerow(row)
        return buf.getvalue()


def arm_config(config: ExperimentConfig, policy: str, seed: int) -> ExperimentConfig:
    """Configuration of one arm; metric models stay pinned to the sweep's seed."""
    return replace(config, policy=policy, seed=seed, metrics=replace(config.metrics, seed=config.metrics_seed))


def aggregate(columns: np.ndarray) -> dict:
    """Per-step median and quartiles over seeds (rows), ignoring missing values."""
    columns = np.asarray(columns, dtype=np.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        q25, med, q75 = np.nanpercentile(columns, [25, 50, 75], axis=0)
    return {"median": med, "q25": q25, "q75": q75}


def _run_arm(args):
    config, dataset, models = args
    try:
        return run_experiment(config, dataset, models), None
    except Exception as exc:  # recorded per arm, the sweep continues
        log.error("arm %s seed %d failed: %s", config.policy, config.seed, exc)
        return None, f"{type(exc).__name__}: {exc}"


def run_benchmark(
    config: ExperimentConfig,
    dataset: ScanDataset,
    policies: Sequence[str],
    seeds: Sequence[int],
    jobs: int = 1,
    on_arm=None,
) -> BenchmarkResult:
    """Run every (policy, seed) arm against shared frozen metric models.

    ``on_arm(policy, seed, result, error)`` is called as each arm finishes,
    in submission order.
    """
    policies, seeds = tuple(policies), tuple(int(s) for s in seeds)
    if not policies or not seeds:
        raise ConfigError("benchmark needs at least one policy and one seed")
    for p in policies:
        replace(config, policy=p).validate(dataset)
    models = build_metric_models(dataset, config.metrics, config.metrics_seed)
    arms = [(p, s) for p in policies for s in seeds]
    tasks = [(arm_config(config, p, s), dataset, models) for p, s in arms]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = pool.map(_run_arm, tasks)
            results = _collect(arms, outcomes, on_arm)
    else:
        results = _collect(arms, map(_run_arm, tasks), on_arm)
    runs = {arm: res for arm, (res, err) in results.items() if res is not None}
    failures = [(p, s, err) for (p, s), (res, err) in results.items() if err is not None]
    window = config.metrics.dispersion_window
    summary = {}
    for p in policies:
        arm_runs = [runs[(p, s)] for s in seeds if (p, s) in runs]
        if not arm_runs:
            continue
        stats = {m: aggregate([r.metrics.column(m) for r in arm_runs]) for m in METRIC_COLUMNS}
        stats["dispersion"] = aggregate([spatial_dispersion(r.trajectory, window) for r in arm_runs])
        summary[p] = stats
    return BenchmarkResult(config, policies, seeds, runs, failures, summary, models)


def _collect(arms, outcomes, on_arm) -> dict:
    results = {}
    for (p, s), (res, err) in zip(arms, outcomes):
        results[(p, s)] = (res, err)
        if on_arm is not None:
            on_arm(p, s, res, err)
    return results

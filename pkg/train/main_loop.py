"""
Training driver: builds the objective from a RunConfig, runs the optimizer
engine for the configured budget, writes telemetry, checkpoint and summary,
and optionally logs the run to mlflow.

Also hosts the alpha sweep and the multi-variant comparison, which are
loops over ``train`` with derived configs.
"""
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel

from arsam.autodiff import MLPOracle, MLPSpec, init_params, save_checkpoint
from arsam.datasets import Dataset
from arsam.exceptions import NumericError
from arsam.objectives import GradientOracle, LogisticOracle, QuadraticOracle, QuadraticSpec, TwoWellOracle, TwoWellSpec
from arsam.optimizers import LearningRateSchedule, OptimizerEngine, StepMode
from arsam.params import ParamVector
from train.config import RunConfig, build_config
from train.data_fetch import fetch_data, save_data
from train.evaluate import compute_ais, compute_pct_sam, evaluate_accuracy
from train.metrics import RunMetrics
from train.telemetry import TelemetryError, TelemetryRecord, TelemetryWriter
from train.tracking import log_run

logger = logging.getLogger(__name__)


class Seeds(NamedTuple):
    data: int
    shuffle: np.random.SeedSequence
    sampler: np.random.SeedSequence
    init: int


def derive_seeds(config: RunConfig) -> Seeds:
    """Independent streams for data, batch order, PSF sampling and init."""
    data_ss, shuffle_ss, sampler_ss, init_ss = np.random.SeedSequence(config.seed).spawn(4)
    data_seed = config.data.seed if config.data.seed is not None else int(data_ss.generate_state(1)[0])
    return Seeds(
        data=data_seed,
        shuffle=shuffle_ss,
        sampler=sampler_ss,
        init=int(init_ss.generate_state(1)[0]),
    )


@dataclass
class Problem:
    oracle: GradientOracle
    w0: ParamVector
    model: Optional[object] = None
    train_set: Optional[Dataset] = None
    test_set: Optional[Dataset] = None
    spec: Optional[MLPSpec] = None

    @property
    def images_per_epoch(self) -> int:
        return len(self.train_set) if self.train_set is not None else 1


def build_problem(config: RunConfig, seeds: Seeds) -> Problem:
    objective = config.objective
    init_rng = np.random.default_rng(seeds.init)

    if objective.kind == "quadratic":
        oracle = QuadraticOracle(QuadraticSpec(
            eigenvalues=tuple(objective.eigenvalues),
            rotation_seed=objective.rotation_seed,
        ))
        n = oracle.layout().total_length
        w0 = objective.init if objective.init is not None else init_rng.standard_normal(n)
        return Problem(oracle=oracle, w0=ParamVector(w0, oracle.layout()))

    if objective.kind == "two_well":
        oracle = TwoWellOracle(TwoWellSpec(**objective.model_dump(exclude={"kind", "init"})))
        w0 = objective.init if objective.init is not None else init_rng.uniform(-5.0, 5.0, size=1)
        return Problem(oracle=oracle, w0=ParamVector(w0, oracle.layout()))

    train_set, test_set = fetch_data(config.data, seeds.data)
    if objective.kind == "logistic":
        oracle = LogisticOracle(train_set, objective.l2_lambda)
        return Problem(
            oracle=oracle, w0=ParamVector.zeros(oracle.layout()), model=oracle,
            train_set=train_set, test_set=test_set,
        )

    spec = MLPSpec(
        layer_widths=(train_set.n_features, *objective.hidden, max(train_set.n_classes, 2)),
        activation=objective.activation,
        init_seed=seeds.init,
        init_scale_rule=objective.init_scale_rule,
    )
    oracle = MLPOracle(spec, train_set, workers=objective.workers)
    return Problem(
        oracle=oracle, w0=init_params(spec), model=spec,
        train_set=train_set, test_set=test_set, spec=spec,
    )


class BatchSampler:
    """Seeded shuffle per epoch, consecutive slices of the permutation as batches."""

    def __init__(self, dataset: Optional[Dataset], batch_size: int, seed):
        self.dataset = dataset
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self._order = np.empty(0, dtype=np.int64)
        self._cursor = 0
        self.images_seen = 0

    def next_batch(self) -> Optional[Dataset]:
        if self.dataset is None:
            self.images_seen += 1
            return None
        if self._cursor >= self._order.shape[0]:
            self._order = self.rng.permutation(len(self.dataset))
            self._cursor = 0
        indices = self._order[self._cursor:self._cursor + self.batch_size]
        self._cursor += indices.shape[0]
        self.images_seen += indices.shape[0]
        return self.dataset.take(indices)


class RunSummary(BaseModel):
    variant: str
    seed: int
    iterations_planned: int
    iterations_completed: int
    train_accuracy: Optional[float] = None
    test_accuracy: Optional[float] = None
    pct_sam: float
    ais: float
    grad_evals_total: int
    mode_counts: Dict[str, int]
    measured_speed_ratio_vs_sam: Optional[float] = None
    predicted_speed_ratio_vs_sam: float
    final_loss: Optional[float] = None
    wall_seconds: float
    completed: bool
    telemetry_complete: bool
    error: Optional[str] = None
    checkpoint_path: Optional[str] = None
    s_trajectory: List[float] = []
    p_trajectory: List[float] = []
    clip_events: int = 0
    degenerate_events: int = 0
    config: dict


@dataclass
class RunResult:
    summary: RunSummary
    records: List[TelemetryRecord] = field(default_factory=list)
    final_w: Optional[ParamVector] = None
    mlflow_run_id: Optional[str] = None


def _measured_speed_ratio(step_ns: Dict[str, List[int]], total_ns: int) -> Optional[float]:
    """Time a SAM run of the same length would take, over the time this run took.

    The SAM step cost is the mean SAM-mode step duration, or twice the mean
    single-evaluation step when the run took no SAM steps.
    """
    n_steps = sum(len(v) for v in step_ns.values())
    if not n_steps or total_ns <= 0:
        return None
    sam = step_ns[StepMode.SAM.value]
    if sam:
        sam_step = float(np.mean(sam))
    else:
        single = step_ns[StepMode.REUSE.value] + step_ns[StepMode.SGD_ONLY.value]
        sam_step = 2.0 * float(np.mean(single))
    return n_steps * sam_step / total_ns


def train(config: RunConfig) -> RunResult:
    """
    Run one configured training job end to end.

    A NumericError or a failed telemetry write stops the loop: the last
    good parameters are checkpointed, telemetry written so far is kept, and
    the summary is marked incomplete.
    """
    variant = config.optimizer.variant
    seeds = derive_seeds(config)
    telemetry_path = config.telemetry.resolve("telemetry_path")
    summary_path = config.telemetry.resolve("summary_path")
    checkpoint_path = config.telemetry.resolve("checkpoint_path")
    metrics_path = config.telemetry.resolve("metrics_path")
    logical_clock = config.telemetry.clock == "logical"

    start_ns = time.perf_counter_ns()
    problem = build_problem(config, seeds)
    data_dir = config.telemetry.resolve("data_dir")
    if data_dir is not None and problem.train_set is not None:
        save_data(problem.train_set, problem.test_set, str(data_dir))
    total = config.total_iterations(problem.images_per_epoch)
    engine = OptimizerEngine(
        config.optimizer,
        problem.oracle,
        problem.w0,
        schedule_config=config.schedule,
        sampler_seed=seeds.sampler,
        lr_schedule=LearningRateSchedule.from_config(config.optimizer, total),
    )
    sampler = BatchSampler(problem.train_set, config.batch_size, seeds.shuffle)
    metrics = RunMetrics(variant)
    step_ns: Dict[str, List[int]] = {mode.value: [] for mode in StepMode}

    logger.info("Training %s for %d iterations (seed %d)", variant, total, config.seed)
    error = None
    last_wall = 0
    writer = TelemetryWriter(telemetry_path, queue_size=config.telemetry.queue_size)
    try:
        with writer:
            try:
                for _ in range(total):
                    t0 = time.perf_counter_ns()
                    batch = sampler.next_batch()
                    outcome = engine.step(batch)
                    t1 = time.perf_counter_ns()

                    step_ns[outcome.mode.value].append(t1 - t0)
                    metrics.record_step(outcome, (t1 - t0) / 1e9)
                    wall = outcome.iteration if logical_clock else max(t1 - start_ns, last_wall + 1)
                    last_wall = wall
                    writer.write(TelemetryRecord.from_outcome(outcome, wall))
            except NumericError as e:
                error = str(e)
                logger.error("Run aborted: %s", e)
    except TelemetryError as e:
        error = error or str(e)
        logger.error("Run aborted: %s", e)
    elapsed_ns = time.perf_counter_ns() - start_ns
    records = writer.records

    metadata = {"iteration": engine.iteration, "variant": variant, "seed": config.seed}
    saved_checkpoint = str(save_checkpoint(checkpoint_path, engine.w, problem.spec, metadata))

    train_acc = test_acc = None
    if problem.model is not None:
        train_acc = evaluate_accuracy(problem.model, engine.w, problem.train_set)
        test_acc = evaluate_accuracy(problem.model, engine.w, problem.test_set)

    completed = error is None
    n_done = engine.iteration
    seconds = elapsed_ns / 1e9
    schedule = engine.schedule
    tracker = engine.tracker
    summary = RunSummary(
        variant=variant,
        seed=config.seed,
        iterations_planned=total,
        iterations_completed=n_done,
        train_accuracy=train_acc,
        test_accuracy=test_acc,
        pct_sam=compute_pct_sam(records) if records else 0.0,
        ais=compute_ais(problem.images_per_epoch, sampler.images_seen / problem.images_per_epoch, seconds),
        grad_evals_total=engine.grad_evals_total,
        mode_counts=dict(engine.mode_counts),
        measured_speed_ratio_vs_sam=_measured_speed_ratio(step_ns, sum(map(sum, step_ns.values()))),
        predicted_speed_ratio_vs_sam=(2.0 * n_done / (n_done + engine.mode_counts["SAM"])) if n_done else 1.0,
        final_loss=records[-1].loss if records else None,
        wall_seconds=seconds,
        completed=completed,
        telemetry_complete=completed,
        error=error,
        checkpoint_path=saved_checkpoint,
        s_trajectory=list(schedule.s_trajectory) if schedule else [],
        p_trajectory=list(schedule.p_trajectory) if schedule else [],
        clip_events=tracker.clip_events if tracker else 0,
        degenerate_events=tracker.degenerate_events if tracker else 0,
        config=config.echo(),
    )

    summary_path.parent.mkdir(parents=True, exist_ok=True)
    summary_path.write_text(summary.model_dump_json(indent=2))
    if metrics_path is not None:
        metrics.write(metrics_path)

    run_id = None
    if config.tracking.enabled:
        run_id = log_run(
            config.tracking,
            summary.config,
            metrics={
                "train_accuracy": train_acc,
                "test_accuracy": test_acc,
                "pct_sam": summary.pct_sam,
                "ais": summary.ais,
                "grad_evals_total": summary.grad_evals_total,
                "final_loss": summary.final_loss,
                "completed": float(completed),
            },
            artifacts=[telemetry_path, summary_path, checkpoint_path, metrics_path],
        )

    logger.info("Finished %s: %d/%d iterations, %%SAM %.2f", variant, n_done, total, summary.pct_sam)
    return RunResult(summary=summary, records=records, final_w=engine.w, mlflow_run_id=run_id)


def derived_config(config: RunConfig, suffix: str, updates: Dict[str, dict]) -> RunConfig:
    """Copy of ``config`` with section updates and output file names suffixed."""
    data = config.model_dump(mode="json")
    for section, values in updates.items():
        if isinstance(values, dict):
            data[section].update(values)
        else:
            data[section] = values
    telemetry = data["telemetry"]
    for key in ("telemetry_path", "summary_path", "checkpoint_path", "metrics_path"):
        if telemetry.get(key):
            path = Path(telemetry[key])
            telemetry[key] = str(path.with_name(f"{path.stem}_{suffix}{path.suffix}"))
    return build_config(data)


def _row(result: RunResult, **extra) -> dict:
    s = result.summary
    return {
        **extra,
        "variant": s.variant,
        "seed": s.seed,
        "train_accuracy": s.train_accuracy,
        "test_accuracy": s.test_accuracy,
        "pct_sam": s.pct_sam,
        "ais": s.ais,
        "grad_evals_total": s.grad_evals_total,
        "wall_seconds": s.wall_seconds,
        "measured_speed_ratio_vs_sam": s.measured_speed_ratio_vs_sam,
        "predicted_speed_ratio_vs_sam": s.predicted_speed_ratio_vs_sam,
        "completed": s.completed,
    }


def run_sweep(config: RunConfig, alphas: Sequence[float], seeds: Optional[Sequence[int]] = None) -> pd.DataFrame:
    """One run per (alpha, seed) cell; one summary row per cell."""
    seeds = list(seeds) if seeds else [config.seed]
    rows = []
    for alpha in alphas:
        for seed in seeds:
            cell = derived_config(
                config, f"alpha{alpha:g}_seed{seed}",
                {"seed": seed, "schedule": {"alpha": alpha}},
            )
            logger.info("Sweep cell alpha=%g seed=%d", alpha, seed)
            rows.append(_row(train(cell), alpha=alpha))
    return pd.DataFrame(rows)


def run_compare(
    config: RunConfig,
    variants: Sequence[str],
    seeds: Sequence[int],
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Run every variant over every seed.

    Returns:
        Tuple of (per-run rows, per-variant table with means, standard
        deviations, and AIS, gradient passes and wall time relative to SAM)
    """
    rows = []
    for variant in variants:
        for seed in seeds:
            cell = derived_config(
                config, f"{variant}_seed{seed}",
                {"seed": seed, "optimizer": {"variant": variant}},
            )
            rows.append(_row(train(cell)))
    runs = pd.DataFrame(rows)

    table = runs.groupby("variant", sort=False).agg(
        test_accuracy_mean=("test_accuracy", "mean"),
        test_accuracy_std=("test_accuracy", "std"),
        pct_sam_mean=("pct_sam", "mean"),
        ais_mean=("ais", "mean"),
        grad_evals_mean=("grad_evals_total", "mean"),
        wall_seconds_mean=("wall_seconds", "mean"),
        predicted_speed_ratio_mean=("predicted_speed_ratio_vs_sam", "mean"),
    )
    if "sam" in table.index:
        table["ais_vs_sam"] = table["ais_mean"] / table.loc["sam", "ais_mean"]
        table["grad_evals_vs_sam"] = table["grad_evals_mean"] / table.loc["sam", "grad_evals_mean"]
        table["speed_ratio_vs_sam"] = table.loc["sam", "wall_seconds_mean"] / table["wall_seconds_mean"]
    return runs, table.reset_index()

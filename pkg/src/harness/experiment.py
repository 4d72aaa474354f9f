"""Sliding-window trials comparing the model variants on one test day."""

from __future__ import annotations

import dataclasses
import datetime
import threading
import time
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Optional, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from ..consts import DAY_TYPES, WEEKDAY
from ..errors import DataError, ValidationError
from ..log import logger
from ..predictor import ModelVariant, PredictorConfig, Query, learn, predict
from ..traffic_data import (
    FeatureTable,
    ObservationStore,
    RoadNetwork,
    build_window_matrix,
    day_type_of,
    derive_features,
    read_network_csv,
    read_speeds_csv,
)
from ..utils import ensure_dir
from .stats import metrics, wilcoxon_signed_rank

ALPHA = 0.05
NMF_ROW = "NMF"
RESULT_COLUMNS = ("variant", "trial_hour", "step", "rmse", "mae", "mape", "runtime_s")
SIGNIFICANCE_COLUMNS = ("pair", "metric", "statistic", "p_value", "significant_at_0.05")
SIGNIFICANCE_PAIRS = (
    (ModelVariant.GP, ModelVariant.LGP),
    (ModelVariant.GP_SIDE, ModelVariant.LGP_SIDE),
    (ModelVariant.LGP, ModelVariant.LGR),
    (ModelVariant.LGP_SIDE, ModelVariant.LGR_SIDE),
)
METRICS = ("rmse", "mae", "mape")


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    # pylint: disable=too-many-instance-attributes
    predictor: PredictorConfig = PredictorConfig(ModelVariant.GP)
    day_type: str = WEEKDAY
    trial_hours: tuple[int, ...] = tuple(range(24))
    steps: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    variants: tuple[ModelVariant, ...] = tuple(ModelVariant)
    train_fraction: float = 0.4
    seed: int = 0
    interval_minutes: int = 5
    test_date: Optional[datetime.date] = None
    window_days: Optional[int] = None
    parallel_trials: bool = False
    output: Optional[Path] = None

    def validate(self) -> None:
        if self.day_type not in DAY_TYPES:
            raise ValidationError(f"unknown day type {self.day_type}")
        if not self.steps or min(self.steps) < 1:
            raise ValidationError("steps must be positive")
        if not self.trial_hours or not all(0 <= h <= 23 for h in self.trial_hours):
            raise ValidationError("trial hours must lie in 0..23")
        if not self.variants:
            raise ValidationError("at least one model variant must run")
        if not 0 < self.train_fraction <= 1:
            raise ValidationError(f"train fraction must lie in (0, 1], got {self.train_fraction}")
        if self.test_date is not None and day_type_of(self.test_date) != self.day_type:
            raise ValidationError(f"test date {self.test_date} is not a {self.day_type}")
        self.predictor.validate()

    @classmethod
    def from_config(
        cls, config: Mapping[str, Any], output: Optional[Union[str, Path]] = None
    ) -> ExperimentConfig:
        test_date = config["test_date"]
        return cls(
            predictor=PredictorConfig.from_config(config, config["variants"][0]),
            day_type=config["day_type"],
            trial_hours=tuple(int(h) for h in config["trial_hours"]),
            steps=tuple(int(s) for s in config["steps"]),
            variants=tuple(ModelVariant.parse(v) for v in config["variants"]),
            train_fraction=float(config["train_fraction"]),
            seed=int(config["seed"]),
            interval_minutes=int(config["interval_minutes"]),
            test_date=datetime.date.fromisoformat(test_date) if test_date else None,
            window_days=config["window_days"],
            parallel_trials=bool(config["parallel_trials"]),
            output=Path(output) if output is not None else None,
        )


@dataclasses.dataclass(frozen=True)
class TrialResult:
    variant: str
    trial_hour: int
    step: int
    rmse: float
    mae: float
    mape: float
    runtime_s: float


@dataclasses.dataclass
class ExperimentResult:
    results: list[TrialResult]
    runtimes: list[tuple[str, int, float]]
    significance: pd.DataFrame
    skipped_cells: int
    train_segments: tuple[str, ...]
    test_segments: tuple[str, ...]
    test_day: datetime.date

    def results_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [dataclasses.astuple(r) for r in self.results], columns=list(RESULT_COLUMNS)
        )

    def runtimes_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.runtimes, columns=["variant", "trial_hour", "runtime_s"])

    def summary_by_step(self) -> pd.DataFrame:
        frame = self.results_frame()
        return (
            frame.groupby(["variant", "step"], sort=False)[[*METRICS, "runtime_s"]]
            .mean()
            .reset_index()
        )

    def summary(self) -> pd.DataFrame:
        frame = self.results_frame()
        return frame.groupby("variant", sort=False)[[*METRICS, "runtime_s"]].mean().reset_index()

    def write(self, directory: Union[str, Path]) -> Path:
        directory = ensure_dir(directory)
        options: dict[str, Any] = {"index": False, "float_format": "%.10g"}
        self.results_frame().to_csv(directory / "results.csv", **options)
        self.significance.to_csv(directory / "significance.csv", **options)
        self.runtimes_frame().to_csv(directory / "runtimes.csv", **options)
        self.summary_by_step().to_csv(directory / "summary_by_step.csv", **options)
        self.summary().to_csv(directory / "summary.csv", **options)
        return directory


def split_segments(
    segment_ids: Sequence[str], fraction: float, seed: int
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Seeded disjoint split into training and held-out segments, both sorted."""
    if not segment_ids:
        raise DataError("no covered segments to split")
    ids = sorted(segment_ids)
    permutation = np.random.default_rng(seed).permutation(len(ids))
    n_train = min(len(ids), max(1, int(round(fraction * len(ids)))))
    train = sorted(ids[i] for i in permutation[:n_train])
    test = sorted(ids[i] for i in permutation[n_train:])
    return tuple(train), tuple(test)


@dataclasses.dataclass(frozen=True)
class _TrialOutcome:
    results: list[TrialResult]
    runtimes: list[tuple[str, int, float]]
    skipped: int


class _Trials:
    """Shared, read-only state of one run."""

    # pylint: disable=too-many-arguments
    def __init__(
        self,
        config: ExperimentConfig,
        network: RoadNetwork,
        features: FeatureTable,
        store: ObservationStore,
        test_day: datetime.date,
        train_ids: tuple[str, ...],
    ):
        self.config = config
        self.network = network
        self.features = features
        self.store = store
        self.test_day = test_day
        self.train_ids = train_ids
        self.covered = store.segment_ids
        self.truth, self.truth_mask = store.day_matrix(test_day, self.covered)

    def _queries(self, t: int) -> tuple[list[Query], np.ndarray, np.ndarray, int]:
        queries, truths, steps = [], [], []
        skipped = 0
        for step in self.config.steps:
            col = t + step
            if col >= self.store.n_intervals:
                skipped += len(self.covered)
                continue
            for row, segment_id in enumerate(self.covered):
                if self.truth_mask[row, col]:
                    queries.append(Query(segment_id, col))
                    truths.append(self.truth[row, col])
                    steps.append(step)
                else:
                    skipped += 1
        return queries, np.array(truths, dtype=float), np.array(steps, dtype=int), skipped

    # pylint: disable=too-many-locals
    def run(self, hour: int) -> _TrialOutcome:
        t = hour * 60 // self.store.interval_minutes
        matrix = build_window_matrix(
            self.store,
            t,
            self.config.window_days,
            self.config.day_type,
            self.test_day,
            self.train_ids,
        )
        queries, truths, steps, skipped = self._queries(t)
        if skipped:
            logger.warning(
                "trial %02d:00: %d truth cells missing on %s", hour, skipped, self.test_day
            )
        results: list[TrialResult] = []
        runtimes: list[tuple[str, int, float]] = []
        nmf_seconds: Optional[float] = None
        for variant in self.config.variants:
            predictor_config = dataclasses.replace(self.config.predictor, variant=variant)
            started = time.perf_counter()
            predictor = learn(matrix, self.network, self.features, predictor_config)
            predictions = predict(predictor, queries)
            runtime = time.perf_counter() - started
            runtimes.append((variant.value, hour, runtime))
            if variant.uses_nmf and nmf_seconds is None:
                nmf_seconds = predictor.nmf_seconds
            means = np.array([p.mean for p in predictions], dtype=float)
            for step in self.config.steps:
                chosen = steps == step
                if not chosen.any():
                    continue
                scores = metrics(truths[chosen], means[chosen])
                results.append(
                    TrialResult(
                        variant.value, hour, step, scores.rmse, scores.mae, scores.mape, runtime
                    )
                )
        if nmf_seconds is not None:
            runtimes.append((NMF_ROW, hour, nmf_seconds))
        return _TrialOutcome(results, runtimes, skipped)


def significance_table(results: Sequence[TrialResult]) -> pd.DataFrame:
    """Signed-rank tests between paired variants over per-trial metrics,
    each trial's metric averaged over its steps."""
    frame = pd.DataFrame([dataclasses.astuple(r) for r in results], columns=list(RESULT_COLUMNS))
    per_trial = frame.groupby(["variant", "trial_hour"])[list(METRICS)].mean()
    present = set(frame["variant"])
    rows = []
    for first, second in SIGNIFICANCE_PAIRS:
        if first.value not in present or second.value not in present:
            continue
        paired = per_trial.loc[first.value].join(
            per_trial.loc[second.value], how="inner", lsuffix="_a", rsuffix="_b"
        )
        for metric in METRICS:
            try:
                test = wilcoxon_signed_rank(
                    paired[f"{metric}_a"].to_numpy(), paired[f"{metric}_b"].to_numpy()
                )
            except DataError as exc:
                logger.warning(
                    "skipped %s vs %s on %s: %s", first.value, second.value, metric, exc
                )
                continue
            rows.append(
                (
                    f"{first.value} vs {second.value}",
                    metric,
                    test.statistic,
                    test.p_value,
                    test.p_value < ALPHA,
                )
            )
    return pd.DataFrame(rows, columns=list(SIGNIFICANCE_COLUMNS))


def run_trials(
    config: ExperimentConfig,
    network: RoadNetwork,
    store: ObservationStore,
    on_progress: Optional[Callable[[int, int], None]] = None,
    progress_bar: bool = False,
) -> ExperimentResult:
    """One trial per configured hour of the test day.

    The training/held-out segment split is drawn once. Each variant is timed
    from learning through prediction, factorization included.
    """
    config.validate()
    if store.interval_minutes != config.interval_minutes:
        raise ValidationError(
            f"speeds are binned at {store.interval_minutes} minutes, "
            f"configuration expects {config.interval_minutes}"
        )
    matching = store.days(config.day_type)
    test_day = config.test_date or (matching[-1] if matching else None)
    if test_day is None:
        raise DataError(f"no {config.day_type} observations")
    features = derive_features(network)
    train_ids, test_ids = split_segments(store.segment_ids, config.train_fraction, config.seed)
    logger.info(
        "test day %s: %d training and %d held-out segments, %d trials",
        test_day,
        len(train_ids),
        len(test_ids),
        len(config.trial_hours),
    )
    trials = _Trials(config, network, features, store, test_day, train_ids)
    hours = list(config.trial_hours)
    done = 0
    lock = threading.Lock()

    def run_hour(hour: int) -> _TrialOutcome:
        nonlocal done
        outcome = trials.run(hour)
        with lock:
            done += 1
            if on_progress is not None:
                on_progress(done, len(hours))
        return outcome

    bar = tqdm(total=len(hours), desc="trials", unit="trial", disable=not progress_bar)
    try:
        if config.parallel_trials:
            logger.info("running trials in parallel; runtimes are not comparable")
            with ThreadPoolExecutor() as executor:
                outcomes = []
                for outcome in executor.map(run_hour, hours):
                    outcomes.append(outcome)
                    bar.update()
        else:
            outcomes = []
            for hour in hours:
                outcomes.append(run_hour(hour))
                bar.update()
    finally:
        bar.close()
    results = [r for outcome in outcomes for r in outcome.results]
    return ExperimentResult(
        results=results,
        runtimes=[r for outcome in outcomes for r in outcome.runtimes],
        significance=significance_table(results),
        skipped_cells=sum(outcome.skipped for outcome in outcomes),
        train_segments=train_ids,
        test_segments=test_ids,
        test_day=test_day,
    )


def run_experiment(
    config: ExperimentConfig,
    network_path: Union[str, Path],
    speeds_path: Union[str, Path],
    on_progress: Optional[Callable[[int, int], None]] = None,
    progress_bar: bool = False,
) -> ExperimentResult:
    network = read_network_csv(network_path)
    store = read_speeds_csv(speeds_path, config.interval_minutes, network)
    result = run_trials(config, network, store, on_progress, progress_bar)
    if config.output is not None:
        result.write(config.output)
    return result

"""Command line entry point: `traffic-lgp <command> ...`."""

from __future__ import annotations

import dataclasses
import datetime
import functools
import json
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Callable, Optional

import click

from .config import Config
from .errors import DataError, TrafficLGPError
from .gp import dump_diagnostics
from .harness.experiment import ExperimentConfig, run_trials, split_segments
from .harness.synth import SynthSpec, generate_synthetic
from .localization import cluster_profiles, membership_table, normalize_membership, select_K
from .log import logger, set_verbosity
from .nmf import NMFConfig, factorize, save_factorization
from .predictor import ModelVariant, PredictorConfig, Query, learn, predict, write_predictions
from .traffic_data import (
    FeatureTable,
    ObservationStore,
    RoadNetwork,
    SpeedMatrix,
    build_window_matrix,
    derive_features,
    read_network_csv,
    read_speeds_csv,
)
from .utils import ensure_dir

MODEL_CHOICE = click.Choice([v.value for v in ModelVariant])
CSV_OPTIONS: dict[str, Any] = {"index": False, "float_format": "%.10g"}


def _steps(
    _ctx: click.Context, _param: click.Parameter, value: Optional[str]
) -> Optional[list[int]]:
    if value is None:
        return None
    try:
        steps = [int(part) for part in value.split(",") if part.strip()]
    except ValueError as exc:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}") from exc
    if not steps:
        raise click.BadParameter("at least one step is needed")
    return steps


def common_options(func: Callable[..., Any]) -> Callable[..., Any]:
    options = [
        click.option(
            "--out",
            type=click.Path(file_okay=False, path_type=Path),
            default=Path("out"),
            show_default=True,
            help="Output directory.",
        ),
        click.option("--seed", type=int, default=None, help="Master seed."),
        click.option(
            "--config",
            "config_path",
            type=click.Path(exists=True, dir_okay=False, path_type=Path),
            default=None,
            help="JSON file of configuration keys; flags override it.",
        ),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def data_options(func: Callable[..., Any]) -> Callable[..., Any]:
    existing_file = click.Path(exists=True, dir_okay=False, path_type=Path)
    func = click.option("--speeds", type=existing_file, required=True)(func)
    func = click.option("--network", type=existing_file, required=True)(func)
    return common_options(func)


@dataclasses.dataclass
class _Data:
    config: Config
    network: RoadNetwork
    store: ObservationStore
    train_ids: tuple[str, ...]

    @functools.cached_property
    def features(self) -> FeatureTable:
        return derive_features(self.network)

    def test_day(self) -> datetime.date:
        if self.config["test_date"]:
            return datetime.date.fromisoformat(self.config["test_date"])
        days = self.store.days(self.config["day_type"])
        if not days:
            raise DataError(f"no {self.config['day_type']} observations")
        return days[-1]

    def window(self, t: int) -> SpeedMatrix:
        """Training matrix at interval `t` of the test day, training segments only."""
        return build_window_matrix(
            self.store,
            t,
            self.config["window_days"],
            self.config["day_type"],
            self.test_day(),
            self.train_ids,
        )

    def predictor_config(self, model: str) -> PredictorConfig:
        return PredictorConfig.from_config(self.config, model)


def _load(network: Path, speeds: Path, config_path: Optional[Path], **overrides: Any) -> _Data:
    config = Config.load(config_path, overrides)
    road_network = read_network_csv(network)
    store = read_speeds_csv(speeds, config["interval_minutes"], road_network)
    train_ids, _ = split_segments(store.segment_ids, config["train_fraction"], config["seed"])
    return _Data(config, road_network, store, train_ids)


def _write_json(path: Path, data: Any) -> None:
    with open(path, "w", encoding="utf-8") as file:
        json.dump(data, file, indent=4, default=str)


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Log debug messages.")
def cli(verbose: bool) -> None:
    """Localized Gaussian-process prediction of road segment speeds."""
    set_verbosity(verbose)


# pylint: disable=too-many-arguments
@cli.command()
@common_options
@click.option("--rows", type=int, default=10, show_default=True, help="Node lattice rows.")
@click.option("--cols", type=int, default=10, show_default=True, help="Node lattice columns.")
@click.option("--segments", type=int, default=None, help="Keep only this many segments.")
@click.option("--interval-minutes", type=int, default=5, show_default=True)
@click.option("--spatial-regimes", type=int, default=2, show_default=True)
@click.option("--temporal-regimes", type=int, default=2, show_default=True)
@click.option("--noise-std", type=float, default=1.0, show_default=True)
@click.option("--missing-rate", type=float, default=0.0, show_default=True)
@click.option("--days", type=int, default=10, show_default=True)
@click.option(
    "--start-date",
    type=click.DateTime(formats=["%Y-%m-%d"]),
    default="2024-01-01",
    show_default=True,
)
def synth(
    out: Path,
    seed: Optional[int],
    config_path: Optional[Path],
    rows: int,
    cols: int,
    segments: Optional[int],
    interval_minutes: int,
    spatial_regimes: int,
    temporal_regimes: int,
    noise_std: float,
    missing_rate: float,
    days: int,
    start_date: datetime.datetime,
) -> None:
    """Write a synthetic network.csv and speeds.csv with planted regimes."""
    config = Config.load(config_path, {"seed": seed})
    spec = SynthSpec(
        rows=rows,
        cols=cols,
        n_segments=segments,
        interval_minutes=interval_minutes,
        spatial_regimes=spatial_regimes,
        temporal_regimes=temporal_regimes,
        noise_std=noise_std,
        missing_rate=missing_rate,
        days=days,
        start_date=start_date.date(),
        seed=config["seed"],
    )
    network_path, speeds_path = generate_synthetic(spec, out)
    click.echo(f"{network_path}\n{speeds_path}")


@cli.command("select-k")
@data_options
@click.option("--k-min", type=int, default=1, show_default=True)
@click.option("--k-max", type=int, default=8, show_default=True)
@click.option("--folds", type=int, default=10, show_default=True)
@click.option("--t", "t", type=int, default=0, show_default=True, help="Interval of the test day.")
def select_k(
    network: Path,
    speeds: Path,
    out: Path,
    seed: Optional[int],
    config_path: Optional[Path],
    k_min: int,
    k_max: int,
    folds: int,
    t: int,
) -> None:
    """Choose K by cross-validated explained variance."""
    data = _load(network, speeds, config_path, seed=seed)
    report = select_K(
        data.window(t),
        range(k_min, k_max + 1),
        folds=folds,
        seed=data.config["seed"],
        lam=data.config["lambda"],
        max_iters=data.config["nmf_max_iters"],
        workers=data.config["workers"],
    )
    report.write(ensure_dir(out))
    click.echo(f"K={report.chosen}")


@cli.command("factorize")
@data_options
@click.option("--k", type=int, default=None, help="Cluster count.")
@click.option("--lambda", "lam", type=float, default=None, help="L1 penalty.")
@click.option("--iters", type=int, default=None, help="Coordinate descent cycles.")
@click.option("--t", "t", type=int, default=0, show_default=True, help="Interval of the test day.")
def factorize_command(
    network: Path,
    speeds: Path,
    out: Path,
    seed: Optional[int],
    config_path: Optional[Path],
    k: Optional[int],
    lam: Optional[float],
    iters: Optional[int],
    t: int,
) -> None:
    """Factorize the training matrix and write factors and cluster tables."""
    overrides = {"seed": seed, "k": k, "lambda": lam, "nmf_max_iters": iters}
    data = _load(network, speeds, config_path, **overrides)
    matrix = data.window(t)
    config = data.config
    factorization = factorize(
        matrix,
        NMFConfig(
            k=config["k"],
            lam=config["lambda"],
            max_iters=config["nmf_max_iters"],
            seed=config["seed"],
            rel_tol=config["nmf_rel_tol"],
        ),
    )
    directory = save_factorization(factorization, out)
    spatial, temporal = normalize_membership(factorization, matrix.segment_index)
    cluster_profiles(matrix, spatial).to_csv(directory / "cluster_profiles.csv", **CSV_OPTIONS)
    membership_table(temporal).to_csv(directory / "membership.csv", **CSV_OPTIONS)
    click.echo(f"residual {factorization.residual:.6g} after {factorization.iterations} cycles")


@cli.command()
@data_options
@click.option("--model", type=MODEL_CHOICE, required=True)
@click.option("--t", "t", type=int, default=0, show_default=True, help="Interval of the test day.")
def train(
    network: Path,
    speeds: Path,
    out: Path,
    seed: Optional[int],
    config_path: Optional[Path],
    model: str,
    t: int,
) -> None:
    """Learn a predictor, fit every GP it can use and write their diagnostics."""
    data = _load(network, speeds, config_path, seed=seed)
    predictor = learn(data.window(t), data.network, data.features, data.predictor_config(model))
    for i, j in sorted(predictor.pools):
        route = predictor.local_route(i, j)
        if not route.fallback:
            predictor.model(route)
    directory = ensure_dir(out)
    _write_json(directory / "summary.json", predictor.summary())
    models = {f"{i},{j}": dump_diagnostics(gp) for (i, j), gp in predictor.cache.items()}
    _write_json(directory / "models.json", models)
    click.echo(f"fitted {len(models)} GP models")


@cli.command("predict")
@data_options
@click.option("--model", type=MODEL_CHOICE, required=True)
@click.option("--t", "t", type=int, default=0, show_default=True, help="Interval of the test day.")
@click.option(
    "--steps", callback=_steps, default=None, help="Comma-separated horizons, e.g. 1,2,3."
)
def predict_command(
    network: Path,
    speeds: Path,
    out: Path,
    seed: Optional[int],
    config_path: Optional[Path],
    model: str,
    t: int,
    steps: Optional[Sequence[int]],
) -> None:
    """Predict every covered segment at t + step and write predictions.csv."""
    data = _load(network, speeds, config_path, seed=seed, steps=steps)
    predictor = learn(data.window(t), data.network, data.features, data.predictor_config(model))
    queries = [
        Query(segment_id, t + step)
        for step in data.config["steps"]
        for segment_id in data.store.segment_ids
    ]
    path = write_predictions(predict(predictor, queries), ensure_dir(out) / "predictions.csv")
    click.echo(str(path))


@cli.command()
@data_options
@click.option(
    "--model",
    "models",
    type=MODEL_CHOICE,
    multiple=True,
    help="Run only these variants; repeatable.",
)
@click.option("--steps", callback=_steps, default=None, help="Comma-separated horizons.")
@click.option("--progress/--no-progress", default=False, help="Show a progress bar.")
def evaluate(
    network: Path,
    speeds: Path,
    out: Path,
    seed: Optional[int],
    config_path: Optional[Path],
    models: Sequence[str],
    steps: Optional[Sequence[int]],
    progress: bool,
) -> None:
    """Run the sliding-window experiment and write the result tables."""
    variants = list(models) or None
    data = _load(network, speeds, config_path, seed=seed, steps=steps, variants=variants)
    experiment = ExperimentConfig.from_config(data.config, output=out)
    result = run_trials(experiment, data.network, data.store, progress_bar=progress)
    result.write(out)
    if result.skipped_cells:
        logger.warning("%d truth cells were missing and skipped", result.skipped_cells)
    click.echo(result.summary().to_string(index=False))


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and return its exit code: 0 success, 1 invalid input,
    2 data error, 3 numerical failure."""
    try:
        code = cli.main(
            args=list(argv) if argv is not None else None,
            prog_name="traffic-lgp",
            standalone_mode=False,
        )
    except TrafficLGPError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        return 1
    return code if isinstance(code, int) else 0

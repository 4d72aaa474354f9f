from __future__ import annotations

import dataclasses
import datetime
import tempfile
import time
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import pytest
from scipy.stats import chisquare

from src.errors import DataError, ValidationError
from src.gp import GPConfig
from src.harness.experiment import split_segments
from src.harness.synth import SynthSpec, build_synthetic
from src.localization import LocalSubset, temporal_lookup
from src.predictor import (
    GLOBAL_KEY,
    PREDICTION_COLUMNS,
    ModelVariant,
    PredictorConfig,
    Query,
    learn,
    predict,
    sample_training,
    write_predictions,
)
from src.traffic_data import (
    FeatureTable,
    ObservationStore,
    RoadNetwork,
    SpeedMatrix,
    build_window_matrix,
    derive_features,
    load_network,
    load_speeds,
)

from .conftest import PlantedData, SyntheticStore

FAST_GP = GPConfig(starts=2, max_evals=30)


@dataclasses.dataclass
class Setup:
    network: RoadNetwork
    features: FeatureTable
    matrix: SpeedMatrix
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    def queries(self, t: int) -> list[Query]:
        return [Query(sid, t) for sid in sorted(self.train_ids + self.test_ids)]


def make_setup(network: RoadNetwork, store: ObservationStore, t: int = 8) -> Setup:
    train_ids, test_ids = split_segments(store.segment_ids, 0.5, seed=1)
    matrix = build_window_matrix(store, t, None, "weekday", datetime.date(2024, 1, 8), train_ids)
    return Setup(network, derive_features(network), matrix, train_ids, test_ids)


@pytest.fixture
def setup(small_synthetic: SyntheticStore) -> Setup:
    return make_setup(*small_synthetic)


def config(variant: str, **changes: Any) -> PredictorConfig:
    values = {"t_max": 60, "gp": FAST_GP, "seed": 4}
    values.update(changes)
    return PredictorConfig(variant=ModelVariant.parse(variant), **values)


def pool(n: int) -> LocalSubset:
    return LocalSubset(np.arange(n), np.zeros(n, dtype=int), np.arange(n, dtype=float))


def test_sample_training() -> None:
    rng = np.random.default_rng(0)
    small = pool(4)
    assert sample_training(small, 10, rng) is small
    sample = sample_training(pool(50), 20, rng)
    assert len(sample) == 20
    assert len(set(sample.rows.tolist())) == 20
    assert np.all(np.diff(sample.rows) > 0)
    with pytest.raises(DataError):
        sample_training(pool(0), 10, rng)
    with pytest.raises(ValidationError):
        sample_training(pool(5), 0, rng)


def test_sample_training_is_uniform() -> None:
    rng = np.random.default_rng(1)
    counts = np.zeros(10)
    draws = 3000
    for _ in range(draws):
        counts[sample_training(pool(10), 3, rng).rows] += 1
    assert chisquare(counts, np.full(10, draws * 3 / 10)).pvalue > 1e-3


def test_model_variant_parse() -> None:
    assert ModelVariant.parse(" LGP+ ") is ModelVariant.LGP_SIDE
    assert ModelVariant.parse(ModelVariant.GP) is ModelVariant.GP
    assert ModelVariant.LGR.uses_grid and not ModelVariant.LGR.side
    with pytest.raises(ValidationError):
        ModelVariant.parse("svm")


def test_predictor_config_validation(setup: Setup) -> None:
    for bad in ({"t_max": 1}, {"k": 0}, {"min_local_size": 1}, {"workers": 0}):
        with pytest.raises(ValidationError):
            learn(setup.matrix, setup.network, setup.features, config("lgp", **bad))


def test_global_gp_fits_once(setup: Setup) -> None:
    predictor = learn(setup.matrix, setup.network, setup.features, config("gp"))
    assert predictor.cache.fits == 1
    predictions = predict(predictor, setup.queries(9) + setup.queries(10))
    assert predictor.cache.fits == 1
    assert predictor.cache.keys() == [GLOBAL_KEY]
    assert all((p.cluster_i, p.cluster_j, p.fallback) == (1, 1, False) for p in predictions)
    assert all(p.mean >= 0 and p.variance >= -1e-8 for p in predictions)
    assert predictor.summary()["fitted_keys"] == ["0,0"]


def test_single_cluster_localization_reproduces_global_gp(setup: Setup) -> None:
    queries = setup.queries(9)
    global_predictions = predict(
        learn(setup.matrix, setup.network, setup.features, config("gp")), queries
    )
    local = learn(setup.matrix, setup.network, setup.features, config("lgp", k=1))
    local_predictions = predict(local, queries)
    with tempfile.TemporaryDirectory() as tmp_dir_s:
        first = write_predictions(global_predictions, Path(tmp_dir_s) / "gp.csv")
        second = write_predictions(local_predictions, Path(tmp_dir_s) / "lgp.csv")
        assert first.read_bytes() == second.read_bytes()
        frame = pd.read_csv(first)
    assert list(frame.columns) == list(PREDICTION_COLUMNS)
    assert len(frame) == len(queries)


def test_small_subsets_fall_back_to_the_global_model(setup: Setup) -> None:
    predictor = learn(
        setup.matrix, setup.network, setup.features, config("lgp", k=3, min_local_size=10**6)
    )
    predictions = predict(predictor, setup.queries(9))
    assert all(p.fallback for p in predictions)
    assert predictor.cache.keys() == [GLOBAL_KEY]
    assert {p.cluster_i for p in predictions} <= {1, 2, 3}


def test_queries_route_to_their_clusters(setup: Setup) -> None:
    predictor = learn(setup.matrix, setup.network, setup.features, config("lgp", k=2, lam=1.0))
    queries = setup.queries(9) + setup.queries(30)
    routes = predictor.route(queries)
    spatial, temporal = predictor.spatial, predictor.temporal
    for query, route in zip(queries, routes):
        if query.segment_id in spatial.labels:
            assert route.cluster_i == spatial.labels[query.segment_id]
        assert route.cluster_j == temporal_lookup(query.t, temporal)
        expected = GLOBAL_KEY if route.fallback else (route.cluster_i, route.cluster_j)
        assert route.cache_key == expected
    # Intervals past midnight wrap onto the same temporal cluster.
    next_day = predictor.route([Query(q.segment_id, q.t + 24) for q in queries])
    assert [r.cluster_j for r in next_day] == [r.cluster_j for r in routes]
    predict(predictor, queries)
    assert set(predictor.cache.keys()) == {r.cache_key for r in routes}


def test_planted_regimes_route_to_matching_cluster_pairs(planted_synthetic: PlantedData) -> None:
    data, network, store = planted_synthetic
    matrix = build_window_matrix(store, 12, None, "weekday", datetime.date(2024, 1, 8))
    predictor = learn(
        matrix, network, derive_features(network), config("lgp", k=2, lam=1.0, nmf_max_iters=300)
    )
    queries = [Query(sid, t) for sid in matrix.segment_index for t in range(matrix.n_intervals)]
    routed: dict[tuple[int, int], set[tuple[int, int]]] = {}
    for query, route in zip(queries, predictor.route(queries)):
        regime = (data.spatial_regimes[query.segment_id], int(data.temporal_regimes[query.t]))
        routed.setdefault(regime, set()).add((route.cluster_i, route.cluster_j))
    assert sorted(routed) == [(1, 1), (1, 2), (2, 1), (2, 2)]
    assert all(len(pairs) == 1 for pairs in routed.values())
    (pair,) = routed[(1, 2)]
    # Spatial regime 1 and temporal regime 2 keep their cluster labels in every pair.
    assert pair[0] == next(iter(routed[(1, 1)]))[0]
    assert pair[1] == next(iter(routed[(2, 2)]))[1]
    assert len(set().union(*routed.values())) == 4
    route = predictor.local_route(*pair)
    assert route.cache_key == pair and not route.fallback


def test_grid_variant_routes_by_midpoint(setup: Setup) -> None:
    predictor = learn(setup.matrix, setup.network, setup.features, config("lgr", k=2))
    assert predictor.grid is not None
    assert sum(len(p) for p in predictor.pools.values()) == setup.matrix.nnz
    for query, route in zip(setup.queries(9), predictor.route(setup.queries(9))):
        cell = predictor.grid.locate(*setup.network.midpoint(query.segment_id))
        assert (route.cluster_i, route.cluster_j) == (cell, 0)


def test_parallel_prediction_matches_serial(setup: Setup) -> None:
    queries = setup.queries(9) + setup.queries(20)
    serial = predict(
        learn(setup.matrix, setup.network, setup.features, config("lgp", k=2, lam=1.0)), queries
    )
    parallel = predict(
        learn(
            setup.matrix, setup.network, setup.features, config("lgp", k=2, lam=1.0, workers=4)
        ),
        queries,
    )
    assert serial == parallel


def test_side_information_variant(setup: Setup) -> None:
    predictor = learn(setup.matrix, setup.network, setup.features, config("gp+"))
    predictions = predict(predictor, setup.queries(9))
    assert all(np.isfinite(p.mean) and p.variance >= -1e-8 for p in predictions)
    assert predictor.cache.items()[0][1].theta.use_side_info


def test_predict_validation(setup: Setup) -> None:
    predictor = learn(setup.matrix, setup.network, setup.features, config("gp"))
    assert predict(predictor, []) == []
    with pytest.raises(ValidationError):
        predict(predictor, [Query("nowhere", 3)])
    with pytest.raises(ValidationError):
        predict(predictor, [Query(setup.train_ids[0], -1)])
    # Plain (segment id, interval) tuples are accepted.
    assert len(predict(predictor, [(setup.train_ids[0], 3)])) == 1


@pytest.mark.slow
def test_localized_fitting_is_faster_than_one_large_gp() -> None:
    spec = SynthSpec(
        rows=8,
        cols=8,
        interval_minutes=15,
        spatial_regimes=4,
        temporal_regimes=4,
        days=8,
        seed=11,
    )
    data = build_synthetic(spec)
    network = load_network(data.network.to_dict("records"))
    setup = make_setup(network, load_speeds(data.speeds, 15, network), t=40)
    gp_config = GPConfig(starts=1, max_evals=40)

    started = time.perf_counter()
    learn(setup.matrix, setup.network, setup.features, config("gp", t_max=2000, gp=gp_config))
    global_seconds = time.perf_counter() - started

    started = time.perf_counter()
    local = learn(
        setup.matrix, setup.network, setup.features, config("lgp", k=4, t_max=2000, gp=gp_config)
    )
    for i, j in sorted(local.pools):
        route = local.local_route(i, j)
        if not route.fallback:
            local.model(route)
    local_seconds = time.perf_counter() - started
    assert local_seconds < global_seconds

"""Global, NMF-localized and grid-localized GP predictors of segment speed."""

from __future__ import annotations

import dataclasses
import enum
import threading
import time
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Optional, Union

import numpy as np
import pandas as pd

from .errors import DataError, ValidationError
from .gp import GPConfig, GPModel, InputBatch, fit, predict as gp_predict
from .localization import (
    GridClustering,
    LocalSubset,
    SpatialClustering,
    TemporalClustering,
    grid_partition,
    localize,
    nearest_neighbor_map,
    normalize_membership,
    temporal_lookup,
)
from .log import logger
from .nmf import Factorization, NMFConfig, factorize
from .traffic_data import FeatureTable, RoadNetwork, SpeedMatrix
from .utils import derive_rng, derive_seed

# The global sample draws from the same stream as cluster pair (1, 1), so a
# single-cluster localization reproduces the global model exactly.
GLOBAL_STREAM = (1, 1)
GLOBAL_KEY = (0, 0)

PREDICTION_COLUMNS = (
    "segment_id",
    "t",
    "mean_mph",
    "variance",
    "cluster_i",
    "cluster_j",
    "fallback_flag",
)


class ModelVariant(enum.Enum):
    GP = "gp"
    GP_SIDE = "gp+"
    LGP = "lgp"
    LGP_SIDE = "lgp+"
    LGR = "lgr"
    LGR_SIDE = "lgr+"

    @classmethod
    def parse(cls, name: Union[str, ModelVariant]) -> ModelVariant:
        if isinstance(name, ModelVariant):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError as exc:
            choices = ", ".join(v.value for v in cls)
            raise ValidationError(f"unknown model {name!r}; choose one of {choices}") from exc

    @property
    def side(self) -> bool:
        return self.value.endswith("+")

    @property
    def uses_nmf(self) -> bool:
        return self in (ModelVariant.LGP, ModelVariant.LGP_SIDE)

    @property
    def uses_grid(self) -> bool:
        return self in (ModelVariant.LGR, ModelVariant.LGR_SIDE)

    @property
    def local(self) -> bool:
        return self.uses_nmf or self.uses_grid


@dataclasses.dataclass(frozen=True)
class PredictorConfig:
    variant: ModelVariant
    k: int = 5
    lam: float = 100.0
    t_max: int = 600
    seed: int = 0
    min_local_size: int = 5
    nmf_max_iters: int = 200
    nmf_rel_tol: float = 0.0
    gp: GPConfig = GPConfig()
    workers: int = 1

    def validate(self) -> None:
        if self.t_max < 2:
            raise ValidationError(f"t_max must be at least 2, got {self.t_max}")
        if self.variant.local and self.k < 1:
            raise ValidationError(f"K must be at least 1, got {self.k}")
        if self.min_local_size < 2:
            raise ValidationError("min_local_size must be at least 2")
        if self.workers < 1:
            raise ValidationError("workers must be at least 1")
        if self.gp.starts < 1 or self.gp.max_evals < 1:
            raise ValidationError("GP optimizer needs at least one start and one evaluation")

    def nmf_config(self) -> NMFConfig:
        return NMFConfig(
            k=self.k,
            lam=self.lam,
            max_iters=self.nmf_max_iters,
            seed=self.seed,
            rel_tol=self.nmf_rel_tol,
        )

    @classmethod
    def from_config(
        cls, config: Mapping[str, Any], variant: Union[str, ModelVariant]
    ) -> PredictorConfig:
        return cls(
            variant=ModelVariant.parse(variant),
            k=int(config["k"]),
            lam=float(config["lambda"]),
            t_max=int(config["t_max"]),
            seed=int(config["seed"]),
            min_local_size=int(config["min_local_size"]),
            nmf_max_iters=int(config["nmf_max_iters"]),
            nmf_rel_tol=float(config["nmf_rel_tol"]),
            gp=GPConfig(
                starts=int(config["gp_starts"]),
                max_evals=int(config["gp_max_evals"]),
                squared=bool(config["squared_kernel"]),
            ),
            workers=int(config["workers"]),
        )


@dataclasses.dataclass(frozen=True)
class Query:
    segment_id: str
    t: int


@dataclasses.dataclass(frozen=True)
class Prediction:
    segment_id: str
    t: int
    mean: float
    variance: float
    cluster_i: int
    cluster_j: int
    fallback: bool


class _ModelCache:
    """Fitted models by key. The first caller for a key fits it while later
    callers for that key wait; distinct keys fit concurrently."""

    def __init__(self) -> None:
        self._models: dict[tuple[int, int], GPModel] = {}
        self._locks: dict[tuple[int, int], threading.Lock] = {}
        self._guard = threading.Lock()
        self.fits = 0

    def get(self, key: tuple[int, int], build: Callable[[], GPModel]) -> GPModel:
        with self._guard:
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            model = self._models.get(key)
            if model is None:
                model = build()
                with self._guard:
                    self._models[key] = model
                    self.fits += 1
            return model

    def __contains__(self, key: object) -> bool:
        with self._guard:
            return key in self._models

    def keys(self) -> list[tuple[int, int]]:
        with self._guard:
            return sorted(self._models)

    def items(self) -> list[tuple[tuple[int, int], GPModel]]:
        with self._guard:
            return sorted(self._models.items(), key=lambda item: item[0])


def sample_training(pool: LocalSubset, t_max: int, rng: np.random.Generator) -> LocalSubset:
    """Uniform sample of min(t_max, |pool|) triples without replacement.

    Chosen triples keep their pool order.
    """
    if len(pool) == 0:
        raise DataError("cannot sample training data from an empty pool")
    if t_max < 1:
        raise ValidationError(f"t_max must be positive, got {t_max}")
    if len(pool) <= t_max:
        return pool
    chosen = np.sort(rng.choice(len(pool), size=t_max, replace=False))
    return LocalSubset(pool.rows[chosen], pool.cols[chosen], pool.values[chosen])


@dataclasses.dataclass(frozen=True)
class _Route:
    cache_key: tuple[int, int]
    stream: tuple[int, int]
    cluster_i: int
    cluster_j: int
    fallback: bool


@dataclasses.dataclass
class TrainedPredictor:
    # pylint: disable=too-many-instance-attributes
    config: PredictorConfig
    matrix: SpeedMatrix
    network: RoadNetwork
    features: FeatureTable
    training_features: FeatureTable
    global_pool: LocalSubset
    pools: dict[tuple[int, int], LocalSubset]
    factorization: Optional[Factorization] = None
    spatial: Optional[SpatialClustering] = None
    temporal: Optional[TemporalClustering] = None
    grid: Optional[GridClustering] = None
    nmf_seconds: float = 0.0
    cache: _ModelCache = dataclasses.field(default_factory=_ModelCache)

    @property
    def variant(self) -> ModelVariant:
        return self.config.variant

    def inputs(self, segment_ids: Sequence[str], intervals: np.ndarray) -> InputBatch:
        """GP inputs for (segment, interval) pairs; time is the fraction of the day."""
        tails, heads = self.network.endpoint_arrays(segment_ids)
        n_intervals = self.matrix.n_intervals
        t = (np.asarray(intervals, dtype=int) % n_intervals) / n_intervals
        batch = InputBatch(tails, heads, t.astype(float))
        if self.variant.side:
            node_u, node_v, edge, onehot = self.features.side_blocks(segment_ids)
            batch = dataclasses.replace(
                batch, node_u=node_u, node_v=node_v, edge=edge, onehot=onehot
            )
        return batch

    def _fit(self, pool: LocalSubset, stream: tuple[int, int]) -> GPModel:
        rng = derive_rng(self.config.seed, *stream)
        sample = sample_training(pool, self.config.t_max, rng)
        segment_ids = [self.matrix.segment_index[row] for row in sample.rows]
        started = time.perf_counter()
        model = fit(
            self.inputs(segment_ids, sample.cols),
            sample.values,
            use_side_info=self.variant.side,
            seed=derive_seed(rng),
            config=self.config.gp,
        )
        logger.debug(
            "%s: fitted GP %s on %d of %d triples in %.3fs",
            self.variant.value,
            stream,
            len(sample),
            len(pool),
            time.perf_counter() - started,
        )
        return model

    def model(self, route: _Route) -> GPModel:
        if route.cache_key == GLOBAL_KEY:
            pool = self.global_pool
        else:
            pool = self.pools[route.cache_key]
        return self.cache.get(route.cache_key, lambda: self._fit(pool, route.stream))

    def local_route(self, i: int, j: int) -> _Route:
        key = (i, j)
        if len(self.pools.get(key, ())) < self.config.min_local_size:
            return _Route(GLOBAL_KEY, GLOBAL_STREAM, i, j, True)
        return _Route(key, key, i, j, False)

    def route(self, queries: Sequence[Query]) -> list[_Route]:
        """Resolve every query to exactly one model key."""
        if self.variant in (ModelVariant.GP, ModelVariant.GP_SIDE):
            return [_Route(GLOBAL_KEY, GLOBAL_STREAM, *GLOBAL_STREAM, False)] * len(queries)
        if self.grid is not None:
            return [
                self.local_route(self.grid.locate(*self.network.midpoint(q.segment_id)), 0)
                for q in queries
            ]
        assert self.spatial is not None and self.temporal is not None
        labels = dict(self.spatial.labels)
        unseen = sorted({q.segment_id for q in queries} - labels.keys())
        if unseen:
            raw = self.features.vectors()[self.features.rows(unseen)]
            mapped = nearest_neighbor_map(raw, self.training_features, self.spatial)
            labels.update(zip(unseen, (int(label) for label in mapped)))
        return [
            self.local_route(labels[q.segment_id], temporal_lookup(q.t, self.temporal))
            for q in queries
        ]

    def summary(self) -> dict[str, Any]:
        return {
            "variant": self.variant.value,
            "k": self.config.k if self.variant.local else None,
            "t_max": self.config.t_max,
            "training_segments": len(self.matrix.segment_index),
            "observed_triples": len(self.global_pool),
            "local_subset_sizes": {
                f"{i},{j}": len(pool) for (i, j), pool in sorted(self.pools.items())
            },
            "fitted_keys": [f"{i},{j}" for i, j in self.cache.keys()],
            "nmf_seconds": self.nmf_seconds,
        }


def _check_coverage(matrix: SpeedMatrix, network: RoadNetwork, features: FeatureTable) -> None:
    missing = sorted(set(network.segment_ids) - set(features.segment_ids))
    if missing:
        raise ValidationError(f"no features for segments {missing[:10]}")
    unknown = sorted(set(matrix.segment_index) - set(network.segment_ids))
    if unknown:
        raise ValidationError(f"speed matrix rows not in the network: {unknown[:10]}")


def learn(
    matrix: SpeedMatrix,
    network: RoadNetwork,
    features: FeatureTable,
    config: PredictorConfig,
) -> TrainedPredictor:
    """Prepare a predictor on the observed triples of `matrix`.

    The global variants fit their single GP here; local variants only build
    their partition and fit each local GP on first use.
    """
    config.validate()
    _check_coverage(matrix, network, features)
    if matrix.nnz < 2:
        raise DataError(f"speed matrix has {matrix.nnz} observed entries; at least 2 needed")
    training_features = features.restrict(matrix.segment_index)
    # Kernel side information of every segment is standardized with the
    # statistics of the training segments.
    scaled_features = dataclasses.replace(
        features, mean=training_features.mean, std=training_features.std
    )
    rows, cols, values = matrix.triples()
    predictor = TrainedPredictor(
        config=config,
        matrix=matrix,
        network=network,
        features=scaled_features,
        training_features=training_features,
        global_pool=LocalSubset(rows, cols, values),
        pools={},
    )
    variant = config.variant
    if variant.uses_nmf:
        started = time.perf_counter()
        factorization = factorize(matrix, config.nmf_config())
        predictor.nmf_seconds = time.perf_counter() - started
        spatial, temporal = normalize_membership(factorization, matrix.segment_index)
        predictor.factorization = factorization
        predictor.spatial = spatial
        predictor.temporal = temporal
        predictor.pools = localize(matrix, spatial, temporal)
    elif variant.uses_grid:
        grid = grid_partition(network, matrix.segment_index, config.k)
        cells = np.array([grid.cells[sid] for sid in matrix.segment_index], dtype=int)[rows]
        predictor.grid = grid
        predictor.pools = {
            (cell, 0): LocalSubset(rows[cells == cell], cols[cells == cell], values[cells == cell])
            for cell in range(1, grid.k**2 + 1)
        }
    else:
        predictor.model(_Route(GLOBAL_KEY, GLOBAL_STREAM, *GLOBAL_STREAM, False))
    logger.debug(
        "learned %s on %d segments, %d observed triples",
        variant.value,
        len(matrix.segment_index),
        len(rows),
    )
    return predictor


def _as_queries(queries: Iterable[Union[Query, tuple[str, int]]]) -> list[Query]:
    return [q if isinstance(q, Query) else Query(str(q[0]), int(q[1])) for q in queries]


# pylint: disable=too-many-locals
def predict(
    predictor: TrainedPredictor,
    queries: Iterable[Union[Query, tuple[str, int]]],
) -> list[Prediction]:
    """Predictive mean and variance for every (segment id, interval) query,
    in query order."""
    queries = _as_queries(queries)
    for query in queries:
        if query.segment_id not in predictor.network:
            raise ValidationError(f"unknown segment {query.segment_id}")
        if query.t < 0:
            raise ValidationError(f"negative interval {query.t}")
    if not queries:
        return []
    routes = predictor.route(queries)
    groups: dict[tuple[int, int], list[int]] = {}
    for position, route in enumerate(routes):
        groups.setdefault(route.cache_key, []).append(position)
    fallbacks = sorted({(r.cluster_i, r.cluster_j) for r in routes if r.fallback})
    if fallbacks:
        logger.warning(
            "%s: local subsets %s are too small; using the global sample",
            predictor.variant.value,
            fallbacks,
        )

    def answer(key: tuple[int, int]) -> tuple[list[int], np.ndarray, np.ndarray]:
        positions = groups[key]
        model = predictor.model(routes[positions[0]])
        batch = predictor.inputs(
            [queries[p].segment_id for p in positions],
            np.array([queries[p].t for p in positions]),
        )
        result = gp_predict(model, batch)
        return positions, result.mean, result.variance

    keys = sorted(groups)
    if predictor.config.workers > 1 and len(keys) > 1:
        with ThreadPoolExecutor(max_workers=predictor.config.workers) as executor:
            answers = list(executor.map(answer, keys))
    else:
        answers = [answer(key) for key in keys]
    means = np.empty(len(queries))
    variances = np.empty(len(queries))
    for positions, mean, variance in answers:
        means[positions] = mean
        variances[positions] = variance
    return [
        Prediction(
            segment_id=query.segment_id,
            t=query.t,
            mean=float(means[n]),
            variance=float(variances[n]),
            cluster_i=route.cluster_i,
            cluster_j=route.cluster_j,
            fallback=route.fallback,
        )
        for n, (query, route) in enumerate(zip(queries, routes))
    ]


def predictions_frame(predictions: Sequence[Prediction]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            (p.segment_id, p.t, p.mean, p.variance, p.cluster_i, p.cluster_j, int(p.fallback))
            for p in predictions
        ],
        columns=list(PREDICTION_COLUMNS),
    )


def write_predictions(predictions: Sequence[Prediction], path: Union[str, Path]) -> Path:
    path = Path(path)
    predictions_frame(predictions).to_csv(path, index=False, float_format="%.10g")
    return path

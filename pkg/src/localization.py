"""Spatial and temporal clusters from NMF factors, query-to-cluster mapping,
K selection and the uniform-grid baseline partition."""

from __future__ import annotations

import dataclasses
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from .errors import DataError, ValidationError
from .log import logger
from .nmf import Factorization, NMFConfig, factorize
from .traffic_data import FeatureTable, RoadNetwork, SpeedMatrix


def _normalize_rows(matrix: np.ndarray) -> np.ndarray:
    totals = matrix.sum(axis=1, keepdims=True)
    uniform = np.full(matrix.shape, 1.0 / matrix.shape[1])
    return np.where(totals > 0, matrix / np.where(totals > 0, totals, 1.0), uniform)


@dataclasses.dataclass(frozen=True)
class SpatialClustering:
    membership: np.ndarray
    segment_ids: tuple[str, ...]
    labels: dict[str, int]

    @property
    def k(self) -> int:
        return self.membership.shape[1]

    def label_array(self) -> np.ndarray:
        return np.array([self.labels[sid] for sid in self.segment_ids], dtype=int)


@dataclasses.dataclass(frozen=True)
class TemporalClustering:
    membership: np.ndarray
    labels: dict[int, int]

    @property
    def k(self) -> int:
        return self.membership.shape[0]

    @property
    def n_intervals(self) -> int:
        return self.membership.shape[1]

    def label_array(self) -> np.ndarray:
        return np.array([self.labels[j] for j in range(self.n_intervals)], dtype=int)


def normalize_membership(
    factorization: Factorization, segment_ids: Optional[Sequence[str]] = None
) -> tuple[SpatialClustering, TemporalClustering]:
    """Row-normalize W and column-normalize H; hard labels are 1-based argmaxes.

    All-zero rows and columns become uniform. np.argmax keeps the lowest index on ties.
    """
    W, H = factorization.W, factorization.H
    if segment_ids is None:
        segment_ids = [str(i) for i in range(W.shape[0])]
    if len(segment_ids) != W.shape[0]:
        raise ValidationError("segment ids do not match the rows of W")
    spatial = _normalize_rows(W)
    temporal = _normalize_rows(H.T).T
    spatial_labels = np.argmax(spatial, axis=1) + 1
    temporal_labels = np.argmax(temporal, axis=0) + 1
    return (
        SpatialClustering(
            membership=spatial,
            segment_ids=tuple(segment_ids),
            labels={sid: int(label) for sid, label in zip(segment_ids, spatial_labels)},
        ),
        TemporalClustering(
            membership=temporal,
            labels={j: int(label) for j, label in enumerate(temporal_labels)},
        ),
    )


def nearest_neighbor_map(
    query: np.ndarray,
    features: FeatureTable,
    spatial: SpatialClustering,
) -> np.ndarray:
    """Spatial labels of the training segments nearest to each query.

    `query` holds raw f_r rows (numeric columns then one-hot blocks, as
    FeatureTable.vectors()); `features` is the table restricted to training
    segments, whose statistics z-score both sides. Ties go to the lowest
    segment id.
    """
    if not features.segment_ids:
        raise ValidationError("nearest neighbour mapping needs at least one training segment")
    query = np.atleast_2d(np.asarray(query, dtype=float))
    n_numeric = len(features.numeric_names)
    order = np.argsort(np.array(features.segment_ids, dtype=object), kind="stable")
    training = features.vectors()[order]
    train_space = features.distance_space(training[:, :n_numeric], training[:, n_numeric:])
    query_space = features.distance_space(query[:, :n_numeric], query[:, n_numeric:])
    nearest = np.argmin(cdist(query_space, train_space), axis=1)
    ids = [features.segment_ids[i] for i in order[nearest]]
    return np.array([spatial.labels[sid] for sid in ids], dtype=int)


def temporal_lookup(t: int, temporal: TemporalClustering) -> int:
    """Temporal label of absolute interval `t`, periodic in the day."""
    return temporal.labels[int(t) % temporal.n_intervals]


@dataclasses.dataclass(frozen=True)
class LocalSubset:
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.rows)


def localize(
    D: SpeedMatrix,
    spatial: SpatialClustering,
    temporal: TemporalClustering,
) -> dict[tuple[int, int], LocalSubset]:
    """Partition the observed entries of D into K x K (spatial, temporal) subsets."""
    rows, cols, values = D.triples()
    row_labels = np.array([spatial.labels[sid] for sid in D.segment_index], dtype=int)
    col_labels = temporal.label_array()
    spatial_of = row_labels[rows]
    temporal_of = col_labels[cols]
    subsets = {}
    for i in range(1, spatial.k + 1):
        for j in range(1, temporal.k + 1):
            chosen = (spatial_of == i) & (temporal_of == j)
            subsets[(i, j)] = LocalSubset(rows[chosen], cols[chosen], values[chosen])
    return subsets


def explained_variance(y: np.ndarray, y_hat: np.ndarray) -> float:
    """1 - Var[y - y_hat] / Var[y] with population variances."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.ndim != 1 or len(y) < 2:
        raise ValidationError("explained variance needs two vectors of equal length >= 2")
    variance = np.mean(y**2) - np.mean(y) ** 2
    if variance <= 0:
        raise DataError("explained variance is undefined for constant targets")
    diff = y - y_hat
    return float(1.0 - (np.mean(diff**2) - np.mean(diff) ** 2) / variance)


@dataclasses.dataclass(frozen=True)
class KSelectionReport:
    candidates: tuple[int, ...]
    r2: np.ndarray
    chosen: int

    @property
    def mean_r2(self) -> np.ndarray:
        return self.r2.mean(axis=1)

    @property
    def std_r2(self) -> np.ndarray:
        return self.r2.std(axis=1)

    def long_frame(self) -> pd.DataFrame:
        records = [
            {"K": k, "fold": fold + 1, "r2": self.r2[i, fold]}
            for i, k in enumerate(self.candidates)
            for fold in range(self.r2.shape[1])
        ]
        return pd.DataFrame(records, columns=["K", "fold", "r2"])

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "K": self.candidates,
                "mean_r2": self.mean_r2,
                "std_r2": self.std_r2,
                "chosen": [k == self.chosen for k in self.candidates],
            }
        )

    def write(self, directory: Path) -> None:
        self.long_frame().to_csv(directory / "kselect_long.csv", index=False, float_format="%.10g")
        self.summary_frame().to_csv(
            directory / "kselect_summary.csv", index=False, float_format="%.10g"
        )


# pylint: disable=too-many-arguments,too-many-locals
def select_K(
    D: SpeedMatrix,
    k_range: Sequence[int],
    folds: int = 10,
    seed: int = 0,
    lam: float = 100.0,
    max_iters: int = 200,
    workers: int = 1,
) -> KSelectionReport:
    """Choose K by cross-validated explained variance of held-out entries.

    Observed entries are split into `folds` random disjoint folds; each fold is
    hidden from the factorization and predicted by W @ H. The K with the
    highest mean R^2 wins, the smaller K on ties.
    """
    candidates = tuple(sorted(set(int(k) for k in k_range)))
    if not candidates or candidates[0] < 1 or candidates[-1] > min(D.shape):
        raise ValidationError(f"K range must lie within [1, {min(D.shape)}]")
    if folds < 2:
        raise ValidationError("cross validation needs at least 2 folds")
    rows, cols, values = D.triples()
    permutation = np.random.default_rng(seed).permutation(len(rows))
    fold_entries = np.array_split(permutation, folds)
    if any(len(entries) == 0 for entries in fold_entries):
        raise DataError(f"{len(rows)} observed entries cannot fill {folds} folds")

    def evaluate(task: tuple[int, int]) -> float:
        k_index, fold = task
        entries = fold_entries[fold]
        hidden = np.ones(D.shape, dtype=bool)
        hidden[rows[entries], cols[entries]] = False
        config = NMFConfig(k=candidates[k_index], lam=lam, max_iters=max_iters, seed=seed)
        factors = factorize(D, config, mask=hidden)
        predicted = factors.product()[rows[entries], cols[entries]]
        return explained_variance(values[entries], predicted)

    tasks = [(i, f) for i in range(len(candidates)) for f in range(folds)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            scores = list(executor.map(evaluate, tasks))
    else:
        scores = [evaluate(task) for task in tasks]
    r2 = np.array(scores).reshape(len(candidates), folds)
    chosen = candidates[int(np.argmax(r2.mean(axis=1)))]
    logger.info("selected K=%d from %s", chosen, candidates)
    return KSelectionReport(candidates, r2, chosen)


@dataclasses.dataclass(frozen=True)
class GridClustering:
    cells: dict[str, int]
    bbox: tuple[float, float, float, float]
    k: int

    def locate(self, lon: float, lat: float) -> int:
        """1-based cell of a point; points outside the box clamp to the edge cells."""
        min_lon, min_lat, max_lon, max_lat = self.bbox
        col = _bin(lon, min_lon, max_lon, self.k)
        row = _bin(lat, min_lat, max_lat, self.k)
        return row * self.k + col + 1


def _bin(value: float, low: float, high: float, k: int) -> int:
    if high <= low:
        return 0
    index = int(np.floor((value - low) / (high - low) * k))
    return min(max(index, 0), k - 1)


def grid_partition(network: RoadNetwork, segment_ids: Sequence[str], k: int) -> GridClustering:
    """Split the bounding box of segment midpoints into k x k uniform cells.

    Cells are numbered row-major from the south-west corner; points on the
    north or east edge belong to the last row or column.
    """
    if k < 1:
        raise ValidationError(f"grid dimension must be at least 1, got {k}")
    if not segment_ids:
        raise ValidationError("grid partition needs at least one segment")
    midpoints = np.array([network.midpoint(sid) for sid in segment_ids])
    min_lon, min_lat = midpoints.min(axis=0)
    max_lon, max_lat = midpoints.max(axis=0)
    if min_lon == max_lon and min_lat == max_lat:
        logger.warning("all segment midpoints coincide; using a single grid cell")
        return GridClustering(
            cells={sid: 1 for sid in segment_ids},
            bbox=(min_lon, min_lat, max_lon, max_lat),
            k=1,
        )
    grid = GridClustering(cells={}, bbox=(min_lon, min_lat, max_lon, max_lat), k=k)
    cells = {sid: grid.locate(lon, lat) for sid, (lon, lat) in zip(segment_ids, midpoints)}
    return dataclasses.replace(grid, cells=cells)


def cluster_profiles(D: SpeedMatrix, spatial: SpatialClustering) -> pd.DataFrame:
    """Average observed speed of every spatial cluster at every interval of the day."""
    labels = np.array([spatial.labels[sid] for sid in D.segment_index], dtype=int)
    records = []
    for cluster in range(1, spatial.k + 1):
        members = labels == cluster
        counts = D.mask[members].sum(axis=0)
        sums = np.where(D.mask[members], D.values[members], 0.0).sum(axis=0)
        means = np.divide(sums, counts, out=np.full(D.n_intervals, np.nan), where=counts > 0)
        for interval in range(D.n_intervals):
            records.append(
                {
                    "cluster": cluster,
                    "interval": interval,
                    "mean_mph": means[interval],
                    "segments": int(members.sum()),
                }
            )
    return pd.DataFrame(records, columns=["cluster", "interval", "mean_mph", "segments"])


def membership_table(temporal: TemporalClustering) -> pd.DataFrame:
    """Column-normalized H in long format (heat-map data)."""
    k, m = temporal.membership.shape
    return pd.DataFrame(
        {
            "cluster": np.repeat(np.arange(1, k + 1), m),
            "interval": np.tile(np.arange(m), k),
            "membership": temporal.membership.ravel(),
        }
    )

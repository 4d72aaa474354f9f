"""Road networks, speed observations, sliding-window speed matrices and
per-segment spatial features."""

from __future__ import annotations

import dataclasses
import datetime
import math
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from types import MappingProxyType
from typing import Any, Optional

import networkx as nx
import numpy as np
import pandas as pd

from .consts import DAY_TYPES, DEFAULT_WINDOW_DAYS, MINUTES_PER_DAY, WEEKDAY, WEEKEND
from .errors import ColdStartError, DataError, ValidationError
from .log import logger

NETWORK_COLUMNS = (
    "segment_id",
    "from_node",
    "to_node",
    "from_lon",
    "from_lat",
    "to_lon",
    "to_lat",
    "one_way",
    "speed_limit_mph",
    "lanes",
    "length_m",
    "road_type",
    "direction",
)
SPEED_COLUMNS = ("segment_id", "timestamp", "speed_mph")
TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M"
DIRECTIONS = ("N", "S", "E", "W")

Coordinate = tuple[float, float]


def intervals_per_day(interval_minutes: int) -> int:
    if interval_minutes <= 0 or MINUTES_PER_DAY % interval_minutes:
        raise ValidationError(
            f"interval of {interval_minutes} minutes does not divide a day"
        )
    return MINUTES_PER_DAY // interval_minutes


def day_type_of(day: datetime.date) -> str:
    return WEEKDAY if day.weekday() < 5 else WEEKEND


@dataclasses.dataclass(frozen=True)
class EdgeAttributes:
    one_way: bool
    speed_limit: float
    lanes: int
    length: float
    road_type: str
    direction: str

    def __post_init__(self) -> None:
        if not self.speed_limit > 0:
            raise ValidationError(f"speed limit must be positive: {self.speed_limit}")
        if self.lanes < 1:
            raise ValidationError(f"lane count must be at least 1: {self.lanes}")
        if not self.length > 0:
            raise ValidationError(f"segment length must be positive: {self.length}")


@dataclasses.dataclass(frozen=True)
class Edge:
    source: str
    target: str
    attrs: EdgeAttributes


class RoadNetwork:
    """Directed road graph. Nodes are intersections, edges are segments."""

    def __init__(self, nodes: Mapping[str, Coordinate], edges: Mapping[str, Edge]):
        if not edges:
            raise ValidationError("a road network needs at least one edge")
        for segment_id, edge in edges.items():
            for node in (edge.source, edge.target):
                if node not in nodes:
                    raise ValidationError(
                        f"segment {segment_id} references unknown node {node}"
                    )
        self.nodes: Mapping[str, Coordinate] = MappingProxyType(dict(nodes))
        self.edges: Mapping[str, Edge] = MappingProxyType(dict(edges))
        self.segment_ids: tuple[str, ...] = tuple(sorted(self.edges))
        self._graph = nx.MultiDiGraph()
        self._graph.add_nodes_from(sorted(self.nodes))
        for segment_id in self.segment_ids:
            edge = self.edges[segment_id]
            self._graph.add_edge(edge.source, edge.target, key=segment_id)

    def __len__(self) -> int:
        return len(self.edges)

    def __contains__(self, segment_id: object) -> bool:
        return segment_id in self.edges

    @property
    def graph(self) -> nx.MultiDiGraph:
        return self._graph.copy(as_view=True)

    def degree(self, node: str) -> int:
        """All-degree: in-degree plus out-degree."""
        return int(self._graph.degree(node))

    def endpoints(self, segment_id: str) -> tuple[Coordinate, Coordinate]:
        edge = self.edges[segment_id]
        return self.nodes[edge.source], self.nodes[edge.target]

    def midpoint(self, segment_id: str) -> Coordinate:
        (u_lon, u_lat), (v_lon, v_lat) = self.endpoints(segment_id)
        return (u_lon + v_lon) / 2, (u_lat + v_lat) / 2

    def endpoint_arrays(
        self, segment_ids: Sequence[str]
    ) -> tuple[np.ndarray, np.ndarray]:
        """(n, 2) arrays of tail and head coordinates."""
        tails = np.empty((len(segment_ids), 2))
        heads = np.empty((len(segment_ids), 2))
        for row, segment_id in enumerate(segment_ids):
            tails[row], heads[row] = self.endpoints(segment_id)
        return tails, heads


def _parse_bool(value: Any) -> bool:
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    text = str(value).strip().lower()
    if text in ("1", "true", "yes"):
        return True
    if text in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def load_network(records: Iterable[Mapping[str, Any]]) -> RoadNetwork:
    """Build a validated network from edge records (network CSV columns)."""
    nodes: dict[str, Coordinate] = {}
    edges: dict[str, Edge] = {}
    for record in records:
        try:
            segment_id = str(record["segment_id"])
            endpoints = (
                (str(record["from_node"]), float(record["from_lon"]), float(record["from_lat"])),
                (str(record["to_node"]), float(record["to_lon"]), float(record["to_lat"])),
            )
            attrs = EdgeAttributes(
                one_way=_parse_bool(record["one_way"]),
                speed_limit=float(record["speed_limit_mph"]),
                lanes=int(record["lanes"]),
                length=float(record["length_m"]),
                road_type=str(record["road_type"]),
                direction=str(record["direction"]),
            )
        except KeyError as exc:
            raise ValidationError(f"network record lacks field {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"malformed network record {dict(record)}: {exc}") from exc
        if segment_id in edges:
            raise ValidationError(f"duplicate segment id {segment_id}")
        for node, lon, lat in endpoints:
            if not (math.isfinite(lon) and math.isfinite(lat)):
                raise ValidationError(f"node {node} has non-finite coordinates")
            known = nodes.setdefault(node, (lon, lat))
            if known != (lon, lat):
                raise ValidationError(
                    f"node {node} has conflicting coordinates {known} and {(lon, lat)}"
                )
        edges[segment_id] = Edge(endpoints[0][0], endpoints[1][0], attrs)
    if not edges:
        raise ValidationError("no network records")
    return RoadNetwork(nodes, edges)


def read_network_csv(path: str | Path) -> RoadNetwork:
    try:
        frame = pd.read_csv(
            path,
            dtype={"segment_id": str, "from_node": str, "to_node": str},
            encoding="utf-8",
        )
    except (OSError, pd.errors.ParserError) as exc:
        raise DataError(f"cannot read network file {path}: {exc}") from exc
    missing = [c for c in NETWORK_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"network file {path} lacks columns {missing}")
    return load_network(frame.to_dict("records"))


class ObservationStore:
    """Speed observations binned by (segment, calendar day, interval of day).

    Duplicate observations of one cell are averaged. Rows of every per-day
    matrix follow `segment_ids`.
    """

    def __init__(self, frame: pd.DataFrame, interval_minutes: int, skipped_unknown: int = 0):
        self.interval_minutes = interval_minutes
        self.n_intervals = intervals_per_day(interval_minutes)
        self.skipped_unknown = skipped_unknown
        self.frame = frame.reset_index(drop=True)
        self.segment_ids: tuple[str, ...] = tuple(sorted(frame["segment_id"].unique()))
        self._row = {sid: i for i, sid in enumerate(self.segment_ids)}
        self._days: tuple[datetime.date, ...] = tuple(sorted(frame["day"].unique()))
        self._day_index = {day: i for i, day in enumerate(self._days)}
        shape = (len(self._days), len(self.segment_ids), self.n_intervals)
        self._values = np.zeros(shape)
        self._mask = np.zeros(shape, dtype=bool)
        day_idx = frame["day"].map(self._day_index).to_numpy()
        rows = frame["segment_id"].map(self._row).to_numpy()
        cols = frame["interval"].to_numpy()
        self._values[day_idx, rows, cols] = frame["speed"].to_numpy()
        self._mask[day_idx, rows, cols] = True
        self._values.flags.writeable = False
        self._mask.flags.writeable = False

    def __len__(self) -> int:
        return len(self.frame)

    def days(self, day_type: Optional[str] = None) -> list[datetime.date]:
        if day_type is None:
            return list(self._days)
        return [day for day in self._days if day_type_of(day) == day_type]

    def day_matrix(
        self, day: datetime.date, segment_ids: Optional[Sequence[str]] = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Values and observed mask of one calendar day, rows per `segment_ids`."""
        segment_ids = self.segment_ids if segment_ids is None else segment_ids
        n_rows = len(segment_ids)
        values = np.zeros((n_rows, self.n_intervals))
        mask = np.zeros((n_rows, self.n_intervals), dtype=bool)
        day_idx = self._day_index.get(day)
        if day_idx is None:
            return values, mask
        for out_row, segment_id in enumerate(segment_ids):
            row = self._row.get(segment_id)
            if row is not None:
                values[out_row] = self._values[day_idx, row]
                mask[out_row] = self._mask[day_idx, row]
        return values, mask


def load_speeds(
    records: Iterable[Sequence[Any]] | pd.DataFrame,
    interval_minutes: int,
    network: Optional[RoadNetwork] = None,
) -> ObservationStore:
    """Group (segment_id, timestamp, speed) records into an ObservationStore.

    Timestamps are floored to the interval grid. Records naming segments absent
    from `network` are skipped and counted.
    """
    intervals_per_day(interval_minutes)
    if isinstance(records, pd.DataFrame):
        frame = records.loc[:, list(SPEED_COLUMNS)].copy()
    else:
        frame = pd.DataFrame(list(records), columns=list(SPEED_COLUMNS))
    frame["segment_id"] = frame["segment_id"].astype(str)
    speeds = pd.to_numeric(frame["speed_mph"], errors="coerce")
    bad = frame.loc[~np.isfinite(speeds.to_numpy(dtype=float)), "speed_mph"]
    if len(bad):
        raise DataError(f"speed is not a finite number: {bad.iloc[0]!r}")
    if (speeds < 0).any():
        raise DataError(f"negative speed: {speeds[speeds < 0].iloc[0]}")
    stamps = pd.to_datetime(frame["timestamp"], format=TIMESTAMP_FORMAT, errors="coerce")
    if stamps.isna().any():
        raise DataError(
            f"unparseable timestamp: {frame.loc[stamps.isna(), 'timestamp'].iloc[0]!r}"
        )
    skipped = 0
    if network is not None:
        known = frame["segment_id"].isin(network.edges.keys())
        skipped = int((~known).sum())
        if skipped:
            logger.warning("skipped %d observations of unknown segments", skipped)
        frame, speeds, stamps = frame[known], speeds[known], stamps[known]
    minutes = stamps.dt.hour * 60 + stamps.dt.minute
    binned = pd.DataFrame(
        {
            "segment_id": frame["segment_id"].to_numpy(),
            "day": stamps.dt.date.to_numpy(),
            "interval": (minutes // interval_minutes).astype(int).to_numpy(),
            "speed": speeds.astype(float).to_numpy(),
        }
    )
    # Sorting first makes the averages independent of record order.
    binned = binned.sort_values(["segment_id", "day", "interval", "speed"], kind="mergesort")
    grouped = binned.groupby(["segment_id", "day", "interval"], sort=True)["speed"].mean()
    return ObservationStore(grouped.reset_index(), interval_minutes, skipped)


def read_speeds_csv(
    path: str | Path, interval_minutes: int, network: Optional[RoadNetwork] = None
) -> ObservationStore:
    try:
        frame = pd.read_csv(path, dtype={"segment_id": str, "timestamp": str}, encoding="utf-8")
    except (OSError, pd.errors.ParserError) as exc:
        raise DataError(f"cannot read speed file {path}: {exc}") from exc
    missing = [c for c in SPEED_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"speed file {path} lacks columns {missing}")
    return load_speeds(frame, interval_minutes, network)


@dataclasses.dataclass(frozen=True)
class SpeedMatrix:
    values: np.ndarray
    mask: np.ndarray
    segment_index: tuple[str, ...]
    interval_minutes: int
    day_type: str

    def __post_init__(self) -> None:
        n_intervals = intervals_per_day(self.interval_minutes)
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise ValidationError("speed values and mask must be matrices of one shape")
        if self.values.shape != (len(self.segment_index), n_intervals):
            raise ValidationError(
                f"speed matrix shape {self.values.shape} does not match "
                f"{len(self.segment_index)} segments x {n_intervals} intervals"
            )
        if self.day_type not in DAY_TYPES:
            raise ValidationError(f"unknown day type {self.day_type}")
        observed = self.values[self.mask]
        if not np.all(np.isfinite(observed)) or np.any(observed < 0):
            raise ValidationError("observed speeds must be finite and non-negative")
        values = np.where(self.mask, self.values, 0.0)
        mask = self.mask.astype(bool, copy=True)
        values.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def n_intervals(self) -> int:
        return self.values.shape[1]

    @property
    def nnz(self) -> int:
        return int(self.mask.sum())

    def row_of(self, segment_id: str) -> int:
        return self.segment_index.index(segment_id)

    def triples(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Observed (row, column, value) triples in row-major order."""
        rows, cols = np.nonzero(self.mask)
        return rows, cols, self.values[rows, cols]

    def subset_rows(self, segment_ids: Sequence[str]) -> SpeedMatrix:
        index = {sid: i for i, sid in enumerate(self.segment_index)}
        rows = [index[sid] for sid in segment_ids]
        return SpeedMatrix(
            values=self.values[rows],
            mask=self.mask[rows],
            segment_index=tuple(segment_ids),
            interval_minutes=self.interval_minutes,
            day_type=self.day_type,
        )

    def check_coverage(self) -> None:
        """Raise ColdStartError when a row or a column has no observation."""
        empty_rows = [self.segment_index[i] for i in np.flatnonzero(~self.mask.any(axis=1))]
        empty_cols = [int(j) for j in np.flatnonzero(~self.mask.any(axis=0))]
        if empty_rows or empty_cols:
            raise ColdStartError(
                "speed matrix has unobserved rows or columns", empty_rows, empty_cols
            )


# pylint: disable=too-many-arguments,too-many-locals
def build_window_matrix(
    store: ObservationStore,
    t: int,
    window_days: Optional[int],
    day_type: str,
    test_day: Optional[datetime.date] = None,
    segment_ids: Optional[Sequence[str]] = None,
) -> SpeedMatrix:
    """Average the sliding window of `window_days` matching days ending at
    interval `t` of the test day.

    Columns up to and including `t` average the test day and the
    `window_days - 1` preceding matching days; later columns average the
    `window_days` preceding matching days.
    """
    if day_type not in DAY_TYPES:
        raise ValidationError(f"unknown day type {day_type}")
    if window_days is None:
        window_days = DEFAULT_WINDOW_DAYS[day_type]
    if window_days < 1:
        raise ValidationError("window_days must be at least 1")
    n_intervals = store.n_intervals
    if not 0 <= t < n_intervals:
        raise ValidationError(f"interval {t} outside 0..{n_intervals - 1}")
    matching = store.days(day_type)
    if test_day is None:
        if not matching:
            raise DataError(f"no {day_type} observations")
        test_day = matching[-1]
    if day_type_of(test_day) != day_type:
        raise ValidationError(f"test day {test_day} is not a {day_type}")
    previous = [day for day in matching if day < test_day]
    if len(previous) < window_days:
        raise DataError(
            f"need {window_days} {day_type}s before {test_day}, found {len(previous)}"
        )
    segment_ids = store.segment_ids if segment_ids is None else tuple(segment_ids)
    sums = np.zeros((len(segment_ids), n_intervals))
    counts = np.zeros((len(segment_ids), n_intervals))
    early = np.arange(n_intervals) <= t
    for day in [test_day] + previous[len(previous) - window_days + 1 :]:
        values, mask = store.day_matrix(day, segment_ids)
        mask = mask & early
        sums += np.where(mask, values, 0.0)
        counts += mask
    for day in previous[len(previous) - window_days :]:
        values, mask = store.day_matrix(day, segment_ids)
        mask = mask & ~early
        sums += np.where(mask, values, 0.0)
        counts += mask
    observed = counts > 0
    matrix = SpeedMatrix(
        values=np.divide(sums, counts, out=np.zeros_like(sums), where=observed),
        mask=observed,
        segment_index=tuple(segment_ids),
        interval_minutes=store.interval_minutes,
        day_type=day_type,
    )
    matrix.check_coverage()
    return matrix


def compute_edge_betweenness(network: RoadNetwork) -> dict[str, float]:
    """Edge betweenness over ordered intersection pairs with hop-count shortest paths.

    Every segment is split by a node of its own so parallel segments count as
    distinct paths; only intersections act as path endpoints.
    """
    graph = nx.DiGraph()
    graph.add_nodes_from(network.nodes)
    for segment_id in network.segment_ids:
        edge = network.edges[segment_id]
        graph.add_edge(edge.source, ("segment", segment_id))
        graph.add_edge(("segment", segment_id), edge.target)
    scores = nx.edge_betweenness_centrality_subset(
        graph, sources=list(network.nodes), targets=list(network.nodes), normalized=False
    )
    return {
        segment_id: float(scores[(network.edges[segment_id].source, ("segment", segment_id))])
        for segment_id in network.segment_ids
    }


@dataclasses.dataclass(frozen=True)
class FeatureTable:
    """Per-segment side information f_r = (f_u; f_v; f_(u,v)).

    Numeric columns are node-wise features of the tail, the same features of
    the head, then edge-wise features. Categorical features follow as one-hot
    blocks. `mean` and `std` standardize the numeric columns over the rows of
    this table.
    """

    segment_ids: tuple[str, ...]
    node_names: tuple[str, ...]
    edge_names: tuple[str, ...]
    categories: tuple[tuple[str, tuple[str, ...]], ...]
    node_u: np.ndarray
    node_v: np.ndarray
    edge: np.ndarray
    onehot: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    @property
    def numeric(self) -> np.ndarray:
        return np.hstack([self.node_u, self.node_v, self.edge])

    @property
    def numeric_names(self) -> tuple[str, ...]:
        return (
            tuple(f"u_{name}" for name in self.node_names)
            + tuple(f"v_{name}" for name in self.node_names)
            + self.edge_names
        )

    @property
    def category_slices(self) -> tuple[slice, ...]:
        slices = []
        start = 0
        for _, levels in self.categories:
            slices.append(slice(start, start + len(levels)))
            start += len(levels)
        return tuple(slices)

    def vectors(self) -> np.ndarray:
        """Raw f_r rows, numeric columns then one-hot blocks."""
        return np.hstack([self.numeric, self.onehot])

    def index(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.segment_ids)}

    def rows(self, segment_ids: Sequence[str]) -> np.ndarray:
        index = self.index()
        try:
            return np.array([index[sid] for sid in segment_ids], dtype=int)
        except KeyError as exc:
            raise ValidationError(f"no features for segment {exc}") from exc

    def zscore(self, numeric: np.ndarray) -> np.ndarray:
        """Standardize numeric columns with this table's statistics.

        Zero-variance columns map to 0.
        """
        scale = np.where(self.std > 0, self.std, 1.0)
        return np.where(self.std > 0, (numeric - self.mean) / scale, 0.0)

    def restrict(self, segment_ids: Sequence[str]) -> FeatureTable:
        """Sub-table over `segment_ids` with statistics recomputed on it."""
        rows = self.rows(segment_ids)
        numeric = self.numeric[rows]
        return dataclasses.replace(
            self,
            segment_ids=tuple(segment_ids),
            node_u=self.node_u[rows],
            node_v=self.node_v[rows],
            edge=self.edge[rows],
            onehot=self.onehot[rows],
            mean=numeric.mean(axis=0),
            std=numeric.std(axis=0),
        )

    def distance_space(self, numeric: np.ndarray, onehot: np.ndarray) -> np.ndarray:
        """Nearest-neighbour coordinates: z-scored numeric columns with
        non-zero variance, then the one-hot blocks, unweighted."""
        keep = self.std > 0
        return np.hstack([self.zscore(numeric)[:, keep], onehot])

    def side_blocks(
        self, segment_ids: Sequence[str]
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Standardized kernel side information for `segment_ids`."""
        rows = self.rows(segment_ids)
        z = self.zscore(self.numeric[rows])
        n_node = len(self.node_names)
        return (
            z[:, :n_node],
            z[:, n_node : 2 * n_node],
            z[:, 2 * n_node :],
            self.onehot[rows],
        )


def derive_features(network: RoadNetwork) -> FeatureTable:
    segment_ids = network.segment_ids
    betweenness = compute_edge_betweenness(network)
    edges = [network.edges[sid] for sid in segment_ids]
    node_u = np.array([[network.degree(e.source)] for e in edges], dtype=float)
    node_v = np.array([[network.degree(e.target)] for e in edges], dtype=float)
    edge = np.array(
        [
            [e.attrs.speed_limit, e.attrs.lanes, e.attrs.length, betweenness[sid]]
            for sid, e in zip(segment_ids, edges)
        ],
        dtype=float,
    )
    raw_categories = {
        "road_type": [e.attrs.road_type for e in edges],
        "direction": [e.attrs.direction for e in edges],
        "one_way": ["1" if e.attrs.one_way else "0" for e in edges],
    }
    categories = []
    blocks = []
    for name, values in raw_categories.items():
        levels = tuple(sorted(set(values)))
        lookup = {level: i for i, level in enumerate(levels)}
        block = np.zeros((len(values), len(levels)))
        block[np.arange(len(values)), [lookup[v] for v in values]] = 1.0
        categories.append((name, levels))
        blocks.append(block)
    numeric = np.hstack([node_u, node_v, edge])
    return FeatureTable(
        segment_ids=segment_ids,
        node_names=("degree",),
        edge_names=("speed_limit", "lanes", "length", "betweenness"),
        categories=tuple(categories),
        node_u=node_u,
        node_v=node_v,
        edge=edge,
        onehot=np.hstack(blocks),
        mean=numeric.mean(axis=0),
        std=numeric.std(axis=0),
    )

"""Synthetic road networks and speed records with planted regimes.

Segments of a two-way lattice fall into spatial regimes by vertical band;
intervals of the day fall into temporal regimes by contiguous block. Every
(spatial, temporal) regime pair has its own mean speed.
"""

from __future__ import annotations

import dataclasses
import datetime
import itertools
import math
from pathlib import Path
from typing import Optional

import networkx as nx
import numpy as np
import pandas as pd

from ..errors import ValidationError
from ..log import logger
from ..traffic_data import NETWORK_COLUMNS, SPEED_COLUMNS, intervals_per_day
from ..utils import ensure_dir

SPEED_FLOOR = 0.5
ROAD_TYPES = ("local", "collector", "arterial", "highway")
NODE_SPACING = 0.01
METERS_PER_DEGREE = 111_000.0


@dataclasses.dataclass(frozen=True)
class SynthSpec:
    # pylint: disable=too-many-instance-attributes
    rows: int = 10
    cols: int = 10
    n_segments: Optional[int] = None
    interval_minutes: int = 5
    spatial_regimes: int = 2
    temporal_regimes: int = 2
    regime_means: Optional[tuple[tuple[float, ...], ...]] = None
    base_speed: float = 20.0
    regime_step: float = 8.0
    diurnal_amplitude: float = 2.0
    noise_std: float = 1.0
    missing_rate: float = 0.0
    days: int = 10
    start_date: datetime.date = datetime.date(2024, 1, 1)
    one_way_rate: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.regime_means is None:
            object.__setattr__(self, "regime_means", self.default_means())
        self.validate()

    def default_means(self) -> tuple[tuple[float, ...], ...]:
        # Row s is shifted cyclically so the mean matrix has full rank.
        k_s, k_t = self.spatial_regimes, self.temporal_regimes
        return tuple(
            tuple(
                self.base_speed + self.regime_step * (s * k_t + (s + tau) % k_t)
                for tau in range(k_t)
            )
            for s in range(k_s)
        )

    @property
    def n_intervals(self) -> int:
        return intervals_per_day(self.interval_minutes)

    @property
    def max_segments(self) -> int:
        return 2 * (self.rows * (self.cols - 1) + self.cols * (self.rows - 1))

    def validate(self) -> None:
        intervals_per_day(self.interval_minutes)
        if self.rows < 2 or self.cols < 2:
            raise ValidationError("the node lattice needs at least 2 x 2 nodes")
        if self.n_segments is not None and not 1 <= self.n_segments <= self.max_segments:
            raise ValidationError(
                f"a {self.rows}x{self.cols} lattice holds 1..{self.max_segments} segments"
            )
        if not 1 <= self.spatial_regimes <= self.cols:
            raise ValidationError("spatial regimes must number between 1 and the lattice width")
        if not 1 <= self.temporal_regimes <= self.n_intervals:
            raise ValidationError(
                "temporal regimes must number between 1 and the intervals per day"
            )
        means = np.asarray(self.regime_means, dtype=float)
        if means.shape != (self.spatial_regimes, self.temporal_regimes):
            raise ValidationError(
                f"regime means must be {self.spatial_regimes} x {self.temporal_regimes}"
            )
        if np.any(means <= 0):
            raise ValidationError("regime means must be positive")
        if self.noise_std < 0 or self.diurnal_amplitude < 0:
            raise ValidationError("noise std and diurnal amplitude must be non-negative")
        if not 0 <= self.missing_rate < 1:
            raise ValidationError(f"missing rate must lie in [0, 1), got {self.missing_rate}")
        if not 0 <= self.one_way_rate <= 1:
            raise ValidationError("one-way rate must lie in [0, 1]")
        if self.days < 1:
            raise ValidationError("at least one day must be generated")

    def well_separated(self) -> bool:
        means = np.asarray(self.regime_means, dtype=float).ravel()
        gaps = [abs(a - b) for a, b in itertools.combinations(means, 2)]
        return not gaps or min(gaps) >= 3 * self.noise_std


@dataclasses.dataclass(frozen=True)
class SyntheticData:
    network: pd.DataFrame
    speeds: pd.DataFrame
    spatial_regimes: dict[str, int]
    temporal_regimes: np.ndarray
    template: np.ndarray

    @property
    def segment_ids(self) -> list[str]:
        return list(self.network["segment_id"])


def _lattice_edges(spec: SynthSpec) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """Directed lattice edges ordered so that every prefix is weakly connected."""
    lattice = nx.grid_2d_graph(spec.rows, spec.cols)
    depth = nx.single_source_shortest_path_length(lattice, (0, 0))
    undirected = sorted(
        (tuple(sorted(pair)) for pair in lattice.edges()),
        key=lambda pair: (max(depth[pair[0]], depth[pair[1]]), pair),
    )
    directed = []
    for a, b in undirected:
        directed.extend([(a, b), (b, a)])
    if spec.n_segments is not None:
        directed = directed[: spec.n_segments]
    return directed


def _direction(tail: tuple[int, int], head: tuple[int, int]) -> str:
    d_row, d_col = head[0] - tail[0], head[1] - tail[1]
    if d_col:
        return "E" if d_col > 0 else "W"
    return "N" if d_row > 0 else "S"


def _network_frame(
    spec: SynthSpec, rng: np.random.Generator
) -> tuple[pd.DataFrame, dict[str, int]]:
    records = []
    regimes = {}
    edges = _lattice_edges(spec)
    width = len(str(len(edges)))
    for n, (tail, head) in enumerate(edges):
        segment_id = f"s{n:0{width}d}"
        mid_col = (tail[1] + head[1]) / 2
        band = int(mid_col / (spec.cols - 1) * spec.spatial_regimes)
        regime = min(band, spec.spatial_regimes - 1)
        regimes[segment_id] = regime + 1
        records.append(
            {
                "segment_id": segment_id,
                "from_node": f"n{tail[0]}_{tail[1]}",
                "to_node": f"n{head[0]}_{head[1]}",
                "from_lon": tail[1] * NODE_SPACING,
                "from_lat": tail[0] * NODE_SPACING,
                "to_lon": head[1] * NODE_SPACING,
                "to_lat": head[0] * NODE_SPACING,
                "one_way": int(rng.random() < spec.one_way_rate),
                "speed_limit_mph": 25 + 10 * regime,
                "lanes": 1 + regime,
                "length_m": round(NODE_SPACING * METERS_PER_DEGREE * rng.uniform(0.9, 1.1), 1),
                "road_type": ROAD_TYPES[regime % len(ROAD_TYPES)],
                "direction": _direction(tail, head),
            }
        )
    return pd.DataFrame(records, columns=list(NETWORK_COLUMNS)), regimes


def regime_template(spec: SynthSpec, spatial: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free speeds (segments x intervals) and the temporal regime of each interval."""
    m = spec.n_intervals
    temporal = np.minimum(np.arange(m) * spec.temporal_regimes // m, spec.temporal_regimes - 1) + 1
    means = np.asarray(spec.regime_means, dtype=float)
    diurnal = spec.diurnal_amplitude * np.sin(2 * math.pi * np.arange(m) / m)
    template = means[spatial[:, None] - 1, temporal[None, :] - 1] + diurnal[None, :]
    return np.maximum(template, SPEED_FLOOR), temporal


def _drop_entries(rng: np.random.Generator, shape: tuple[int, int], rate: float) -> np.ndarray:
    """Observed mask with entries dropped at `rate`, restoring one entry in any
    emptied row or column."""
    observed = rng.random(shape) >= rate
    for row in np.flatnonzero(~observed.any(axis=1)):
        observed[row, rng.integers(shape[1])] = True
    for col in np.flatnonzero(~observed.any(axis=0)):
        observed[rng.integers(shape[0]), col] = True
    return observed


def build_synthetic(spec: SynthSpec) -> SyntheticData:
    rng = np.random.default_rng(spec.seed)
    network, regimes = _network_frame(spec, rng)
    segment_ids = list(network["segment_id"])
    spatial = np.array([regimes[sid] for sid in segment_ids], dtype=int)
    template, temporal = regime_template(spec, spatial)
    minutes = np.arange(spec.n_intervals) * spec.interval_minutes
    clock = [f"T{m // 60:02d}:{m % 60:02d}" for m in minutes]
    frames = []
    for offset in range(spec.days):
        day = spec.start_date + datetime.timedelta(days=offset)
        speeds = template + rng.normal(0.0, spec.noise_std, template.shape)
        speeds = np.maximum(speeds, SPEED_FLOOR)
        observed = _drop_entries(rng, template.shape, spec.missing_rate)
        rows, cols = np.nonzero(observed)
        frames.append(
            pd.DataFrame(
                {
                    "segment_id": np.array(segment_ids, dtype=object)[rows],
                    "timestamp": [f"{day.isoformat()}{clock[c]}" for c in cols],
                    "speed_mph": speeds[rows, cols],
                }
            )
        )
    speeds_frame = pd.concat(frames, ignore_index=True).loc[:, list(SPEED_COLUMNS)]
    return SyntheticData(network, speeds_frame, regimes, temporal, template)


def generate_synthetic(spec: SynthSpec, out_dir: str | Path) -> tuple[Path, Path]:
    """Write network.csv and speeds.csv into `out_dir`."""
    data = build_synthetic(spec)
    out_dir = ensure_dir(out_dir)
    network_path = out_dir / "network.csv"
    speeds_path = out_dir / "speeds.csv"
    data.network.to_csv(network_path, index=False, float_format="%.6f")
    data.speeds.to_csv(speeds_path, index=False, float_format="%.6f")
    logger.info(
        "wrote %d segments and %d speed records over %d days at %d-minute intervals",
        len(data.network),
        len(data.speeds),
        spec.days,
        spec.interval_minutes,
    )
    return network_path, speeds_path

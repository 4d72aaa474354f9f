from __future__ import annotations

import datetime
from typing import Any

import numpy as np
import pytest

from src.harness.synth import SynthSpec, SyntheticData, build_synthetic
from src.traffic_data import ObservationStore, RoadNetwork, load_network, load_speeds

SyntheticStore = tuple[RoadNetwork, ObservationStore]
PlantedData = tuple[SyntheticData, RoadNetwork, ObservationStore]


def edge_record(
    segment_id: str,
    source: str,
    target: str,
    coords: dict[str, tuple[float, float]],
    **attrs: Any,
) -> dict[str, Any]:
    record = {
        "segment_id": segment_id,
        "from_node": source,
        "to_node": target,
        "from_lon": coords[source][0],
        "from_lat": coords[source][1],
        "to_lon": coords[target][0],
        "to_lat": coords[target][1],
        "one_way": 0,
        "speed_limit_mph": 30,
        "lanes": 2,
        "length_m": 100.0,
        "road_type": "arterial",
        "direction": "E",
    }
    record.update(attrs)
    return record


def network_from_edges(
    edges: list[tuple[str, str, str]], coords: dict[str, tuple[float, float]] | None = None
) -> RoadNetwork:
    nodes = sorted({n for _, a, b in edges for n in (a, b)})
    if coords is None:
        coords = {node: (float(i), float(i % 3)) for i, node in enumerate(nodes)}
    return load_network([edge_record(sid, a, b, coords) for sid, a, b in edges])


@pytest.fixture
def line_network() -> RoadNetwork:
    """a -> b -> c and back."""
    return network_from_edges(
        [("ab", "a", "b"), ("ba", "b", "a"), ("bc", "b", "c"), ("cb", "c", "b")]
    )


def stamp(day: datetime.date, minutes: int) -> str:
    return f"{day.isoformat()}T{minutes // 60:02d}:{minutes % 60:02d}"


def store_from_matrix(
    values: dict[datetime.date, dict[str, list[float]]], interval_minutes: int
) -> ObservationStore:
    """Observation store from per-day rows; NaN marks an unobserved cell."""
    records = []
    for day, rows in values.items():
        for segment_id, speeds in rows.items():
            for j, speed in enumerate(speeds):
                if not np.isnan(speed):
                    records.append((segment_id, stamp(day, j * interval_minutes), speed))
    return load_speeds(records, interval_minutes)


SMALL_SPEC = SynthSpec(
    rows=4,
    cols=4,
    interval_minutes=60,
    spatial_regimes=2,
    temporal_regimes=2,
    noise_std=0.5,
    days=8,
    seed=3,
)


@pytest.fixture
def small_synthetic() -> SyntheticStore:
    data = build_synthetic(SMALL_SPEC)
    network = load_network(data.network.to_dict("records"))
    store = load_speeds(data.speeds, SMALL_SPEC.interval_minutes, network)
    return network, store


# Noiseless 2 x 2 regimes with a dominant diagonal, so each regime owns one factor.
PLANTED_SPEC = SynthSpec(
    rows=4,
    cols=4,
    interval_minutes=60,
    spatial_regimes=2,
    temporal_regimes=2,
    regime_means=((60.0, 10.0), (10.0, 60.0)),
    diurnal_amplitude=0.0,
    noise_std=0.0,
    one_way_rate=0.0,
    days=8,
    seed=5,
)


@pytest.fixture
def planted_synthetic() -> PlantedData:
    data = build_synthetic(PLANTED_SPEC)
    network = load_network(data.network.to_dict("records"))
    store = load_speeds(data.speeds, PLANTED_SPEC.interval_minutes, network)
    return data, network, store

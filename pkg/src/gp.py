"""Gaussian-process regression over (road segment, time of day) inputs.

The spacetime kernel is separable: a directed edge kernel on the endpoint
coordinates times a temporal kernel, scaled by the signal variance. Side
information enters additively. Hyperparameters maximize the log marginal
likelihood with a derivative-free multi-start search in log space.
"""

from __future__ import annotations

import dataclasses
import math
from collections.abc import Sequence
from typing import Callable, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.distance import cdist

from .errors import NumericalError, ValidationError
from .log import logger

SIGMA2_MIN = 1e-6
SCALE_BOUNDS = (1e-3, 1e3)
JITTER_START = 1e-8
JITTER_MAX = 1e-2
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
INV_PHI = (math.sqrt(5) - 1) / 2
LINE_EVALS = 6
LINE_WIDTH = 2.0
MIN_LINE_WIDTH = 1e-4

Coordinate = tuple[float, float]


def rbf(
    x: np.ndarray | float, x2: np.ndarray | float, lengthscale: float, squared: bool = False
) -> float:
    """exp(-||x - x2|| / l^2), or exp(-||x - x2||^2 / (2 l^2)) when `squared`."""
    if lengthscale <= 0:
        raise ValidationError(f"lengthscale must be positive, got {lengthscale}")
    difference = np.asarray(x, dtype=float) - np.asarray(x2, dtype=float)
    distance = float(np.linalg.norm(np.atleast_1d(difference)))
    if squared:
        return math.exp(-distance * distance / (2 * lengthscale**2))
    return math.exp(-distance / lengthscale**2)


def edge_kernel(
    edge: tuple[Coordinate, Coordinate],
    other: tuple[Coordinate, Coordinate],
    lengthscale: float,
    squared: bool = False,
) -> float:
    """k((u, v), (u', v')) = k(u, u') k(v, v') on endpoint coordinates."""
    (u, v), (u2, v2) = edge, other
    return rbf(np.array(u), np.array(u2), lengthscale, squared) * rbf(
        np.array(v), np.array(v2), lengthscale, squared
    )


@dataclasses.dataclass(frozen=True)
class SideInfo:
    node_u: np.ndarray
    node_v: np.ndarray
    edge: np.ndarray
    onehot: np.ndarray

    def __post_init__(self) -> None:
        if len(self.node_u) != len(self.node_v):
            raise ValidationError("node-wise side information of tail and head differ in length")


@dataclasses.dataclass(frozen=True)
class GPInput:
    tail: Coordinate
    head: Coordinate
    t: float
    side: Optional[SideInfo] = None

    def __post_init__(self) -> None:
        if not all(math.isfinite(c) for c in (*self.tail, *self.head)):
            raise ValidationError("GP input coordinates must be finite")
        if not 0 <= self.t < 1:
            raise ValidationError(f"time label must lie in [0, 1), got {self.t}")


@dataclasses.dataclass(frozen=True)
class InputBatch:
    """Column-wise storage of many GP inputs."""

    tails: np.ndarray
    heads: np.ndarray
    t: np.ndarray
    node_u: Optional[np.ndarray] = None
    node_v: Optional[np.ndarray] = None
    edge: Optional[np.ndarray] = None
    onehot: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.t)

    @property
    def has_side(self) -> bool:
        return self.node_u is not None

    @property
    def side_shape(self) -> tuple[int, int, int]:
        if not self.has_side:
            return (0, 0, 0)
        return (self.node_u.shape[1], self.edge.shape[1], self.onehot.shape[1])

    @classmethod
    def from_inputs(cls, inputs: Sequence[GPInput]) -> InputBatch:
        if not inputs:
            raise ValidationError("no GP inputs")
        with_side = [q.side is not None for q in inputs]
        if any(with_side) and not all(with_side):
            raise ValidationError("side information present on some inputs only")
        batch = cls(
            tails=np.array([q.tail for q in inputs], dtype=float),
            heads=np.array([q.head for q in inputs], dtype=float),
            t=np.array([q.t for q in inputs], dtype=float),
        )
        if all(with_side):
            batch = dataclasses.replace(
                batch,
                node_u=np.array([q.side.node_u for q in inputs], dtype=float),
                node_v=np.array([q.side.node_v for q in inputs], dtype=float),
                edge=np.array([q.side.edge for q in inputs], dtype=float),
                onehot=np.array([q.side.onehot for q in inputs], dtype=float),
            )
        return batch

    def take(self, indices: np.ndarray) -> InputBatch:
        def pick(array: Optional[np.ndarray]) -> Optional[np.ndarray]:
            return None if array is None else array[indices]

        return InputBatch(
            tails=self.tails[indices],
            heads=self.heads[indices],
            t=self.t[indices],
            node_u=pick(self.node_u),
            node_v=pick(self.node_v),
            edge=pick(self.edge),
            onehot=pick(self.onehot),
        )


@dataclasses.dataclass(frozen=True)
class KernelConfig:
    spatial_lengthscale: float
    temporal_lengthscale: float
    signal_variance: float
    noise_variance: float
    side_lengthscales: tuple[float, ...] = ()
    use_side_info: bool = False
    squared: bool = False

    def __post_init__(self) -> None:
        scales = (
            self.spatial_lengthscale,
            self.temporal_lengthscale,
            self.signal_variance,
            *self.side_lengthscales,
        )
        if not all(math.isfinite(s) and s > 0 for s in scales):
            raise ValidationError(f"kernel scales must be finite and positive: {scales}")
        if not (math.isfinite(self.noise_variance) and self.noise_variance > 0):
            raise ValidationError(f"noise variance must be positive, got {self.noise_variance}")

    def to_vector(self) -> np.ndarray:
        return np.log(
            [
                self.spatial_lengthscale,
                self.temporal_lengthscale,
                self.signal_variance,
                self.noise_variance,
                *self.side_lengthscales,
            ]
        )

    def from_vector(self, vector: np.ndarray) -> KernelConfig:
        values = np.exp(vector)
        return dataclasses.replace(
            self,
            spatial_lengthscale=float(values[0]),
            temporal_lengthscale=float(values[1]),
            signal_variance=float(values[2]),
            noise_variance=float(values[3]),
            side_lengthscales=tuple(float(v) for v in values[4:]),
        )

    def to_dict(self) -> dict[str, object]:
        return dataclasses.asdict(self)


def _scaled_distance(a: np.ndarray, b: np.ndarray, squared: bool) -> np.ndarray:
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    distance = cdist(a, b)
    return distance * distance / 2 if squared else distance


class _PairGeometry:
    """Kernel distances between two batches; only the hyperparameters vary
    during optimization, so these are computed once per fit."""

    def __init__(self, a: InputBatch, b: InputBatch, squared: bool, use_side_info: bool):
        self.spatial = _scaled_distance(a.tails, b.tails, squared) + _scaled_distance(
            a.heads, b.heads, squared
        )
        self.temporal = _scaled_distance(a.t, b.t, squared)
        self.side: list[np.ndarray] = []
        self.linear: Optional[np.ndarray] = None
        if use_side_info:
            if not (a.has_side and b.has_side):
                raise ValidationError("side information requested but absent on an input")
            if a.side_shape != b.side_shape:
                raise ValidationError(
                    f"side information dimensions differ: {a.side_shape} vs {b.side_shape}"
                )
            for i in range(a.node_u.shape[1]):
                self.side.append(
                    _scaled_distance(a.node_u[:, i], b.node_u[:, i], squared)
                    + _scaled_distance(a.node_v[:, i], b.node_v[:, i], squared)
                )
            for j in range(a.edge.shape[1]):
                self.side.append(_scaled_distance(a.edge[:, j], b.edge[:, j], squared))
            # Sum over categorical blocks of one-hot dot products.
            self.linear = a.onehot @ b.onehot.T

    def covariance(self, theta: KernelConfig) -> np.ndarray:
        exponent = (
            self.spatial / theta.spatial_lengthscale**2
            + self.temporal / theta.temporal_lengthscale**2
        )
        matrix = theta.signal_variance * np.exp(-exponent)
        if theta.use_side_info:
            if len(theta.side_lengthscales) != len(self.side):
                raise ValidationError(
                    f"{len(self.side)} side-information groups but "
                    f"{len(theta.side_lengthscales)} lengthscales"
                )
            for lengthscale, distance in zip(theta.side_lengthscales, self.side):
                matrix += np.exp(-distance / lengthscale**2)
            matrix += self.linear
        return matrix


def kernel_matrix(a: InputBatch, b: InputBatch, theta: KernelConfig) -> np.ndarray:
    return _PairGeometry(a, b, theta.squared, theta.use_side_info).covariance(theta)


def spacetime_kernel(q: GPInput, q2: GPInput, theta: KernelConfig) -> float:
    batch = InputBatch.from_inputs([q])
    other = InputBatch.from_inputs([q2])
    return float(kernel_matrix(batch, other, theta)[0, 0])


def gram(
    inputs: InputBatch | Sequence[GPInput], theta: KernelConfig, noise: bool = True
) -> np.ndarray:
    """Gram matrix of `inputs`; with `noise`, sigma^2 sits on the diagonal."""
    batch = inputs if isinstance(inputs, InputBatch) else InputBatch.from_inputs(inputs)
    matrix = kernel_matrix(batch, batch, theta)
    matrix = (matrix + matrix.T) / 2
    if noise:
        matrix[np.diag_indices_from(matrix)] += theta.noise_variance
    return matrix


def factor_gram(matrix: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor, escalating diagonal jitter from 1e-8 up to 1e-2."""
    jitter = 0.0
    while True:
        try:
            shifted = matrix if jitter == 0 else matrix + jitter * np.eye(len(matrix))
            lower, _ = cho_factor(shifted, lower=True, check_finite=True)
            if jitter > 0:
                logger.debug("gram factorization needed jitter %.1e", jitter)
            return np.tril(lower), jitter
        except (LinAlgError, ValueError) as exc:
            jitter = JITTER_START if jitter == 0 else jitter * 10
            if jitter > JITTER_MAX:
                raise NumericalError(
                    "gram matrix is not positive definite even with jitter"
                ) from exc


def _lml_from_factor(lower: np.ndarray, deviation: np.ndarray) -> tuple[float, np.ndarray]:
    alpha = cho_solve((lower, True), deviation)
    value = (
        -0.5 * float(deviation @ alpha)
        - float(np.sum(np.log(np.diag(lower))))
        - len(deviation) * HALF_LOG_2PI
    )
    return value, alpha


def log_marginal_likelihood(
    inputs: InputBatch | Sequence[GPInput],
    y: np.ndarray,
    theta: KernelConfig,
    mean: float,
) -> float:
    lower, _ = factor_gram(gram(inputs, theta))
    value, _ = _lml_from_factor(lower, np.asarray(y, dtype=float) - mean)
    if not math.isfinite(value):
        raise NumericalError("log marginal likelihood is not finite")
    return value


@dataclasses.dataclass(frozen=True)
class GPConfig:
    starts: int = 4
    max_evals: int = 200
    squared: bool = False


@dataclasses.dataclass(frozen=True)
class PredictiveDistribution:
    """Mean clamped at 0 mph with the raw mean kept; variance is unclamped."""

    mean: np.ndarray
    variance: np.ndarray
    raw_mean: np.ndarray

    def __len__(self) -> int:
        return len(self.mean)


@dataclasses.dataclass(frozen=True)
class GPModel:
    inputs: InputBatch
    y: np.ndarray
    theta: KernelConfig
    mean: float
    lower: np.ndarray
    alpha: np.ndarray
    jitter: float
    lml: float
    lml_trace: tuple[float, ...] = ()

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def condition(
        cls,
        inputs: InputBatch | Sequence[GPInput],
        y: np.ndarray,
        theta: KernelConfig,
        mean: Optional[float] = None,
    ) -> GPModel:
        """Posterior of a GP with fixed hyperparameters."""
        batch = inputs if isinstance(inputs, InputBatch) else InputBatch.from_inputs(inputs)
        y = np.asarray(y, dtype=float)
        if len(y) != len(batch) or len(y) < 1:
            raise ValidationError("GP needs as many responses as inputs, at least one")
        mean = float(np.mean(y)) if mean is None else mean
        lower, jitter = factor_gram(gram(batch, theta))
        lml, alpha = _lml_from_factor(lower, y - mean)
        return cls(batch, y, theta, mean, lower, alpha, jitter, lml)


def _prior_variance(batch: InputBatch, theta: KernelConfig) -> np.ndarray:
    variance = np.full(len(batch), theta.signal_variance)
    if theta.use_side_info:
        variance += len(theta.side_lengthscales) + np.sum(batch.onehot**2, axis=1)
    return variance


def predict(model: GPModel, queries: InputBatch | Sequence[GPInput]) -> PredictiveDistribution:
    """Posterior mean and variance of the latent speed at each query."""
    batch = queries if isinstance(queries, InputBatch) else InputBatch.from_inputs(queries)
    if model.theta.use_side_info and batch.side_shape != model.inputs.side_shape:
        raise ValidationError(
            f"query side information {batch.side_shape} does not match "
            f"training side information {model.inputs.side_shape}"
        )
    cross = kernel_matrix(model.inputs, batch, model.theta)
    raw_mean = model.mean + cross.T @ model.alpha
    solved = cho_solve((model.lower, True), cross)
    variance = _prior_variance(batch, model.theta) - np.sum(cross * solved, axis=0)
    return PredictiveDistribution(
        mean=np.maximum(raw_mean, 0.0),
        variance=variance,
        raw_mean=raw_mean,
    )


def _median_distance(distance: np.ndarray) -> float:
    upper = distance[np.triu_indices_from(distance, k=1)]
    positive = upper[upper > 0]
    return float(np.median(positive)) if len(positive) else 1.0


class _Search:
    """Coordinate-wise golden-section ascent of the LML in log space.

    Each coordinate keeps its own window: it halves when the line optimum
    lands well inside it and doubles back towards LINE_WIDTH otherwise.
    """

    # pylint: disable=too-many-arguments
    def __init__(
        self,
        objective: Callable[[np.ndarray], float],
        lower: np.ndarray,
        upper: np.ndarray,
        budget: int,
    ):
        self.objective = objective
        self.lower = lower
        self.upper = upper
        self.budget = budget
        self.evals = 0
        self.trace: list[float] = []
        self.widths = np.full(len(lower), LINE_WIDTH)

    def evaluate(self, x: np.ndarray) -> float:
        self.evals += 1
        value = self.objective(x)
        best = max(self.trace[-1], value) if self.trace else value
        self.trace.append(best)
        return value

    def _line(self, x: np.ndarray, coord: int) -> tuple[float, float]:
        width = self.widths[coord]
        a = max(self.lower[coord], x[coord] - width)
        b = min(self.upper[coord], x[coord] + width)

        def at(value: float) -> float:
            point = x.copy()
            point[coord] = value
            return self.evaluate(point)

        c, d = b - INV_PHI * (b - a), a + INV_PHI * (b - a)
        fc, fd = at(c), at(d)
        best = max((fc, c), (fd, d))
        for _ in range(LINE_EVALS - 2):
            if fc > fd:
                b, d, fd = d, c, fc
                c = b - INV_PHI * (b - a)
                fc = at(c)
                best = max(best, (fc, c))
            else:
                a, c, fc = c, d, fd
                d = a + INV_PHI * (b - a)
                fd = at(d)
                best = max(best, (fd, d))
        return best

    def run(self, start: np.ndarray) -> tuple[float, np.ndarray]:
        x = np.clip(start, self.lower, self.upper)
        value = self.evaluate(x)
        coord = 0
        while self.budget - self.evals >= LINE_EVALS:
            if self.upper[coord] > self.lower[coord]:
                line_value, line_x = self._line(x, coord)
                moved = 0.0
                if line_value > value:
                    moved = abs(line_x - x[coord])
                    value = line_value
                    x = x.copy()
                    x[coord] = line_x
                width = self.widths[coord]
                if moved < width / 2:
                    self.widths[coord] = max(width / 2, MIN_LINE_WIDTH)
                else:
                    self.widths[coord] = min(width * 2, LINE_WIDTH)
            coord = (coord + 1) % len(x)
        return value, x


# pylint: disable=too-many-locals
def fit(
    inputs: InputBatch | Sequence[GPInput],
    y: np.ndarray,
    use_side_info: bool,
    seed: int,
    config: GPConfig = GPConfig(),
    initial: Optional[KernelConfig] = None,
) -> GPModel:
    """Fit hyperparameters by maximizing the LML from several starts.

    The prior mean is the mean response. Starts are one heuristic, the rest
    random perturbations of it, plus `initial` when given; the evaluation
    budget is shared evenly between starts.
    """
    batch = inputs if isinstance(inputs, InputBatch) else InputBatch.from_inputs(inputs)
    y = np.asarray(y, dtype=float)
    if len(batch) < 2 or len(y) != len(batch):
        raise ValidationError("GP fitting needs at least two inputs with matching responses")
    if not np.all(np.isfinite(y)):
        raise ValidationError("GP responses must be finite")
    mean = float(np.mean(y))
    deviation = y - mean
    variance = float(np.var(y))
    geometry = _PairGeometry(batch, batch, config.squared, use_side_info)

    n_side = len(geometry.side)
    lower = np.log([SCALE_BOUNDS[0]] * 3 + [SIGMA2_MIN] + [SCALE_BOUNDS[0]] * n_side)
    upper = np.log(
        [SCALE_BOUNDS[1]] * 3 + [max(variance, 10 * SIGMA2_MIN)] + [SCALE_BOUNDS[1]] * n_side
    )
    heuristic = KernelConfig(
        spatial_lengthscale=math.sqrt(_median_distance(geometry.spatial)),
        temporal_lengthscale=math.sqrt(_median_distance(geometry.temporal)),
        signal_variance=max(variance, SCALE_BOUNDS[0]),
        noise_variance=max(0.1 * variance, SIGMA2_MIN),
        side_lengthscales=tuple(math.sqrt(_median_distance(d)) for d in geometry.side),
        use_side_info=use_side_info,
        squared=config.squared,
    )
    rng = np.random.default_rng(seed)
    base = np.clip(heuristic.to_vector(), lower, upper)
    starts = [base] + [
        np.clip(base + rng.normal(0.0, 1.0, len(base)), lower, upper)
        for _ in range(config.starts - 1)
    ]
    if initial is not None:
        chosen = dataclasses.replace(initial, use_side_info=use_side_info, squared=config.squared)
        starts.append(np.clip(chosen.to_vector(), lower, upper))

    def objective(x: np.ndarray) -> float:
        theta = heuristic.from_vector(x)
        matrix = geometry.covariance(theta)
        matrix[np.diag_indices_from(matrix)] += theta.noise_variance
        try:
            factor, _ = factor_gram(matrix)
        except NumericalError:
            return -math.inf
        value, _ = _lml_from_factor(factor, deviation)
        return value if math.isfinite(value) else -math.inf

    budget = max(config.max_evals // len(starts), 1)
    best_value, best_x = -math.inf, base
    trace: list[float] = []
    for start in starts:
        search = _Search(objective, lower, upper, budget)
        value, x = search.run(start)
        trace.extend(search.trace)
        if value > best_value:
            best_value, best_x = value, x
    if not math.isfinite(best_value):
        raise NumericalError("every optimizer start failed to factorize the gram matrix")
    theta = heuristic.from_vector(best_x)
    model = GPModel.condition(batch, y, theta, mean)
    return dataclasses.replace(model, lml_trace=tuple(trace))


def dump_diagnostics(model: GPModel) -> dict[str, object]:
    return {
        "theta": model.theta.to_dict(),
        "prior_mean": model.mean,
        "n_train": len(model),
        "jitter": model.jitter,
        "lml": model.lml,
        "lml_trace": list(model.lml_trace),
    }

"""Sparse non-negative matrix factorization by cyclic coordinate descent.

The loss is half the squared residual over observed entries plus an L1
penalty on both factors. Each coordinate takes a truncated one-variable
Newton step, which exactly minimizes its quadratic subproblem on [0, inf).
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd

from .errors import ColdStartError, DataError, ValidationError
from .log import logger
from .traffic_data import SpeedMatrix
from .utils import ensure_dir

MatrixLike = Union[SpeedMatrix, np.ndarray]


@dataclasses.dataclass(frozen=True)
class NMFConfig:
    k: int
    lam: float = 100.0
    max_iters: int = 200
    seed: int = 0
    rel_tol: float = 0.0

    def validate(self, shape: tuple[int, int]) -> None:
        if self.k < 1:
            raise ValidationError(f"cluster count must be at least 1, got {self.k}")
        if self.k > min(shape):
            raise ValidationError(
                f"cluster count {self.k} exceeds min{shape} of the speed matrix"
            )
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValidationError(f"lambda must be finite and non-negative, got {self.lam}")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be at least 1")
        if self.rel_tol < 0:
            raise ValidationError("rel_tol must be non-negative")


@dataclasses.dataclass(frozen=True)
class Factorization:
    W: np.ndarray
    H: np.ndarray
    residual_trace: tuple[float, ...]
    loss_trace: tuple[float, ...]
    config: NMFConfig

    def __post_init__(self) -> None:
        for name in ("W", "H"):
            factor = np.array(getattr(self, name), dtype=float)
            factor.flags.writeable = False
            object.__setattr__(self, name, factor)

    @property
    def k(self) -> int:
        return self.W.shape[1]

    @property
    def iterations(self) -> int:
        return len(self.residual_trace)

    @property
    def residual(self) -> float:
        return self.residual_trace[-1] if self.residual_trace else float("nan")

    def product(self) -> np.ndarray:
        return self.W @ self.H


def _as_arrays(D: MatrixLike, mask: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(D, SpeedMatrix):
        values, observed = D.values, D.mask
    else:
        values = np.asarray(D, dtype=float)
        observed = np.ones(values.shape, dtype=bool)
    if mask is not None:
        observed = observed & np.asarray(mask, dtype=bool)
    return np.where(observed, values, 0.0), observed


def masked_loss(
    D: MatrixLike,
    W: np.ndarray,
    H: np.ndarray,
    lam: float,
    mask: Optional[np.ndarray] = None,
) -> float:
    values, observed = _as_arrays(D, mask)
    residual = np.where(observed, values - W @ H, 0.0)
    return float(0.5 * np.sum(residual**2) + lam * (W.sum() + H.sum()))


def _update_w(
    W: np.ndarray, H: np.ndarray, R: np.ndarray, weights: np.ndarray, lam: float
) -> None:
    # Rows of W are independent given H, so each column k is updated for all
    # rows at once; this equals a row-by-row sweep.
    for k in range(W.shape[1]):
        h = H[k]
        curvature = weights @ (h * h)
        gradient = lam - R @ h
        old = W[:, k].copy()
        step = np.divide(gradient, curvature, out=np.zeros_like(gradient), where=curvature > 0)
        new = np.where(curvature > 0, np.maximum(0.0, old - step), old)
        R -= weights * np.outer(new - old, h)
        W[:, k] = new


def _update_w_dense(W: np.ndarray, H: np.ndarray, D: np.ndarray, lam: float) -> None:
    DHt = D @ H.T
    HHt = H @ H.T
    for k in range(W.shape[1]):
        curvature = HHt[k, k]
        if curvature <= 0:
            continue
        gradient = W @ HHt[:, k] - DHt[:, k] + lam
        W[:, k] = np.maximum(0.0, W[:, k] - gradient / curvature)


def _cycle(
    values: np.ndarray,
    observed: np.ndarray,
    W: np.ndarray,
    H: np.ndarray,
    lam: float,
) -> float:
    """One cycle in place: every column of W, then every row of H."""
    if observed.all():
        _update_w_dense(W, H, values, lam)
        Ht = H.T.copy()
        _update_w_dense(Ht, W.T, values.T, lam)
        H[:] = Ht.T
        residual = values - W @ H
    else:
        weights = observed.astype(float)
        R = weights * (values - W @ H)
        _update_w(W, H, R, weights, lam)
        Ht = H.T.copy()
        Rt = R.T.copy()
        _update_w(Ht, W.T, Rt, weights.T, lam)
        H[:] = Ht.T
        # Recomputed rather than carried over to avoid drift.
        residual = weights * (values - W @ H)
    return float(np.sum(residual**2))


def cd_cycle(
    D: MatrixLike,
    W: np.ndarray,
    H: np.ndarray,
    lam: float,
    mask: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray, float]:
    """One coordinate descent cycle on copies of W and H.

    Returns the updated factors and the masked squared residual after the cycle.
    """
    values, observed = _as_arrays(D, mask)
    W = np.array(W, dtype=float)
    H = np.array(H, dtype=float)
    if W.shape[0] != values.shape[0] or H.shape[1] != values.shape[1] or W.shape[1] != H.shape[0]:
        raise ValidationError(
            f"factor shapes {W.shape} and {H.shape} do not match matrix {values.shape}"
        )
    residual = _cycle(values, observed, W, H, lam)
    return W, H, residual


def initial_factors(
    values: np.ndarray, observed: np.ndarray, k: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Uniform draws on [0, sqrt(mean observed / k)), so W @ H matches D's scale."""
    rng = np.random.default_rng(seed)
    mean = float(values[observed].mean()) if observed.any() else 0.0
    scale = np.sqrt(max(mean, 0.0) / k)
    n_rows, n_cols = values.shape
    return rng.uniform(0.0, 1.0, (n_rows, k)) * scale, rng.uniform(0.0, 1.0, (k, n_cols)) * scale


def factorize(
    D: MatrixLike, config: NMFConfig, mask: Optional[np.ndarray] = None
) -> Factorization:
    """Factorize D into non-negative W (N x K) and H (K x M).

    `mask` additionally hides observed entries, e.g. a cross-validation fold.
    """
    values, observed = _as_arrays(D, mask)
    config.validate(values.shape)
    empty_rows = np.flatnonzero(~observed.any(axis=1))
    empty_cols = np.flatnonzero(~observed.any(axis=0))
    if len(empty_rows) or len(empty_cols):
        if isinstance(D, SpeedMatrix):
            row_ids = [D.segment_index[i] for i in empty_rows]
        else:
            row_ids = [str(i) for i in empty_rows]
        raise ColdStartError(
            "cannot factorize a matrix with unobserved rows or columns",
            row_ids,
            [int(j) for j in empty_cols],
        )
    W, H = initial_factors(values, observed, config.k, config.seed)
    residuals: list[float] = []
    losses: list[float] = []
    for iteration in range(config.max_iters):
        residual = _cycle(values, observed, W, H, config.lam)
        residuals.append(residual)
        losses.append(0.5 * residual + config.lam * float(W.sum() + H.sum()))
        if config.rel_tol > 0 and iteration > 0:
            previous = residuals[-2]
            if previous == 0 or abs(previous - residual) / previous < config.rel_tol:
                logger.debug("factorization converged after %d cycles", iteration + 1)
                break
    logger.debug(
        "factorized %dx%d matrix with K=%d: residual %.6g after %d cycles",
        *values.shape,
        config.k,
        residuals[-1],
        len(residuals),
    )
    return Factorization(W, H, tuple(residuals), tuple(losses), config)


def impute(D: MatrixLike, factorization: Factorization) -> np.ndarray:
    """Complete matrix W @ H clamped at zero; observed entries are approximated too."""
    values, _ = _as_arrays(D)
    product = factorization.product()
    if product.shape != values.shape:
        raise ValidationError(f"factorization shape {product.shape} does not match {values.shape}")
    return np.maximum(product, 0.0)


def trace_frame(factorization: Factorization) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "cycle": np.arange(1, factorization.iterations + 1),
            "residual": factorization.residual_trace,
            "loss": factorization.loss_trace,
        }
    )


def save_factorization(factorization: Factorization, directory: str | Path) -> Path:
    directory = ensure_dir(directory)
    np.savetxt(directory / "W.csv", factorization.W, fmt="%.17g", delimiter=",")
    np.savetxt(directory / "H.csv", factorization.H, fmt="%.17g", delimiter=",")
    trace_frame(factorization).to_csv(directory / "trace.csv", index=False, float_format="%.17g")
    metadata = {
        "k": factorization.k,
        "lambda": factorization.config.lam,
        "seed": factorization.config.seed,
        "max_iters": factorization.config.max_iters,
        "rel_tol": factorization.config.rel_tol,
        "iterations": factorization.iterations,
        "final_residual": factorization.residual,
    }
    with open(directory / "factorization.json", "w", encoding="utf-8") as file:
        json.dump(metadata, file, indent=4)
    return directory


def load_factorization(directory: str | Path) -> Factorization:
    directory = Path(directory)
    try:
        with open(directory / "factorization.json", encoding="utf-8") as file:
            metadata = json.load(file)
        k = int(metadata["k"])
        W = np.loadtxt(directory / "W.csv", delimiter=",").reshape(-1, k)
        H = np.loadtxt(directory / "H.csv", delimiter=",").reshape(k, -1)
        trace = pd.read_csv(directory / "trace.csv")
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load factorization from {directory}: {exc}") from exc
    config = NMFConfig(
        k=k,
        lam=float(metadata["lambda"]),
        max_iters=int(metadata["max_iters"]),
        seed=int(metadata["seed"]),
        rel_tol=float(metadata["rel_tol"]),
    )
    return Factorization(
        W,
        H,
        tuple(trace["residual"].astype(float)),
        tuple(trace["loss"].astype(float)),
        config,
    )

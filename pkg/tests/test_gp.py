from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from src.errors import NumericalError, ValidationError
from src.gp import (
    SCALE_BOUNDS,
    SIGMA2_MIN,
    GPConfig,
    GPInput,
    GPModel,
    InputBatch,
    KernelConfig,
    SideInfo,
    dump_diagnostics,
    edge_kernel,
    factor_gram,
    fit,
    gram,
    kernel_matrix,
    log_marginal_likelihood,
    predict,
    rbf,
    spacetime_kernel,
)

LEVELS = (3, 2)


def random_batch(rng: np.random.Generator, n: int, side: bool = False) -> InputBatch:
    batch = InputBatch(
        tails=rng.uniform(0, 1, (n, 2)),
        heads=rng.uniform(0, 1, (n, 2)),
        t=rng.uniform(0, 1, n),
    )
    if not side:
        return batch
    onehot = np.hstack([np.eye(levels)[rng.integers(0, levels, n)] for levels in LEVELS])
    return InputBatch(
        tails=batch.tails,
        heads=batch.heads,
        t=batch.t,
        node_u=rng.normal(0, 1, (n, 2)),
        node_v=rng.normal(0, 1, (n, 2)),
        edge=rng.normal(0, 1, (n, 3)),
        onehot=onehot,
    )


def random_theta(rng: np.random.Generator, side: bool = False) -> KernelConfig:
    return KernelConfig(
        spatial_lengthscale=float(rng.uniform(0.3, 2.0)),
        temporal_lengthscale=float(rng.uniform(0.3, 2.0)),
        signal_variance=float(rng.uniform(1.0, 10.0)),
        noise_variance=float(rng.uniform(0.05, 1.0)),
        side_lengthscales=tuple(rng.uniform(0.5, 2.0, 5)) if side else (),
        use_side_info=side,
    )


def test_kernel_examples() -> None:
    assert rbf(np.array([1.0, 2.0]), np.array([1.0, 2.0]), 0.5) == 1.0
    assert rbf(0.0, 3.0, 2.0) == pytest.approx(math.exp(-3 / 4))
    assert rbf(0.0, 3.0, 2.0, squared=True) == pytest.approx(math.exp(-9 / 8))
    with pytest.raises(ValidationError):
        rbf(0.0, 1.0, 0.0)
    edge = ((0.0, 0.0), (1.0, 0.0))
    other = ((0.0, 1.0), (1.0, 2.0))
    assert edge_kernel(edge, other, 1.0) == pytest.approx(math.exp(-1) * math.exp(-2))
    # Direction matters: the reverse segment pairs tails with heads.
    assert edge_kernel(edge, (edge[1], edge[0]), 1.0) < 1.0


def test_spacetime_kernel_at_zero_distance() -> None:
    theta = KernelConfig(1.0, 0.5, 4.0, 0.1)
    query = GPInput((0.0, 0.0), (1.0, 1.0), 0.25)
    assert spacetime_kernel(query, query, theta) == pytest.approx(4.0)
    later = GPInput((0.0, 0.0), (1.0, 1.0), 0.75)
    assert spacetime_kernel(query, later, theta) == pytest.approx(4.0 * math.exp(-0.5 / 0.25))

    side = SideInfo(np.array([1.0]), np.array([2.0]), np.array([0.5]), np.array([1.0, 0.0]))
    with_side = GPInput((0.0, 0.0), (1.0, 1.0), 0.25, side)
    theta_side = KernelConfig(1.0, 0.5, 4.0, 0.1, (1.0, 1.0), use_side_info=True)
    # sigma_f^2 + one term per side group + one-hot dot product.
    assert spacetime_kernel(with_side, with_side, theta_side) == pytest.approx(4.0 + 2 + 1)


def test_input_validation() -> None:
    with pytest.raises(ValidationError):
        GPInput((0.0, 0.0), (1.0, 1.0), 1.0)
    with pytest.raises(ValidationError):
        GPInput((math.nan, 0.0), (1.0, 1.0), 0.5)
    side = SideInfo(np.zeros(1), np.zeros(1), np.zeros(1), np.ones(1))
    with pytest.raises(ValidationError):
        InputBatch.from_inputs(
            [GPInput((0.0, 0.0), (1.0, 1.0), 0.1, side), GPInput((0.0, 0.0), (1.0, 1.0), 0.2)]
        )
    with pytest.raises(ValidationError):
        InputBatch.from_inputs([])


def test_side_information_must_be_present() -> None:
    rng = np.random.default_rng(0)
    plain = random_batch(rng, 4)
    with pytest.raises(ValidationError):
        gram(plain, random_theta(rng, side=True))
    batch = random_batch(rng, 4, side=True)
    model = GPModel.condition(batch, rng.normal(0, 1, 4), random_theta(rng, True))
    queries = random_batch(rng, 2, side=True)
    narrow = InputBatch(
        queries.tails,
        queries.heads,
        queries.t,
        queries.node_u,
        queries.node_v,
        queries.edge[:, :1],
        queries.onehot,
    )
    with pytest.raises(ValidationError):
        predict(model, narrow)


def test_gram_is_symmetric_positive_semidefinite() -> None:
    for seed in range(10):
        rng = np.random.default_rng(seed)
        side = seed % 2 == 1
        matrix = gram(random_batch(rng, 12, side), random_theta(rng, side), noise=False)
        assert np.array_equal(matrix, matrix.T)
        assert np.linalg.eigvalsh(matrix).min() > -1e-9


def test_posterior_matches_direct_inverse() -> None:
    for seed in range(100):
        rng = np.random.default_rng(seed)
        side = seed % 2 == 1
        n = int(rng.integers(3, 16))
        batch = random_batch(rng, n, side)
        queries = random_batch(rng, 4, side)
        theta = random_theta(rng, side)
        y = rng.uniform(10, 60, n)
        model = GPModel.condition(batch, y, theta)
        result = predict(model, queries)

        K = kernel_matrix(batch, batch, theta) + theta.noise_variance * np.eye(n)
        cross = kernel_matrix(batch, queries, theta)
        inverse = np.linalg.inv(K)
        mean = y.mean() + cross.T @ inverse @ (y - y.mean())
        prior = np.diag(kernel_matrix(queries, queries, theta))
        variance = prior - np.einsum("iq,ij,jq->q", cross, inverse, cross)
        assert model.jitter == 0.0
        assert np.allclose(result.raw_mean, mean, rtol=1e-8, atol=1e-8)
        assert np.allclose(result.variance, variance, rtol=1e-8, atol=1e-8)
        assert np.all(result.variance >= -1e-8)
        assert np.all(result.variance <= prior + 1e-8)


def test_noise_free_posterior_interpolates() -> None:
    rng = np.random.default_rng(1)
    batch = random_batch(rng, 6)
    y = rng.uniform(10, 60, 6)
    theta = KernelConfig(0.3, 0.2, 100.0, 1e-10)
    result = predict(GPModel.condition(batch, y, theta), batch)
    assert np.allclose(result.mean, y, atol=1e-4)
    assert np.all(result.variance < 1e-6)


def test_log_marginal_likelihood_matches_gaussian_density() -> None:
    theta = KernelConfig(1.0, 0.5, 2.0, 0.3)
    inputs = [GPInput((0.0, 0.0), (1.0, 0.0), 0.1), GPInput((0.5, 0.0), (1.5, 0.0), 0.2)]
    y = np.array([30.0, 34.0])
    covariance = gram(inputs, theta)
    expected = multivariate_normal(mean=np.full(2, 32.0), cov=covariance).logpdf(y)
    assert log_marginal_likelihood(inputs, y, theta, 32.0) == pytest.approx(expected, rel=1e-10)
    # Away from the prior mean the likelihood drops.
    assert log_marginal_likelihood(inputs, y, theta, 0.0) < expected


def test_factor_gram_jitter() -> None:
    lower, jitter = factor_gram(np.eye(3))
    assert jitter == 0.0 and np.array_equal(lower, np.eye(3))
    lower, jitter = factor_gram(np.ones((3, 3)))
    assert 1e-8 <= jitter <= 1e-2
    assert np.allclose(lower @ lower.T, np.ones((3, 3)) + jitter * np.eye(3))
    with pytest.raises(NumericalError):
        factor_gram(-np.eye(3))
    with pytest.raises(NumericalError):
        factor_gram(np.full((2, 2), np.nan))


def test_predict_clamps_negative_means() -> None:
    inputs = [GPInput((0.0, 0.0), (1.0, 0.0), 0.1), GPInput((0.5, 0.0), (1.5, 0.0), 0.2)]
    model = GPModel.condition(inputs, np.array([-5.0, -4.0]), KernelConfig(1.0, 0.5, 1.0, 0.1))
    result = predict(model, inputs)
    assert np.all(result.raw_mean < 0)
    assert np.all(result.mean == 0.0)


def smooth_data(rng: np.random.Generator, n: int) -> tuple[InputBatch, np.ndarray]:
    batch = random_batch(rng, n)
    y = 30 + 10 * np.sin(2 * np.pi * batch.t) + 5 * batch.tails[:, 0] + rng.normal(0, 0.5, n)
    return batch, y


def test_fit_is_deterministic_and_bounded() -> None:
    rng = np.random.default_rng(2)
    batch, y = smooth_data(rng, 40)
    config = GPConfig(starts=3, max_evals=90)
    first = fit(batch, y, use_side_info=False, seed=7, config=config)
    second = fit(batch, y, use_side_info=False, seed=7, config=config)
    assert first.theta == second.theta
    assert first.lml == second.lml
    variance = float(np.var(y))
    bounds = {
        "spatial_lengthscale": SCALE_BOUNDS,
        "temporal_lengthscale": SCALE_BOUNDS,
        "signal_variance": SCALE_BOUNDS,
        "noise_variance": (SIGMA2_MIN, variance),
    }
    for name, (low, high) in bounds.items():
        value = getattr(first.theta, name)
        assert low * (1 - 1e-9) <= value <= high * (1 + 1e-9), name
    assert first.mean == pytest.approx(y.mean())
    assert len(first.lml_trace) > 0


def test_fit_reaches_the_likelihood_of_the_generating_hyperparameters() -> None:
    theta = KernelConfig(1.0, 0.5, 25.0, 0.25)
    for seed in range(3):
        rng = np.random.default_rng(seed)
        # Time-only inputs: every point sits on the same segment.
        batch = InputBatch(
            tails=np.zeros((10, 2)), heads=np.ones((10, 2)), t=np.sort(rng.uniform(0, 1, 10))
        )
        y = rng.multivariate_normal(np.full(10, 40.0), gram(batch, theta))
        model = fit(batch, y, False, seed=seed, config=GPConfig(starts=4, max_evals=4000))
        floor = log_marginal_likelihood(batch, y, theta, float(y.mean()))
        assert model.lml >= floor - 1e-6
        diagnostics = dump_diagnostics(model)
        assert diagnostics["n_train"] == 10
        assert set(diagnostics) == {"theta", "prior_mean", "n_train", "jitter", "lml", "lml_trace"}


def test_constant_responses_predict_the_prior_mean() -> None:
    for seed in range(20):
        rng = np.random.default_rng(seed)
        side = seed % 2 == 1
        level = float(rng.integers(10, 60))
        model = fit(
            random_batch(rng, 8, side),
            np.full(8, level),
            side,
            seed=seed,
            config=GPConfig(starts=2, max_evals=40),
        )
        assert model.mean == level
        result = predict(model, random_batch(rng, 5, side))
        assert np.allclose(result.mean, level, rtol=0, atol=1e-9)


def test_adding_a_training_point_never_increases_variance() -> None:
    for seed in range(100):
        rng = np.random.default_rng(seed)
        side = seed % 2 == 1
        batch = random_batch(rng, 5, side)
        queries = random_batch(rng, 3, side)
        theta = random_theta(rng, side)
        y = rng.uniform(10, 60, 5)
        fewer = GPModel.condition(batch.take(np.arange(4)), y[:4], theta)
        full = GPModel.condition(batch, y, theta)
        before = predict(fewer, queries).variance
        after = predict(full, queries).variance
        assert np.all(after <= before + 1e-8)


def test_posterior_ignores_the_order_of_training_pairs() -> None:
    for seed in range(100):
        rng = np.random.default_rng(seed)
        side = seed % 2 == 1
        n = int(rng.integers(3, 12))
        batch = random_batch(rng, n, side)
        queries = random_batch(rng, 4, side)
        theta = random_theta(rng, side)
        y = rng.uniform(10, 60, n)
        order = rng.permutation(n)
        original = predict(GPModel.condition(batch, y, theta), queries)
        shuffled = predict(GPModel.condition(batch.take(order), y[order], theta), queries)
        assert np.allclose(original.raw_mean, shuffled.raw_mean, rtol=1e-10, atol=1e-10)
        assert np.allclose(original.variance, shuffled.variance, rtol=1e-10, atol=1e-10)


def test_fit_with_side_information() -> None:
    rng = np.random.default_rng(4)
    batch = random_batch(rng, 25, side=True)
    y = 30 + 3 * batch.edge[:, 0] + rng.normal(0, 0.3, 25)
    model = fit(batch, y, True, seed=1, config=GPConfig(starts=2, max_evals=60))
    assert len(model.theta.side_lengthscales) == 2 + 3
    assert model.theta.use_side_info
    result = predict(model, batch)
    assert np.all(np.isfinite(result.mean))


def test_fit_errors() -> None:
    rng = np.random.default_rng(5)
    batch = random_batch(rng, 3)
    with pytest.raises(ValidationError):
        fit(batch.take(np.array([0])), np.array([1.0]), False, seed=0)
    with pytest.raises(ValidationError):
        fit(batch, np.array([1.0, np.nan, 2.0]), False, seed=0)
    with pytest.raises(ValidationError):
        fit(batch, np.ones(3), True, seed=0)

import jax.numpy as jnp
import numpy as np
import pytest

from fbpc_lab.errors import ConfigurationError, NonConvergenceError, ValidationError
from fbpc_lab.models import ParameterVector, init_params, mean_nll
from fbpc_lab.posteriors import (
    SIGMA_FLOOR,
    FunctionalPosterior,
    OptimizerConfig,
    collect_function_stats,
    fit_map_details,
    isotropic_stats,
    load_pool,
    sample_expert_checkpoint,
    sample_functions,
    save_pool,
)


def test_trajectories_have_every_epoch_and_start_at_prior(small_pool, small_mlp):
    trajs = small_pool.for_spec(small_mlp)
    assert len(trajs) == 2
    for tr in trajs:
        assert tr.params.shape == (6, small_mlp.num_params)
        np.testing.assert_array_equal(tr.epochs, np.arange(6))
    assert not np.array_equal(trajs[0].params[0], trajs[1].params[0])


def test_trajectory_loss_decreases(small_pool, small_mlp, moons):
    tr = small_pool.for_spec(small_mlp)[0]
    first = float(mean_nll(small_mlp, jnp.asarray(tr.params[0]), moons.train.inputs, moons.train.labels))
    last = float(mean_nll(small_mlp, jnp.asarray(tr.params[-1]), moons.train.inputs, moons.train.labels))
    assert last < first


def test_checkpoint_sampling_respects_T(small_pool, small_mlp):
    tr = small_pool.for_spec(small_mlp)
    allowed = {tuple(t.params[j]) for t in tr for j in range(4, 6)}
    for s in range(20):
        assert tuple(np.asarray(sample_expert_checkpoint(small_pool, small_mlp, 4, s).values)) in allowed
    with pytest.raises(ConfigurationError):
        sample_expert_checkpoint(small_pool, small_mlp, 6, 0)


def test_pool_round_trip(tmp_path, small_pool, small_mlp):
    save_pool(small_pool, tmp_path / "pool")
    back = load_pool(tmp_path / "pool")
    assert list(back.specs) == [small_mlp.spec_id]
    np.testing.assert_array_equal(back.for_spec(small_mlp)[1].params, small_pool.for_spec(small_mlp)[1].params)


def test_fit_map_reaches_threshold_or_raises(moons, small_mlp):
    batch = moons.train
    fit = fit_map_details(small_mlp, batch, OptimizerConfig("adam", 0.01), 0.5, 5000, 0)
    assert fit.loss <= 0.5 and fit.steps >= 1
    assert float(mean_nll(small_mlp, fit.params.values, batch.inputs, batch.labels)) == pytest.approx(fit.loss, rel=1e-9)
    with pytest.raises(NonConvergenceError):
        fit_map_details(small_mlp, batch, OptimizerConfig("adam", 0.01), 1e-6, 20, 0)


def test_collect_stats_variance_matches_samples(moons, small_mlp):
    theta = init_params(small_mlp, 1)
    u = moons.train.inputs[:6]
    post = collect_function_stats(small_mlp, theta, moons.train, u, K=12, lr=0.05, rng=3)
    s = np.asarray(post.samples)
    assert s.shape == (12, 6, 2)
    expected = np.maximum(SIGMA_FLOOR, np.sqrt(((s - s.mean(0)) ** 2).mean(0)))
    np.testing.assert_allclose(post.diag_std, expected, rtol=1e-12)
    np.testing.assert_array_equal(post.mean(u), np.asarray(post.mean(u)))
    np.testing.assert_array_equal(post.anchor.values, theta.values)


def test_collect_stats_zero_lr_gives_floor(moons, small_mlp):
    theta = init_params(small_mlp, 1)
    post = collect_function_stats(small_mlp, theta, moons.train, moons.train.inputs[:4], K=5, lr=0.0, rng=0)
    assert np.all(np.asarray(post.diag_std) == SIGMA_FLOOR)
    with pytest.raises(ConfigurationError):
        collect_function_stats(small_mlp, theta, moons.train, moons.train.inputs[:4], K=1)


def test_sample_functions_reparameterized(small_mlp):
    theta = init_params(small_mlp, 0)
    u = np.random.default_rng(0).normal(size=(3, 2))
    post = FunctionalPosterior(small_mlp, theta, jnp.full((3, 2), 0.5))
    draws, eps = sample_functions(post, u, 4, 0)
    np.testing.assert_allclose(draws, np.asarray(post.mean(u))[None] + 0.5 * np.asarray(eps), rtol=1e-14)
    iso = isotropic_stats(small_mlp, theta, u)
    assert np.all(np.asarray(iso.diag_std) == 1.0)
    with pytest.raises(ValidationError):
        FunctionalPosterior(small_mlp, theta, jnp.zeros((3, 2)))
    with pytest.raises(ValidationError):
        FunctionalPosterior(small_mlp, ParameterVector(theta.values, small_mlp.spec_id), jnp.full((3, 2), jnp.nan))

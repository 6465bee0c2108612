import jax
import numpy as np
import pytest

from fbpc_lab.baselines import BPCFKLConfig, WeightPosteriorApprox, bpc_fkl_gradient, random_coreset, train_bpc_fkl
from fbpc_lab.errors import ConfigurationError, ValidationError
from fbpc_lab.fbpc import Pseudocoreset
from fbpc_lab.models import ParameterVector, init_params


def test_random_coreset_is_real_data(moons):
    pc = random_coreset(moons, 4, 7)
    train = {tuple(r) for r in np.asarray(moons.train.inputs)}
    assert all(tuple(r) in train for r in np.asarray(pc.u))
    np.testing.assert_array_equal(pc.u, random_coreset(moons, 4, 7).u)


def test_same_weight_posterior_and_noise_gives_zero(small_mlp):
    q = WeightPosteriorApprox(small_mlp, init_params(small_mlp, 0), 0.1)
    pc = Pseudocoreset(np.random.default_rng(0).normal(size=(4, 2)), np.array([0, 0, 1, 1]), 2)
    eps = jax.random.normal(jax.random.PRNGKey(0), (3, small_mlp.num_params))
    g = bpc_fkl_gradient(q, q, pc, 3, 0, eps=(eps, eps))
    assert float(np.abs(g).max()) == 0.0


def test_weight_posterior_validation(small_mlp):
    theta = init_params(small_mlp, 0)
    with pytest.raises(ValidationError):
        WeightPosteriorApprox(small_mlp, theta, 0.0)
    with pytest.raises(ValidationError):
        WeightPosteriorApprox(small_mlp, ParameterVector(theta.values * np.nan, small_mlp.spec_id), 0.1)
    with pytest.raises(ConfigurationError):
        BPCFKLConfig(S=0)


def test_train_bpc_reproducible_and_moves(moons, small_mlp, small_pool):
    cfg = BPCFKLConfig(S=4, T=1, N=3, lr_coreset=1.0, lr_x=0.05, lr_u=0.05)
    a = train_bpc_fkl(small_mlp, small_pool, moons, cfg, 1, ipc=2)
    b = train_bpc_fkl(small_mlp, small_pool, moons, cfg, 1, ipc=2)
    np.testing.assert_array_equal(a.coreset.u, b.coreset.u)
    assert not np.array_equal(a.coreset.u, a.initial.u)
    assert len(a.log) == 3

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbpc_lab.errors import ConfigurationError
from fbpc_lab.fbpc import (
    FBPCConfig,
    Pseudocoreset,
    fbpc_gradient,
    fbpc_loss_estimate,
    init_pseudocoreset,
    select_rows,
    train_fbpc,
)
from fbpc_lab.models import ArchitectureSpec, init_params
from fbpc_lab.posteriors import FunctionalPosterior

SPEC = ArchitectureSpec("mlp", (2,), 3, (6,))


def _pair(seed, m=6):
    rng = np.random.default_rng(seed)
    qx = FunctionalPosterior(SPEC, init_params(SPEC, seed), jnp.asarray(rng.uniform(0.1, 1, (m, 3))))
    qu = FunctionalPosterior(SPEC, init_params(SPEC, seed + 100), jnp.asarray(rng.uniform(0.1, 1, (m, 3))))
    pc = Pseudocoreset(rng.normal(size=(m, 2)), np.arange(m) % 3, m // 3)
    return qx, qu, pc


def test_gradient_is_derivative_of_surrogate():
    qx, qu, pc = _pair(0)
    eps = (jax.random.normal(jax.random.PRNGKey(0), (5, 6, 3)), jax.random.normal(jax.random.PRNGKey(1), (5, 6, 3)))
    g = np.asarray(fbpc_gradient(qx, qu, pc, 5, 0, eps=eps))
    h = 1e-6
    fd = np.zeros_like(g)
    for idx in np.ndindex(g.shape):
        up, dn = np.array(pc.u, dtype=float), np.array(pc.u, dtype=float)
        up[idx] += h
        dn[idx] -= h
        fd[idx] = (fbpc_loss_estimate(qx, qu, pc.with_inputs(up), 5, 0, eps=eps) - fbpc_loss_estimate(qx, qu, pc.with_inputs(dn), 5, 0, eps=eps)) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 8))
def test_identical_posteriors_cancel_with_common_noise(seed, S):
    qx, _, pc = _pair(seed)
    g = fbpc_gradient(qx, qx, pc, S, seed, common_random_numbers=True)
    assert float(jnp.abs(g).max()) == 0.0


def test_gradient_deterministic_and_shape_checked():
    qx, qu, pc = _pair(1)
    a = fbpc_gradient(qx, qu, pc, 8, 3)
    np.testing.assert_array_equal(a, fbpc_gradient(qx, qu, pc, 8, 3))
    assert a.shape == pc.u.shape
    with pytest.raises(ConfigurationError):
        fbpc_gradient(qx, qu, Pseudocoreset(pc.u[:3], pc.labels[:3], 1), 8, 3)
    with pytest.raises(ConfigurationError):
        fbpc_gradient(qx, qu, pc, 0, 3)


def test_init_and_select_rows_are_class_balanced(moons):
    pc = init_pseudocoreset(moons, 3, 0)
    assert pc.u.shape == (6, 2)
    assert sorted(np.asarray(pc.labels).tolist()) == [0, 0, 0, 1, 1, 1]
    rows = select_rows(pc, 2, jax.random.PRNGKey(0))
    assert sorted(np.asarray(pc.labels)[rows].tolist()) == [0, 1]
    with pytest.raises(ConfigurationError):
        select_rows(pc, 3, jax.random.PRNGKey(0))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        FBPCConfig(S=0)
    with pytest.raises(ConfigurationError):
        FBPCConfig(K=1)


def test_train_fbpc_moves_coreset_and_is_reproducible(moons, small_mlp, small_pool):
    cfg = FBPCConfig(S=4, K=4, T=1, gamma=0.3, N=3, lr_coreset=0.1, map_lr=0.05, map_max_steps=2000)
    seen = []
    a = train_fbpc([small_mlp], small_pool, moons, cfg, 0, ipc=2, callback=seen.append)
    b = train_fbpc([small_mlp], small_pool, moons, cfg, 0, ipc=2)
    np.testing.assert_array_equal(a.coreset.u, b.coreset.u)
    assert not np.array_equal(a.coreset.u, a.initial.u)
    np.testing.assert_array_equal(a.coreset.labels, a.initial.labels)
    assert [r["iteration"] for r in seen] == [1, 2, 3]
    assert seen == a.log


def test_train_fbpc_requires_pool(moons, small_pool):
    other = ArchitectureSpec("mlp", (2,), 2, (4,))
    with pytest.raises(ConfigurationError):
        train_fbpc([other], small_pool, moons, FBPCConfig(N=1), 0, ipc=1)
    with pytest.raises(ConfigurationError):
        train_fbpc([], small_pool, moons, FBPCConfig(N=1), 0, ipc=1)

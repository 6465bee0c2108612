import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbpc_lab.errors import ConfigurationError, DimensionError
from fbpc_lab.models import (
    ArchitectureSpec,
    Batch,
    ParameterVector,
    forward,
    grad_wrt_inputs,
    grad_wrt_params,
    init_params,
    log_likelihood,
    unflatten,
)

MLP = ArchitectureSpec("mlp", (3,), 4, (5, 6))
LINEAR = ArchitectureSpec("mlp", (3,), 2, ())
CONV = ArchitectureSpec("convnet-small", (1, 8, 8), 3, (2, 3))


def test_init_params_deterministic_and_sized():
    a, b = init_params(MLP, 0), init_params(MLP, 0)
    assert np.array_equal(a.values, b.values)
    assert a.values.shape == (MLP.num_params,)
    assert MLP.num_params == 3 * 5 + 5 + 5 * 6 + 6 + 6 * 4 + 4


def test_prior_variance_is_inverse_fan_in():
    keys = jax.random.split(jax.random.PRNGKey(1), 10_000)
    draws = jax.vmap(lambda k: init_params(MLP, k).values)(keys)
    p = unflatten(MLP, jnp.arange(MLP.num_params))
    i = int(p["dense1.w"][2, 3])  # a weight with fan_in 5
    assert abs(float(draws[:, i].var()) * 5 - 1) < 0.1
    j = int(p["dense1.b"][0])
    assert float(jnp.abs(draws[:, j]).max()) == 0.0


def test_zero_params_give_zero_logits():
    x = np.random.default_rng(0).normal(size=(7, 3))
    out = forward(MLP, ParameterVector(jnp.zeros(MLP.num_params), MLP.spec_id), x)
    assert np.array_equal(out, np.zeros((7, 4)))


def test_linear_layer_is_wx_plus_b():
    theta = init_params(LINEAR, 3).values + 0.1
    p = unflatten(LINEAR, theta)
    x = np.random.default_rng(1).normal(size=(5, 3))
    expected = x @ np.asarray(p["head.w"]).T + np.asarray(p["head.b"])
    np.testing.assert_allclose(forward(LINEAR, ParameterVector(theta, LINEAR.spec_id), x), expected, rtol=1e-14)


def test_forward_rejects_bad_shapes_and_foreign_params():
    theta = init_params(MLP, 0)
    with pytest.raises(DimensionError):
        forward(MLP, theta, np.zeros((2, 4)))
    with pytest.raises(DimensionError):
        forward(LINEAR, theta, np.zeros((2, 3)))


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        ArchitectureSpec("mlp", (3,), 1)
    with pytest.raises(ConfigurationError):
        ArchitectureSpec("convnet-small", (1, 6, 6), 2, (2, 2))
    with pytest.raises(ConfigurationError):
        ArchitectureSpec("mlp", (3,), 2, (4,), normalization="instance")
    assert ArchitectureSpec("mlp", (3,), 4, (5, 6)) == MLP
    assert hash(ArchitectureSpec.from_dict(MLP.to_dict())) == hash(MLP)


def test_log_likelihood_examples():
    assert float(log_likelihood(jnp.zeros((1, 2)), jnp.array([0]))) == pytest.approx(np.log(0.5), abs=1e-12)
    row = jnp.array([[0.3, -1.2, 2.0]])
    one = float(log_likelihood(row, jnp.array([2])))
    two = float(log_likelihood(jnp.concatenate([row, row]), jnp.array([2, 2])))
    assert two == 2 * one
    big = float(log_likelihood(jnp.array([[1000.0, 0.0]]), jnp.array([0])))
    assert -1e-3 < big <= 0


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=6, max_size=6),
    st.floats(-100, 100),
    st.integers(0, 2),
)
def test_log_likelihood_shift_invariant_and_nonpositive(vals, shift, label):
    logits = jnp.array(vals).reshape(2, 3)
    y = jnp.array([label, (label + 1) % 3])
    a = float(log_likelihood(logits, y))
    b = float(log_likelihood(logits + shift, y))
    assert a <= 0
    assert a == pytest.approx(b, rel=1e-12, abs=1e-9)


def test_grad_wrt_inputs_linear_closed_form():
    theta = init_params(LINEAR, 2).values
    w = np.asarray(unflatten(LINEAR, theta)["head.w"])
    x = np.random.default_rng(2).normal(size=(4, 3))
    y = np.array([0, 1, 1, 0])
    logits = x @ w.T + np.asarray(unflatten(LINEAR, theta)["head.b"])
    probs = np.exp(logits - logits.max(1, keepdims=True))
    probs /= probs.sum(1, keepdims=True)
    expected = (np.eye(2)[y] - probs) @ w
    got = grad_wrt_inputs(LINEAR, ParameterVector(theta, LINEAR.spec_id), x, y)
    np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-14)


def test_grad_wrt_inputs_offset_enters_additively():
    theta = init_params(MLP, 4)
    x = np.random.default_rng(3).normal(size=(3, 3))
    y = np.array([0, 3, 1])
    off = np.random.default_rng(4).normal(size=(3, 4))
    a = grad_wrt_inputs(MLP, theta, x, y, logit_offset=off)
    b = grad_wrt_inputs(MLP, theta, x, y, logit_offset=off + 0.0)
    np.testing.assert_array_equal(a, b)
    # a per-row constant offset is invisible to the softmax
    c = grad_wrt_inputs(MLP, theta, x, y, logit_offset=np.full((3, 4), 2.5))
    np.testing.assert_allclose(c, grad_wrt_inputs(MLP, theta, x, y), rtol=1e-10, atol=1e-13)


def test_grad_wrt_params_additive_over_batches():
    theta = init_params(CONV, 5)
    rng = np.random.default_rng(5)
    x = rng.uniform(size=(6, 1, 8, 8))
    y = rng.integers(0, 3, size=6)
    whole = grad_wrt_params(CONV, theta, Batch(x, y))
    parts = grad_wrt_params(CONV, theta, Batch(x[:2], y[:2])) + grad_wrt_params(CONV, theta, Batch(x[2:], y[2:]))
    np.testing.assert_allclose(whole, parts, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("norm", ["none", "instance", "group", "layer", "batch"])
def test_conv_variants_finite_and_pure(norm):
    spec = ArchitectureSpec("convnet-small", (1, 8, 8), 3, (4, 4), normalization=norm)
    theta = init_params(spec, 0)
    x = np.random.default_rng(6).uniform(size=(5, 1, 8, 8))
    a = forward(spec, theta, x)
    assert a.shape == (5, 3) and np.isfinite(a).all()
    assert np.array_equal(a, forward(spec, theta, x))


def test_batch_norm_couples_rows_other_norms_do_not():
    x = np.random.default_rng(7).uniform(size=(4, 1, 8, 8))
    for norm, coupled in [("layer", False), ("batch", True)]:
        spec = ArchitectureSpec("convnet-small", (1, 8, 8), 3, (4, 4), normalization=norm)
        theta = init_params(spec, 1)
        full = forward(spec, theta, x)[0]
        alone = forward(spec, theta, x[:1])[0]
        assert (not np.allclose(full, alone)) == coupled

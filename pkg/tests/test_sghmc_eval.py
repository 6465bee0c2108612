import jax.numpy as jnp
import numpy as np
import pytest

from fbpc_lab.errors import ConfigurationError, DivergenceError
from fbpc_lab.fbpc import init_pseudocoreset
from fbpc_lab.models import ParameterVector, init_params
from fbpc_lab.sghmc_eval import (
    SGHMCConfig,
    effective_temperature,
    evaluate_ensemble,
    evaluate_robustness,
    predictive_probs,
    sghmc_sample,
)


def grad_quadratic(theta):
    return theta


def grad_explode(theta):
    return -1e3 * theta


def test_collection_schedule():
    cfg = SGHMCConfig(eta=0.1, alpha=0.5, noise_d=0.0, epochs=50, collect_every=10, burn_in=20)
    out = sghmc_sample(None, None, cfg, 0, theta0=jnp.ones(2), grad_potential=grad_quadratic)
    assert len(out) == 4  # epochs 20, 30, 40, 50


def test_noiseless_dynamics_decay_to_minimum():
    cfg = SGHMCConfig(eta=0.05, alpha=0.3, noise_d=0.0, epochs=400, collect_every=400, burn_in=0)
    (last,) = sghmc_sample(None, None, cfg, 0, theta0=jnp.array([3.0, -2.0]), grad_potential=grad_quadratic)
    assert float(jnp.abs(last).max()) < 1e-6


def test_divergence_is_reported():
    cfg = SGHMCConfig(eta=0.5, alpha=0.1, noise_d=0.0, epochs=200, collect_every=100, burn_in=0)
    with pytest.raises(DivergenceError):
        sghmc_sample(None, None, cfg, 0, theta0=jnp.ones(2), grad_potential=grad_explode)


def test_config_validation_and_temperature():
    with pytest.raises(ConfigurationError):
        SGHMCConfig(eta=0.0)
    with pytest.raises(ConfigurationError):
        SGHMCConfig(collect_every=0)
    with pytest.raises(ConfigurationError):
        SGHMCConfig(num_chains=0)
    cfg = SGHMCConfig()
    assert effective_temperature(cfg, 2) == pytest.approx(effective_temperature(cfg, 200))
    literal = SGHMCConfig(per_datum_step=False)
    assert effective_temperature(literal, 10) == pytest.approx(effective_temperature(cfg, 10) / 10)


def test_network_sampling_chains_and_determinism(moons, small_mlp):
    pc = init_pseudocoreset(moons, 5, 0)
    cfg = SGHMCConfig(epochs=200, collect_every=50, burn_in=100, num_chains=3)
    a = sghmc_sample(small_mlp, pc, cfg, 4)
    b = sghmc_sample(small_mlp, pc, cfg, 4)
    assert len(a) == 9
    np.testing.assert_array_equal(a[0].values, b[0].values)
    assert not np.array_equal(a[0].values, a[3].values)  # chain-major pooling


def test_ensemble_metrics_and_jensen(moons, small_mlp):
    samples = [init_params(small_mlp, s) for s in range(5)]
    rep = evaluate_ensemble(small_mlp, samples, moons.test)
    assert rep.nll <= rep.mean_individual_nll
    assert 0 <= rep.accuracy <= 1 and rep.n_samples == 5
    probs = predictive_probs(small_mlp, samples, moons.test.inputs)
    y = np.asarray(moons.test.labels)
    assert rep.accuracy == pytest.approx(np.mean(probs.argmax(1) == y))
    assert rep.nll == pytest.approx(-np.mean(np.log(probs[np.arange(len(y)), y])), rel=1e-10)
    single = evaluate_ensemble(small_mlp, samples[:1], moons.test)
    assert single.nll == pytest.approx(single.mean_individual_nll, rel=1e-12)
    zero = ParameterVector(jnp.zeros(small_mlp.num_params), small_mlp.spec_id)
    assert evaluate_ensemble(small_mlp, [zero], moons.test).nll == pytest.approx(np.log(2))


def test_robustness_reports_degradation(small_mlp, moons):
    samples = [init_params(small_mlp, s) for s in range(3)]
    reps = evaluate_robustness(small_mlp, samples, moons.test, ["gaussian_noise", "contrast"], [1, 5], 0)
    clean = evaluate_ensemble(small_mlp, samples, moons.test).accuracy
    assert [(r.corruption, r.severity) for r in reps] == [("gaussian_noise", 1), ("gaussian_noise", 5), ("contrast", 1), ("contrast", 5)]
    for r in reps:
        assert r.degradation == pytest.approx(clean - r.accuracy)

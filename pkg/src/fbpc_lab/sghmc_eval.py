"""SGHMC posterior sampling on a coreset and Bayesian-model-averaged evaluation."""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass

import jax
import jax.numpy as jnp
import numpy as np

from fbpc_lab.data import corrupt
from fbpc_lab.errors import ConfigurationError, DivergenceError, InvariantViolation
from fbpc_lab.models import ArchitectureSpec, Batch, ParameterVector, apply, forward, init_params, log_likelihood, prior_variance
from fbpc_lab.seeding import as_key, derive_seed


@dataclass(frozen=True)
class SGHMCConfig:
    """Momentum dynamics ``theta += v; v += -eta grad U - alpha v + N(0, 2 noise_d)``.

    ``noise_d=None`` means ``0.01 / m`` for a coreset of size m. ``U`` is the
    summed negative log joint; with ``per_datum_step`` the step applied to its
    gradient is ``eta / m``, i.e. ``eta`` is the step on the per-datum potential
    ``U / m`` and the stationary temperature ``m noise_d / (alpha eta)`` does not
    depend on the coreset size. ``prior_weight`` scales the Gaussian prior term
    of ``U``; at 0 the prior enters only through the initial draw.
    """

    eta: float = 0.03
    alpha: float = 0.1
    noise_d: float | None = None
    epochs: int = 1000
    collect_every: int = 100
    burn_in: int = 100
    per_datum_step: bool = True
    num_chains: int = 1
    prior_weight: float = 1.0

    def __post_init__(self):
        if not (self.eta > 0 and self.alpha > 0):
            raise ConfigurationError("eta and alpha must be positive")
        if self.noise_d is not None and self.noise_d < 0:
            raise ConfigurationError("noise_d must be non-negative")
        if not 1 <= self.collect_every <= self.epochs:
            raise ConfigurationError("collect_every must lie in [1, epochs]")
        if self.burn_in < 0:
            raise ConfigurationError("burn_in must be non-negative")
        if self.num_chains < 1:
            raise ConfigurationError("num_chains must be at least 1")
        if not self.prior_weight >= 0:
            raise ConfigurationError("prior_weight must be non-negative")

    def noise_for(self, m: int) -> float:
        return 0.01 / m if self.noise_d is None else self.noise_d

    def step_for(self, m: int) -> float:
        return self.eta / m if self.per_datum_step else self.eta

    def to_dict(self) -> dict:
        return asdict(self)


def _scan_chain(grad_fn, theta0, eta, alpha, noise_d, key, n_blocks, block_len, tail):
    scale = jnp.sqrt(2.0 * noise_d)

    def step(carry, k):
        theta, v, epoch, bad = carry
        theta = theta + v
        v = v - eta * grad_fn(theta) - alpha * v + scale * jax.random.normal(k, theta.shape, dtype=theta.dtype)
        epoch = epoch + 1
        finite = jnp.all(jnp.isfinite(theta)) & jnp.all(jnp.isfinite(v))
        bad = jnp.where((bad < 0) & ~finite, epoch, bad)
        return (theta, v, epoch, bad), None

    def block(carry, k):
        carry, _ = jax.lax.scan(step, carry, jax.random.split(k, block_len))
        return carry, carry[0]

    k_blocks, k_tail = jax.random.split(key)
    carry = (theta0, jnp.zeros_like(theta0), 0, -1)
    carry, collected = jax.lax.scan(block, carry, jax.random.split(k_blocks, n_blocks))
    if tail:
        carry, _ = jax.lax.scan(step, carry, jax.random.split(k_tail, tail))
    return collected, carry[3]


@functools.partial(jax.jit, static_argnums=(0, 6, 7, 8))
def _potential_chain(grad_fn, theta0, eta, alpha, noise_d, key, n_blocks, block_len, tail):
    return _scan_chain(grad_fn, theta0, eta, alpha, noise_d, key, n_blocks, block_len, tail)


@functools.partial(jax.jit, static_argnums=(0, 9, 10, 11))
def _network_chains(spec, theta0, x, y, eta, alpha, noise_d, prior_weight, keys, n_blocks, block_len, tail):
    # theta0: [chains, p], keys: [chains, 2]
    prior_var = prior_variance(spec)

    def grad_potential(theta):
        g_ll = jax.grad(lambda t: log_likelihood(apply(spec, t, x), y))(theta)
        return -g_ll + prior_weight * theta / prior_var

    def one(t0, k):
        return _scan_chain(grad_potential, t0, eta, alpha, noise_d, k, n_blocks, block_len, tail)

    return jax.vmap(one)(theta0, keys)


def _collect(collected, bad, cfg: SGHMCConfig):
    bad = int(bad)
    if bad >= 0:
        raise DivergenceError(f"SGHMC state became non-finite at epoch {bad}")
    epochs = cfg.collect_every * np.arange(1, collected.shape[0] + 1)
    return [collected[i] for i in np.flatnonzero(epochs >= cfg.burn_in)]


def _collect_chains(collected, bad, cfg: SGHMCConfig):
    bad = np.asarray(bad)
    if (bad >= 0).any():
        c = int(np.flatnonzero(bad >= 0)[0])
        raise DivergenceError(f"SGHMC chain {c} became non-finite at epoch {int(bad[c])}")
    return [t for c in range(collected.shape[0]) for t in _collect(collected[c], -1, cfg)]


def sghmc_sample(spec: ArchitectureSpec, coreset, cfg: SGHMCConfig, rng, *, theta0=None, grad_potential=None) -> list:
    """Run ``cfg.num_chains`` chains on the coreset and return the collected parameter vectors.

    The potential is the summed coreset negative log-likelihood plus the
    negative log prior. Samples are taken every ``collect_every`` epochs once
    ``burn_in`` epochs have elapsed. ``grad_potential`` replaces the network
    potential (then ``spec``/``coreset`` may be None, ``eta`` and ``noise_d``
    are used as given and raw arrays are returned); it must be a module-level
    function so compilation is cached.
    """
    key = as_key(rng)
    k_init, k_chain = jax.random.split(key)
    n_blocks, tail = divmod(cfg.epochs, cfg.collect_every)
    if grad_potential is not None:
        if theta0 is None:
            raise ConfigurationError("theta0 is required with a custom potential")
        noise = cfg.noise_d if cfg.noise_d is not None else 0.0
        collected, bad = _potential_chain(
            grad_potential, jnp.asarray(theta0, dtype=jnp.float64), cfg.eta, cfg.alpha, noise, k_chain, n_blocks, cfg.collect_every, tail
        )
        return _collect(collected, bad, cfg)
    m, C = coreset.u.shape[0], cfg.num_chains
    if theta0 is None:
        start = jnp.stack([init_params(spec, k).values for k in jax.random.split(k_init, C)])
    else:
        start = jnp.broadcast_to(jnp.asarray(getattr(theta0, "values", theta0)), (C, spec.num_params))
    collected, bad = _network_chains(
        spec, start, coreset.u, coreset.labels, cfg.step_for(m), cfg.alpha, cfg.noise_for(m), cfg.prior_weight, jax.random.split(k_chain, C), n_blocks, cfg.collect_every, tail
    )
    return [ParameterVector(t, spec.spec_id) for t in _collect_chains(collected, bad, cfg)]


# ----------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    nll: float
    mean_individual_nll: float
    entropy_mean: float
    entropy_std: float
    n_samples: int
    degradation: float | None = None
    corruption: str | None = None
    severity: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@functools.partial(jax.jit, static_argnums=0)
def _ensemble_stats(spec, thetas, x, y):
    logp = jax.nn.log_softmax(jax.vmap(lambda t: apply(spec, t, x))(thetas), axis=-1)  # [n, N, d]
    log_pred = jax.scipy.special.logsumexp(logp, axis=0) - jnp.log(thetas.shape[0])
    true_lp = jnp.take_along_axis(log_pred, y[:, None], axis=-1)[:, 0]
    indiv = -jnp.take_along_axis(logp, jnp.broadcast_to(y[None, :, None], logp.shape[:2] + (1,)), axis=-1).mean()
    entropy = -jnp.sum(jnp.exp(log_pred) * log_pred, axis=-1)
    acc = jnp.mean(jnp.argmax(log_pred, axis=-1) == y)
    return acc, -true_lp.mean(), indiv, entropy.mean(), entropy.std()


def evaluate_ensemble(spec: ArchitectureSpec, samples, test: Batch) -> EvalReport:
    """Accuracy and NLL of the sample-averaged predictive distribution."""
    if len(samples) < 1:
        raise ConfigurationError("at least one sample is required")
    thetas = jnp.stack([getattr(s, "values", s) for s in samples])
    acc, nll, indiv, ent_mean, ent_std = (float(v) for v in _ensemble_stats(spec, thetas, test.inputs, test.labels))
    # log is concave, so averaging predictive probabilities cannot raise the NLL
    if not nll <= indiv + 1e-9 * max(1.0, abs(indiv)):
        raise InvariantViolation(f"ensemble NLL {nll} exceeds mean individual NLL {indiv}")
    return EvalReport(acc, nll, indiv, ent_mean, ent_std, len(samples))


def evaluate_robustness(spec, samples, clean_test: Batch, kinds, severities, rng: int, intensity: float = 1.0) -> list:
    """One report per (kind, severity); ``degradation`` is clean minus corrupted accuracy."""
    clean = evaluate_ensemble(spec, samples, clean_test)
    reports = []
    for kind in kinds:
        for severity in severities:
            batch = corrupt(clean_test, kind, severity, derive_seed(rng, "corrupt", kind, severity), intensity)
            r = evaluate_ensemble(spec, samples, batch)
            reports.append(
                EvalReport(r.accuracy, r.nll, r.mean_individual_nll, r.entropy_mean, r.entropy_std, r.n_samples, clean.accuracy - r.accuracy, kind, severity)
            )
    return reports


def predictive_probs(spec, samples, inputs) -> np.ndarray:
    probs = [jax.nn.softmax(forward(spec, s, inputs), axis=-1) for s in samples]
    return np.asarray(jnp.mean(jnp.stack(probs), axis=0))


def effective_temperature(cfg: SGHMCConfig, m: int) -> float:
    """Small-step stationary temperature relative to the summed potential."""
    return cfg.noise_for(m) / (cfg.alpha * cfg.step_for(m))


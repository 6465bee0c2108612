"""Comparison methods: random coresets and weight-space forward-KL pseudocoresets."""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass

import jax
import jax.numpy as jnp

from fbpc_lab.errors import ConfigurationError, DivergenceError, ValidationError
from fbpc_lab.fbpc import Pseudocoreset, TrainResult, init_pseudocoreset, select_rows
from fbpc_lab.models import ArchitectureSpec, ParameterVector, apply, log_likelihood, mean_nll
from fbpc_lab.posteriors import sample_expert_checkpoint
from fbpc_lab.seeding import as_key, derive_key


def random_coreset(dataset, ipc: int, rng) -> Pseudocoreset:
    """Class-balanced uniform draw of real training examples, no training."""
    return init_pseudocoreset(dataset, ipc, rng)


@dataclass(frozen=True)
class WeightPosteriorApprox:
    """Spherical Gaussian N(mean, std^2 I) over the weights."""

    spec: ArchitectureSpec
    mean: ParameterVector
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValidationError("std must be positive")
        if not bool(jnp.all(jnp.isfinite(self.mean.values))):
            raise ValidationError("mean must be finite")


@functools.partial(jax.jit, static_argnums=0)
def _weight_mc_gradient(spec, mean_x, mean_u, std_x, std_u, u, labels, eps_x, eps_u):
    # eps_*: [S, p] -- one full parameter vector per Monte-Carlo sample
    thetas_x = mean_x[None] + std_x * eps_x
    thetas_u = jax.lax.stop_gradient(mean_u)[None] + std_u * eps_u

    def objective(z):
        ll_u = jax.vmap(lambda t: log_likelihood(apply(spec, t, z), labels))(thetas_u)
        ll_x = jax.vmap(lambda t: log_likelihood(apply(spec, t, z), labels))(thetas_x)
        return jnp.mean(ll_u - ll_x)

    return jax.grad(objective)(u)


def bpc_fkl_gradient(qx: WeightPosteriorApprox, qu: WeightPosteriorApprox, pc, S: int, rng, *, eps=None) -> jax.Array:
    """Weight-space estimate ``(grad_u / S) sum_s [log p(y | u, theta_u^s) - log p(y | u, theta_x^s)]``.

    Every Monte-Carlo sample is a full weight vector, so the working set holds
    ``2 * S * p`` numbers. ``eps`` may fix ``(eps_x, eps_u)``, each ``[S, p]``.
    """
    if qx.spec != qu.spec:
        raise ConfigurationError(f"posteriors disagree on architecture: {qx.spec.spec_id} vs {qu.spec.spec_id}")
    if S < 1:
        raise ConfigurationError("S must be at least 1")
    p = qx.spec.num_params
    if eps is None:
        kx, ku = jax.random.split(as_key(rng))
        eps = (jax.random.normal(kx, (S, p), dtype=jnp.float64), jax.random.normal(ku, (S, p), dtype=jnp.float64))
    u = jnp.asarray(pc.u, dtype=jnp.float64)
    return _weight_mc_gradient(qx.spec, qx.mean.values, qu.mean.values, qx.std, qu.std, u, jnp.asarray(pc.labels), *eps)


@dataclass(frozen=True)
class BPCFKLConfig:
    S: int = 32
    T: int = 1
    N: int = 1000
    lr_coreset: float = 100.0
    lr_x: float = 0.01
    lr_u: float = 0.01
    fine_tune_steps: int = 10
    weight_std: float = 0.01
    B: int | None = None
    x_minibatch: int = 256

    def __post_init__(self):
        if self.S < 1 or self.N < 1 or self.fine_tune_steps < 0:
            raise ConfigurationError("S and N must be positive, fine_tune_steps non-negative")
        if not self.weight_std > 0:
            raise ConfigurationError("weight_std must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@functools.partial(jax.jit, static_argnums=(0, 5, 6))
def _sgd_steps(spec, theta, x, y, lr, steps, minibatch, key):
    n = x.shape[0]

    def step(t, k):
        if minibatch is None or minibatch >= n:
            xb, yb = x, y
        else:
            idx = jax.random.choice(k, n, (minibatch,), replace=False)
            xb, yb = x[idx], y[idx]
        return t - lr * jax.grad(lambda w: mean_nll(spec, w, xb, yb))(t), None

    theta, _ = jax.lax.scan(step, theta, jax.random.split(key, steps))
    return theta


def train_bpc_fkl(spec: ArchitectureSpec, pool, dataset, cfg: BPCFKLConfig, seed: int, *, ipc: int | None = None, init=None, callback=None) -> TrainResult:
    """Weight-space forward-KL coreset with means from short excursions off an expert checkpoint."""
    if init is None:
        if ipc is None:
            raise ConfigurationError("either ipc or init is required")
        init = init_pseudocoreset(dataset, ipc, derive_key(seed, "init"))
    u, log = init.u, []
    for i in range(1, cfg.N + 1):
        rows = select_rows(init, cfg.B, derive_key(seed, "rows", i))
        sub = Pseudocoreset(u[rows], init.labels[rows], len(rows) // init.num_classes)
        k_ckpt, k_x, k_u, k_grad = jax.random.split(derive_key(seed, spec.spec_id, i), 4)
        theta0 = sample_expert_checkpoint(pool, spec, cfg.T, k_ckpt).values
        mu_x = _sgd_steps(spec, theta0, dataset.train.inputs, dataset.train.labels, cfg.lr_x, cfg.fine_tune_steps, cfg.x_minibatch, k_x)
        mu_u = _sgd_steps(spec, theta0, sub.u, sub.labels, cfg.lr_u, cfg.fine_tune_steps, None, k_u)
        qx = WeightPosteriorApprox(spec, ParameterVector(mu_x, spec.spec_id), cfg.weight_std)
        qu = WeightPosteriorApprox(spec, ParameterVector(mu_u, spec.spec_id), cfg.weight_std)
        g = bpc_fkl_gradient(qx, qu, sub, cfg.S, k_grad)
        u = u.at[rows].add(-cfg.lr_coreset * g)
        if not bool(jnp.all(jnp.isfinite(u))):
            raise DivergenceError(f"coreset inputs became non-finite at iteration {i}")
        record = {"iteration": i, "grad_norm": float(jnp.linalg.norm(g)), "coreset_loss_u": float(mean_nll(spec, mu_u, sub.u, sub.labels))}
        log.append(record)
        if callback is not None:
            callback(record)
    return TrainResult(init.with_inputs(u), log, init)

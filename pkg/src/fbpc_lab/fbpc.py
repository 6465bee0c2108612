"""Function-space pseudocoreset training.

The coreset gradient matches two Gaussian function-space posteriors at the
coreset inputs ``u``: one anchored at an expert (full-data) checkpoint and one
at a MAP fit on the coreset itself. Both enter only through their anchor
networks' outputs at ``u``; noise draws live in logit space, so a Monte-Carlo
sample costs ``m * d`` numbers rather than a parameter vector.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, field, replace

import jax
import jax.numpy as jnp
import numpy as np

from fbpc_lab.errors import ConfigurationError, DivergenceError, NonConvergenceError, ValidationError
from fbpc_lab.models import CATEGORICAL, ArchitectureSpec, Batch, apply
from fbpc_lab.posteriors import (
    SIGMA_FLOOR,
    FunctionalPosterior,
    OptimizerConfig,
    collect_function_stats,
    fit_map_details,
    isotropic_stats,
    sample_expert_checkpoint,
)
from fbpc_lab.seeding import as_key, derive_key


@dataclass(frozen=True)
class Pseudocoreset:
    u: jax.Array
    labels: jax.Array
    ipc: int

    def __post_init__(self):
        u = jnp.asarray(self.u, dtype=jnp.float64)
        labels = jnp.asarray(self.labels, dtype=jnp.int32)
        if u.shape[0] != labels.shape[0]:
            raise ValidationError("one label per coreset row is required")
        counts = np.bincount(np.asarray(labels))
        if len(counts) and not np.all(counts == self.ipc):
            raise ValidationError(f"coreset labels must hold exactly {self.ipc} rows per class, got {counts.tolist()}")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "labels", labels)

    @property
    def num_classes(self) -> int:
        return self.u.shape[0] // self.ipc

    def as_batch(self) -> Batch:
        return Batch(self.u, self.labels)

    def with_inputs(self, u) -> "Pseudocoreset":
        return replace(self, u=u)


@dataclass(frozen=True)
class FBPCConfig:
    S: int = 32
    K: int = 30
    lr_x: float = 0.05
    lr_u: float = 0.01
    T: int = 1
    gamma: float = 0.01
    N: int = 1000
    lr_coreset: float = 100.0
    B: int | None = None
    isotropic: bool = False
    sigma_floor: float = SIGMA_FLOOR
    map_optimizer: str = "adam"
    map_lr: float = 0.001
    map_max_steps: int = 20000
    x_minibatch: int = 256
    common_random_numbers: bool = False
    clip_norm: float | None = None

    def __post_init__(self):
        for name in ("S", "K", "N", "map_max_steps", "x_minibatch"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("lr_x", "lr_u", "gamma", "lr_coreset", "sigma_floor", "map_lr"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.K < 2 and not self.isotropic:
            raise ConfigurationError("K must be at least 2")
        if self.B is not None and self.B < 1:
            raise ConfigurationError("B must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _class_balanced_choice(labels: np.ndarray, per_class: int, key, num_classes: int) -> np.ndarray:
    rows = []
    for c, k in zip(range(num_classes), jax.random.split(key, num_classes)):
        idx = np.flatnonzero(labels == c)
        if len(idx) < per_class:
            raise ConfigurationError(f"class {c} has {len(idx)} examples, {per_class} needed")
        pick = np.asarray(jax.random.choice(k, len(idx), (per_class,), replace=False))
        rows.append(idx[np.sort(pick)])
    return np.concatenate(rows)


def init_pseudocoreset(dataset, ipc: int, rng) -> Pseudocoreset:
    """Copy ``ipc`` real training examples of every class, ordered by class."""
    if ipc < 1:
        raise ConfigurationError("ipc must be positive")
    labels = np.asarray(dataset.train.labels)
    rows = _class_balanced_choice(labels, ipc, as_key(rng), dataset.num_classes)
    return Pseudocoreset(dataset.train.inputs[rows], labels[rows], ipc)


# ----------------------------------------------------------------------------
# gradient estimator


def _check_pair(q_x: FunctionalPosterior, q_u: FunctionalPosterior, u):
    if q_x.spec != q_u.spec:
        raise ConfigurationError(f"posteriors disagree on architecture: {q_x.spec.spec_id} vs {q_u.spec.spec_id}")
    shape = (u.shape[0], q_x.spec.num_classes)
    if q_x.diag_std.shape != shape or q_u.diag_std.shape != shape:
        raise ConfigurationError(f"posterior scales must have shape {shape}")


def draw_noise(S: int, m: int, d: int, rng, common_random_numbers: bool = False):
    key_x, key_u = jax.random.split(as_key(rng))
    eps_x = jax.random.normal(key_x, (S, m, d), dtype=jnp.float64)
    eps_u = eps_x if common_random_numbers else jax.random.normal(key_u, (S, m, d), dtype=jnp.float64)
    return eps_x, eps_u


@functools.partial(jax.jit, static_argnums=(0, 9))
def _mc_gradient(spec, anchor_x, anchor_u, std_x, std_u, u, labels, eps_x, eps_u, likelihood):
    def avg_residual(anchor, std, eps):
        mean = apply(spec, anchor, u)
        r = jax.vmap(lambda e: likelihood.grad_f(mean + std * e, labels))(eps)
        return r.mean(axis=0)

    r_x = avg_residual(anchor_x, std_x, eps_x)
    r_u = avg_residual(anchor_u, std_u, eps_u)
    _, pull_x = jax.vjp(lambda z: apply(spec, anchor_x, z), u)
    _, pull_u = jax.vjp(lambda z: apply(spec, anchor_u, z), u)
    return -pull_x(r_x)[0] + pull_u(r_u)[0]


def fbpc_gradient(
    q_x: FunctionalPosterior,
    q_u: FunctionalPosterior,
    pc,
    S: int,
    rng,
    *,
    likelihood=CATEGORICAL,
    common_random_numbers: bool = False,
    eps=None,
) -> jax.Array:
    """Monte-Carlo estimate of the forward-KL gradient w.r.t. the coreset inputs.

    Returns ``(1/S) sum_s [-grad_u log p(y | mean_x(u) + std_x eps_x) + grad_u log p(y | mean_u(u) + std_u eps_u)]``.
    Each term is ``J^T r`` with ``r`` the likelihood's logit residual, so the
    S residuals are averaged first and pulled back through the anchor network
    once. ``pc`` needs ``.u`` and ``.labels``; ``eps`` may fix ``(eps_x, eps_u)``.
    """
    if S < 1:
        raise ConfigurationError("S must be at least 1")
    u = jnp.asarray(pc.u, dtype=jnp.float64)
    _check_pair(q_x, q_u, u)
    if eps is None:
        eps = draw_noise(S, u.shape[0], q_x.spec.num_classes, rng, common_random_numbers)
    eps_x, eps_u = eps
    return _mc_gradient(
        q_x.spec,
        q_x.anchor.values,
        q_u.anchor.values,
        q_x.diag_std,
        q_u.diag_std,
        u,
        jnp.asarray(pc.labels),
        eps_x,
        eps_u,
        likelihood,
    )


@functools.partial(jax.jit, static_argnums=(0, 9))
def _mc_loss(spec, anchor_x, anchor_u, std_x, std_u, u, labels, eps_x, eps_u, likelihood):
    def avg_loglik(anchor, std, eps):
        mean = apply(spec, anchor, u)
        return jax.vmap(lambda e: likelihood.log_prob(mean + std * e, labels))(eps).mean()

    return -avg_loglik(anchor_x, std_x, eps_x) + avg_loglik(anchor_u, std_u, eps_u)


def fbpc_loss_estimate(q_x, q_u, pc, S: int, rng, *, likelihood=CATEGORICAL, common_random_numbers=False, eps=None):
    """Surrogate whose u-gradient (noise held fixed) is exactly :func:`fbpc_gradient`.

    It is the u-dependent part of the forward KL with the coreset evidence
    term replaced by its expectation under ``q_u``.
    """
    u = jnp.asarray(pc.u, dtype=jnp.float64)
    _check_pair(q_x, q_u, u)
    if eps is None:
        eps = draw_noise(S, u.shape[0], q_x.spec.num_classes, rng, common_random_numbers)
    return float(
        _mc_loss(q_x.spec, q_x.anchor.values, q_u.anchor.values, q_x.diag_std, q_u.diag_std, u, jnp.asarray(pc.labels), *eps, likelihood)
    )


# ----------------------------------------------------------------------------
# training loop


def architecture_gradient(spec: ArchitectureSpec, pool, dataset, pc: Pseudocoreset, cfg: FBPCConfig, key, iteration=None):
    """One architecture's contribution to an outer iteration.

    Returns ``(gradient, record)``. All randomness comes from ``key``.
    """
    k_ckpt, k_init, k_x, k_u, k_grad, k_loss = jax.random.split(key, 6)
    theta_x = sample_expert_checkpoint(pool, spec, cfg.T, k_ckpt)
    opt = OptimizerConfig(cfg.map_optimizer, cfg.map_lr)
    try:
        fit = fit_map_details(spec, pc.as_batch(), opt, cfg.gamma, cfg.map_max_steps, k_init)
    except NonConvergenceError as exc:
        where = f" at iteration {iteration}" if iteration is not None else ""
        raise NonConvergenceError(f"{exc}{where}", last_loss=exc.last_loss) from exc
    if cfg.isotropic:
        q_x = isotropic_stats(spec, theta_x, pc.u)
        q_u = isotropic_stats(spec, fit.params, pc.u)
    else:
        q_x = collect_function_stats(
            spec, theta_x, dataset.train, pc.u, cfg.K, cfg.lr_x, cfg.sigma_floor, k_x, minibatch_size=cfg.x_minibatch
        )
        q_u = collect_function_stats(spec, fit.params, pc.as_batch(), pc.u, cfg.K, cfg.lr_u, cfg.sigma_floor, k_u)
    grad = fbpc_gradient(q_x, q_u, pc, cfg.S, k_grad, common_random_numbers=cfg.common_random_numbers)
    loss = fbpc_loss_estimate(q_x, q_u, pc, cfg.S, k_loss, common_random_numbers=cfg.common_random_numbers)
    record = {
        "map_loss": fit.loss,
        "map_steps": fit.steps,
        "grad_norm": float(jnp.linalg.norm(grad)),
        "loss_estimate": loss,
        "std_x_mean": float(jnp.mean(q_x.diag_std)),
        "std_u_mean": float(jnp.mean(q_u.diag_std)),
    }
    return grad, record


def select_rows(pc: Pseudocoreset, B: int | None, key) -> np.ndarray:
    """Class-balanced subset of coreset rows of size B (all rows when B is None or >= m)."""
    m = pc.u.shape[0]
    if B is None or B >= m:
        return np.arange(m)
    d = pc.num_classes
    if B % d:
        raise ConfigurationError(f"B={B} must be a multiple of the number of classes {d}")
    return _class_balanced_choice(np.asarray(pc.labels), B // d, key, d)


@dataclass
class TrainResult:
    coreset: Pseudocoreset
    log: list = field(default_factory=list)
    initial: Pseudocoreset | None = None


def train_fbpc(specs, pools, dataset, cfg: FBPCConfig, seed: int, *, ipc: int | None = None, init: Pseudocoreset | None = None, callback=None) -> TrainResult:
    """Multi-architecture training: per-architecture gradients are summed, then one SGD step on u.

    ``pools`` is a :class:`TrajectoryPool` covering every spec, or a mapping
    from spec_id to pool. Sub-keys depend only on ``(seed, spec_id, iteration)``.
    """
    specs = list(specs)
    if not specs:
        raise ConfigurationError("at least one architecture is required")
    pool_for = _pool_lookup(specs, pools)
    if init is None:
        if ipc is None:
            raise ConfigurationError("either ipc or init is required")
        init = init_pseudocoreset(dataset, ipc, derive_key(seed, "init"))
    pc = init
    u = pc.u
    log = []
    for i in range(1, cfg.N + 1):
        rows = select_rows(pc, cfg.B, derive_key(seed, "rows", i))
        sub = Pseudocoreset(u[rows], pc.labels[rows], len(rows) // pc.num_classes)
        g = jnp.zeros_like(sub.u)
        record = {"iteration": i, "specs": {}}
        for spec in specs:
            g_a, rec = architecture_gradient(spec, pool_for[spec.spec_id], dataset, sub, cfg, derive_key(seed, spec.spec_id, i), i)
            g = g + g_a
            record["specs"][spec.spec_id] = rec
        gnorm = float(jnp.linalg.norm(g))
        if cfg.clip_norm is not None and gnorm > cfg.clip_norm:
            g = g * (cfg.clip_norm / gnorm)
        u = u.at[rows].add(-cfg.lr_coreset * g)
        if not bool(jnp.all(jnp.isfinite(u))):
            raise DivergenceError(f"coreset inputs became non-finite at iteration {i}")
        record["grad_norm"] = gnorm
        record["loss_estimate"] = sum(r["loss_estimate"] for r in record["specs"].values())
        log.append(record)
        if callback is not None:
            callback(record)
    return TrainResult(pc.with_inputs(u), log, init)


def _pool_lookup(specs, pools) -> dict:
    out = {}
    for spec in specs:
        pool = pools.get(spec.spec_id) if isinstance(pools, dict) else pools
        if pool is None or spec.spec_id not in pool.trajectories:
            raise ConfigurationError(f"no trajectory pool for {spec.spec_id}")
        out[spec.spec_id] = pool
    return out

"""Gaussian approximations to function-space posteriors.

The full-data MAP is never refit: it is a checkpoint drawn from a pool of
expert SGD trajectories. The coreset MAP is refit from a prior draw. Around
either anchor a short SGD excursion supplies a diagonal variance of the
network outputs at the coreset points.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np
import optax

from fbpc_lab.arrays import atomic_write_text, load_arrays, save_arrays
from fbpc_lab.errors import (
    ConfigurationError,
    DivergenceError,
    NonConvergenceError,
    TrainingDivergenceError,
    ValidationError,
)
from fbpc_lab.models import ArchitectureSpec, Batch, ParameterVector, _values, apply, forward, init_params, mean_nll
from fbpc_lab.seeding import as_key

SIGMA_FLOOR = 1e-6
POOL_FORMAT = "fbpc-lab/trajectory-pool/v1"


# ----------------------------------------------------------------------------
# expert trajectories


@dataclass(frozen=True)
class Trajectory:
    spec_id: str
    epochs: np.ndarray
    params: np.ndarray  # [n_checkpoints, p]
    training_config: dict = field(default_factory=dict)

    def __post_init__(self):
        epochs = np.asarray(self.epochs, dtype=np.int64)
        if len(epochs) != len(self.params):
            raise ValidationError("one parameter row per epoch is required")
        if np.any(np.diff(epochs) <= 0):
            raise ValidationError("trajectory epochs must be strictly increasing")
        object.__setattr__(self, "epochs", epochs)

    @property
    def checkpoints(self) -> list:
        return [(int(e), ParameterVector(p, self.spec_id)) for e, p in zip(self.epochs, self.params)]


@dataclass
class TrajectoryPool:
    specs: dict  # spec_id -> ArchitectureSpec
    trajectories: dict  # spec_id -> list[Trajectory]
    provenance: dict = field(default_factory=dict)

    def for_spec(self, spec: ArchitectureSpec) -> list:
        trajs = self.trajectories.get(spec.spec_id)
        if not trajs:
            raise ConfigurationError(f"no expert trajectories for {spec.spec_id}")
        return trajs

    def merge(self, other: "TrajectoryPool") -> "TrajectoryPool":
        specs = {**self.specs, **other.specs}
        trajs = {k: list(v) for k, v in self.trajectories.items()}
        for k, v in other.trajectories.items():
            trajs.setdefault(k, []).extend(v)
        return TrajectoryPool(specs, trajs, {**self.provenance, **other.provenance})


@functools.partial(jax.jit, static_argnums=(0, 4, 5, 6))
def _train_trajectory(spec, theta0, x, y, epochs, batch_size, n_batches, lr, key):
    def sgd_step(theta, idx):
        g = jax.grad(lambda t: mean_nll(spec, t, x[idx], y[idx]))(theta)
        return theta - lr * g, None

    def run_epoch(theta, k):
        order = jax.random.permutation(k, x.shape[0])[: n_batches * batch_size]
        theta, _ = jax.lax.scan(sgd_step, theta, order.reshape(n_batches, batch_size))
        return theta, theta

    _, ckpts = jax.lax.scan(run_epoch, theta0, jax.random.split(key, epochs))
    return jnp.concatenate([theta0[None], ckpts])


def generate_expert_trajectories(
    spec: ArchitectureSpec,
    dataset,
    n_traj: int = 10,
    epochs: int = 50,
    lr: float = 0.01,
    seed: int = 0,
    batch_size: int = 128,
) -> TrajectoryPool:
    """Train ``n_traj`` networks from prior draws with minibatch SGD, keeping every epoch."""
    if n_traj < 1 or epochs < 1:
        raise ConfigurationError("n_traj and epochs must be at least 1")
    x, y = dataset.train.inputs, dataset.train.labels
    batch_size = min(batch_size, x.shape[0])
    n_batches = x.shape[0] // batch_size
    config = {"optimizer": "sgd", "lr": lr, "epochs": epochs, "batch_size": batch_size, "seed": seed}
    trajs = []
    for t, key in enumerate(jax.random.split(jax.random.PRNGKey(seed), n_traj)):
        k_init, k_train = jax.random.split(key)
        theta0 = init_params(spec, k_init).values
        ckpts = np.asarray(_train_trajectory(spec, theta0, x, y, epochs, batch_size, n_batches, lr, k_train))
        if not np.all(np.isfinite(ckpts)):
            raise TrainingDivergenceError(f"expert trajectory {t} for {spec.spec_id} diverged", trajectory=t)
        trajs.append(Trajectory(spec.spec_id, np.arange(epochs + 1), ckpts, dict(config)))
    provenance = {"dataset": dataset.name, "seed": seed}
    return TrajectoryPool({spec.spec_id: spec}, {spec.spec_id: trajs}, provenance)


def sample_expert_checkpoint(pool: TrajectoryPool, spec: ArchitectureSpec, T: int, rng) -> ParameterVector:
    """Uniform draw over all (trajectory, epoch >= T) pairs."""
    trajs = pool.for_spec(spec)
    candidates = [(i, j) for i, tr in enumerate(trajs) for j in np.flatnonzero(tr.epochs >= T)]
    if not candidates:
        raise ConfigurationError(f"no checkpoints at epoch >= {T} for {spec.spec_id}")
    pick = int(jax.random.randint(as_key(rng), (), 0, len(candidates)))
    i, j = candidates[pick]
    return ParameterVector(trajs[i].params[j], spec.spec_id)


def save_pool(pool: TrajectoryPool, directory) -> Path:
    directory = Path(directory)
    manifest = {"format": POOL_FORMAT, "provenance": pool.provenance, "specs": {}}
    for spec_id, trajs in sorted(pool.trajectories.items()):
        entries = []
        for t, tr in enumerate(trajs):
            files = []
            for e, row in zip(tr.epochs, tr.params):
                rel = f"{spec_id}/traj-{t:03d}/epoch-{int(e):03d}.fbpc"
                save_arrays(directory / rel, {"params": row}, {"kind": "parameters", "spec_id": spec_id, "epoch": int(e)})
                files.append(rel)
            entries.append({"index": t, "epochs": tr.epochs.tolist(), "files": files, "training_config": tr.training_config})
        manifest["specs"][spec_id] = {"spec": pool.specs[spec_id].to_dict(), "trajectories": entries}
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_pool(directory) -> TrajectoryPool:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise ValidationError(f"no trajectory pool manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != POOL_FORMAT:
        raise ValidationError(f"{path}: unknown pool format {manifest.get('format')!r}")
    specs, trajs = {}, {}
    for spec_id, entry in manifest["specs"].items():
        specs[spec_id] = ArchitectureSpec.from_dict(entry["spec"])
        trajs[spec_id] = []
        for t in entry["trajectories"]:
            rows = [load_arrays(directory / f)[0]["params"] for f in t["files"]]
            trajs[spec_id].append(Trajectory(spec_id, t["epochs"], np.stack(rows), t["training_config"]))
    return TrajectoryPool(specs, trajs, manifest.get("provenance", {}))


# ----------------------------------------------------------------------------
# MAP fitting


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"
    lr: float = 0.001

    def build(self):
        if self.name == "adam":
            return optax.adam(self.lr)
        if self.name == "sgd":
            return optax.sgd(self.lr)
        raise ConfigurationError(f"unknown optimizer {self.name!r}")


@functools.partial(jax.jit, static_argnums=(0, 1))
def _fit_until(spec, opt_cfg, theta0, x, y, gamma, max_steps):
    opt = opt_cfg.build()
    value_and_grad = jax.value_and_grad(lambda t: mean_nll(spec, t, x, y))

    def cond(c):
        i, _, _, loss, _ = c
        return (i < max_steps) & (loss > gamma)

    def body(c):
        i, theta, state, _, g = c
        updates, state = opt.update(g, state, theta)
        theta = optax.apply_updates(theta, updates)
        loss, g = value_and_grad(theta)
        return i + 1, theta, state, loss, g

    loss0, g0 = value_and_grad(theta0)
    steps, theta, _, loss, _ = jax.lax.while_loop(cond, body, (0, theta0, opt.init(theta0), loss0, g0))
    return theta, loss, steps


@dataclass(frozen=True)
class MapFit:
    params: ParameterVector
    loss: float
    steps: int


def fit_map_details(
    spec: ArchitectureSpec,
    batch: Batch,
    opt: OptimizerConfig,
    gamma: float,
    max_steps: int,
    rng,
    init: ParameterVector | None = None,
) -> MapFit:
    if gamma <= 0:
        raise ConfigurationError("gamma must be positive")
    theta0 = init_params(spec, rng) if init is None else init
    theta, loss, steps = _fit_until(spec, opt, _values(spec, theta0), batch.inputs, batch.labels, float(gamma), int(max_steps))
    loss = float(loss)
    if not np.isfinite(loss):
        raise DivergenceError(f"MAP fit for {spec.spec_id} diverged after {int(steps)} steps")
    if loss > gamma:
        raise NonConvergenceError(
            f"MAP fit for {spec.spec_id} stopped at loss {loss:.4g} > {gamma} after {max_steps} steps", last_loss=loss
        )
    return MapFit(ParameterVector(theta, spec.spec_id), loss, int(steps))


def fit_map(spec, batch, opt, gamma, max_steps, rng) -> ParameterVector:
    """First optimizer iterate whose mean training loss is at most ``gamma``."""
    return fit_map_details(spec, batch, opt, gamma, max_steps, rng).params


# ----------------------------------------------------------------------------
# function-space statistics


@dataclass(frozen=True)
class FunctionalPosterior:
    """N(g_anchor(u), diag(diag_std**2)) over the logits at u.

    The mean is recomputed from the anchor network for whatever ``u`` is
    passed; anchor and ``diag_std`` are constants under differentiation.
    """

    spec: ArchitectureSpec
    anchor: ParameterVector
    diag_std: jax.Array
    samples: jax.Array | None = None  # [K, m, d] outputs that produced diag_std

    def __post_init__(self):
        std = jnp.asarray(self.diag_std, dtype=jnp.float64)
        if not bool(jnp.all(jnp.isfinite(std))) or bool(jnp.any(std <= 0)):
            raise ValidationError("diag_std must be finite and positive")
        object.__setattr__(self, "diag_std", std)

    def mean(self, u) -> jax.Array:
        return forward(self.spec, self.anchor, u)


@functools.partial(jax.jit, static_argnums=(0, 6, 7))
def _excursion(spec, theta0, x, y, u, lr, K, minibatch, key):
    n = x.shape[0]

    def step(theta, k):
        if minibatch is None or minibatch >= n:
            xb, yb = x, y
        else:
            idx = jax.random.choice(k, n, (minibatch,), replace=False)
            xb, yb = x[idx], y[idx]
        theta = theta - lr * jax.grad(lambda t: mean_nll(spec, t, xb, yb))(theta)
        return theta, apply(spec, theta, u)

    _, outputs = jax.lax.scan(step, theta0, jax.random.split(key, K))
    return outputs


def collect_function_stats(
    spec: ArchitectureSpec,
    theta0: ParameterVector,
    opt_batch: Batch,
    eval_inputs,
    K: int = 30,
    lr: float = 0.01,
    sigma_floor: float = SIGMA_FLOOR,
    rng=0,
    minibatch_size: int | None = None,
) -> FunctionalPosterior:
    """Take K plain SGD steps from ``theta0`` and record the outputs at ``eval_inputs``.

    The returned standard deviation is the population (1/K) spread of those K
    outputs, floored at ``sigma_floor``; the mean stays anchored at ``theta0``.
    """
    if K < 2:
        raise ConfigurationError("K must be at least 2")
    flat = _values(spec, theta0)
    u = jnp.asarray(eval_inputs, dtype=jnp.float64)
    outputs = _excursion(spec, flat, opt_batch.inputs, opt_batch.labels, u, float(lr), int(K), minibatch_size, as_key(rng))
    if not bool(jnp.all(jnp.isfinite(outputs))):
        raise DivergenceError(f"function values became non-finite during the excursion for {spec.spec_id}")
    center = jnp.mean(outputs, axis=0)
    var = jnp.mean((outputs - center) ** 2, axis=0)
    std = jnp.maximum(sigma_floor, jnp.sqrt(var))
    if not bool(jnp.all(jnp.isfinite(std))):
        raise DivergenceError(f"function-value spread overflowed during the excursion for {spec.spec_id}")
    return FunctionalPosterior(spec, ParameterVector(flat, spec.spec_id), std, outputs)


def isotropic_stats(spec: ArchitectureSpec, theta0: ParameterVector, eval_inputs) -> FunctionalPosterior:
    m = jnp.shape(eval_inputs)[0]
    return FunctionalPosterior(spec, theta0, jnp.ones((m, spec.num_classes)))


def sample_functions(post: FunctionalPosterior, eval_inputs, S: int, rng, eps=None):
    """Reparameterized draws ``mean(u) + diag_std * eps``; returns ``(samples, eps)``."""
    if S < 1:
        raise ConfigurationError("S must be at least 1")
    mean = post.mean(eval_inputs)
    if eps is None:
        eps = jax.random.normal(as_key(rng), (S,) + mean.shape, dtype=jnp.float64)
    return mean[None] + post.diag_std[None] * eps, eps

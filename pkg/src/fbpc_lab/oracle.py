"""Closed-form and brute-force references for the function-space machinery.

Everything here is desk-scale and meant for validation: explicit Jacobians,
dense covariances, and very large Monte-Carlo sample counts.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
import scipy.linalg

from fbpc_lab.errors import CapabilityError, DimensionError, NumericalRankError, ValidationError
from fbpc_lab.models import CATEGORICAL, ArchitectureSpec, apply
from fbpc_lab.seeding import as_key

MAX_FD_PARAMS = 2000
FD_STEP = 1e-5
PSD_TOL = 1e-8


@dataclass(frozen=True)
class GaussianFD:
    """Gaussian over the ``m x d`` outputs at a finite input set.

    ``cov`` is indexed by the row-major flattening ``j * d + c`` of ``mean``.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        k = mean.size
        if cov.shape != (k, k):
            raise DimensionError(f"cov must be {k}x{k} for a mean of shape {mean.shape}, got {cov.shape}")
        if not (np.isfinite(mean).all() and np.isfinite(cov).all()):
            raise ValidationError("mean and cov must be finite")
        scale = max(1.0, float(np.abs(cov).max(initial=0.0)))
        if not np.allclose(cov, cov.T, rtol=0, atol=PSD_TOL * scale):
            raise ValidationError("cov must be symmetric")
        if k and np.linalg.eigvalsh(cov).min() < -PSD_TOL * scale:
            raise ValidationError("cov must be positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.size


def _is_affine(spec: ArchitectureSpec) -> bool:
    return spec.family == "mlp" and not spec.hidden_widths


def _affine_jacobian(spec: ArchitectureSpec, u: np.ndarray) -> np.ndarray:
    # f[j, c] = sum_k W[c, k] x_j[k] + b[c]
    x = u.reshape(u.shape[0], -1)
    m, D = x.shape
    d = spec.num_classes
    J = np.zeros((m * d, spec.num_params))
    offsets = np.cumsum([0] + [int(np.prod(b.shape)) for b in spec.layout])
    blocks = {b.name: off for b, off in zip(spec.layout, offsets)}
    for j in range(m):
        for c in range(d):
            row = j * d + c
            J[row, blocks["head.w"] + c * D : blocks["head.w"] + (c + 1) * D] = x[j]
            J[row, blocks["head.b"] + c] = 1.0
    return J


@functools.partial(jax.jit, static_argnums=0)
def _fd_columns(spec, mu, u, idx, h):
    def column(i):
        e = jnp.zeros_like(mu).at[i].set(h)
        return ((apply(spec, mu + e, u) - apply(spec, mu - e, u)) / (2 * h)).reshape(-1)

    return jax.vmap(column)(idx)


def parameter_jacobian(spec: ArchitectureSpec, mu, u, h: float = FD_STEP) -> np.ndarray:
    """``[m*d, p]`` Jacobian of the outputs at ``u`` w.r.t. the parameters at ``mu``.

    Exact for affine models; central finite differences otherwise.
    """
    mu = jnp.asarray(getattr(mu, "values", mu), dtype=jnp.float64)
    u = jnp.asarray(u, dtype=jnp.float64)
    p = spec.num_params
    if mu.shape != (p,):
        raise DimensionError(f"expected {p} parameters, got shape {mu.shape}")
    if _is_affine(spec):
        return _affine_jacobian(spec, np.asarray(u))
    if p > MAX_FD_PARAMS:
        raise CapabilityError(f"finite-difference Jacobian limited to {MAX_FD_PARAMS} parameters, model has {p}")
    cols = [np.asarray(_fd_columns(spec, mu, u, jnp.arange(s, min(s + 256, p)), h)) for s in range(0, p, 256)]
    return np.concatenate(cols).T


def linearized_fd_posterior(spec: ArchitectureSpec, mu, Sigma_diag, u) -> GaussianFD:
    """Outputs at ``u`` under the linearization of the network around ``mu``
    with weights ``N(mu, diag(Sigma_diag))``: mean ``g_mu(u)``, cov ``J Sigma J^T``."""
    mu_v = jnp.asarray(getattr(mu, "values", mu), dtype=jnp.float64)
    sigma = np.asarray(Sigma_diag, dtype=np.float64)
    if sigma.shape != (spec.num_params,):
        raise DimensionError(f"Sigma_diag must have shape ({spec.num_params},), got {sigma.shape}")
    if (sigma < 0).any():
        raise ValidationError("Sigma_diag must be non-negative")
    J = parameter_jacobian(spec, mu_v, u)
    mean = np.asarray(apply(spec, mu_v, jnp.asarray(u, dtype=jnp.float64)))
    return GaussianFD(mean, (J * sigma) @ J.T)


# ----------------------------------------------------------------------------
# Gaussian-likelihood closed form


def expected_grad_gaussian_loglik(q, u, targets, sigma_obs: float):
    """Exact ``E_{f ~ q}[log N(targets | f, sigma_obs^2 I)]`` and its gradient w.r.t. ``u``.

    ``q`` is a :class:`~fbpc_lab.posteriors.FunctionalPosterior` whose outputs
    are read as regression predictions. The expectation is
    ``-(||y - mean||^2 + tr Psi) / (2 sigma^2) - (m d / 2) log(2 pi sigma^2)``;
    only the mean depends on ``u``. Returns ``(value, gradient)``.
    """
    if not sigma_obs > 0:
        raise ValidationError("sigma_obs must be positive")
    u = jnp.asarray(u, dtype=jnp.float64)
    y = jnp.asarray(targets, dtype=jnp.float64)
    mean, pullback = jax.vjp(lambda z: apply(q.spec, q.anchor.values, z), u)
    if y.shape != mean.shape:
        raise DimensionError(f"targets must have shape {mean.shape}, got {y.shape}")
    s2 = sigma_obs**2
    resid = y - mean
    trace = jnp.sum(jnp.broadcast_to(q.diag_std, mean.shape) ** 2)
    value = -(jnp.sum(resid**2) + trace) / (2 * s2) - 0.5 * mean.size * jnp.log(2 * jnp.pi * s2)
    return float(value), pullback(resid / s2)[0]


# ----------------------------------------------------------------------------
# brute-force Monte Carlo


class MCEstimate(NamedTuple):
    mean: np.ndarray
    se: np.ndarray
    sample_std: np.ndarray
    S: int


@functools.partial(jax.jit, static_argnums=0)
def _input_jacobian(spec, anchor, u):
    # [m, d, m, *input_shape]; rows may couple through batch statistics
    return jax.jacrev(lambda z: apply(spec, anchor, z))(u)


@functools.partial(jax.jit, static_argnums=(0,))
def _chunk_moments(likelihood, mean_x, mean_u, std_x, std_u, labels, Jx, Ju, eps_x, eps_u):
    rx = jax.vmap(lambda e: likelihood.grad_f(mean_x + std_x * e, labels))(eps_x).reshape(eps_x.shape[0], -1)
    ru = jax.vmap(lambda e: likelihood.grad_f(mean_u + std_u * e, labels))(eps_u).reshape(eps_u.shape[0], -1)
    g = -rx @ Jx + ru @ Ju  # [chunk, m * input_size]
    return g.sum(axis=0), (g**2).sum(axis=0)


def brute_force_expected_grad(q_x, q_u, pc, S_big: int, rng, likelihood=CATEGORICAL, chunk: int = 20000) -> MCEstimate:
    """Plain Monte-Carlo reference for the gradient estimated by ``fbpc_gradient``.

    Every sample's gradient is formed explicitly from the full input Jacobians,
    so per-entry standard errors are available.
    """
    if S_big < 2:
        raise ValidationError("S_big must be at least 2")
    u = jnp.asarray(pc.u, dtype=jnp.float64)
    labels = jnp.asarray(pc.labels)
    spec = q_x.spec
    mean_x = apply(spec, q_x.anchor.values, u)
    mean_u = apply(spec, q_u.anchor.values, u)
    k = mean_x.size
    Jx = _input_jacobian(spec, q_x.anchor.values, u).reshape(k, -1)
    Ju = _input_jacobian(spec, q_u.anchor.values, u).reshape(k, -1)
    key = as_key(rng)
    total = jnp.zeros(Jx.shape[1])
    total_sq = jnp.zeros(Jx.shape[1])
    done = 0
    while done < S_big:
        n = min(chunk, S_big - done)
        key, kx, ku = jax.random.split(key, 3)
        ex = jax.random.normal(kx, (n,) + mean_x.shape, dtype=jnp.float64)
        eu = jax.random.normal(ku, (n,) + mean_x.shape, dtype=jnp.float64)
        s, s2 = _chunk_moments(likelihood, mean_x, mean_u, q_x.diag_std, q_u.diag_std, labels, Jx, Ju, ex, eu)
        total, total_sq, done = total + s, total_sq + s2, done + n
    mean = np.asarray(total) / S_big
    var = np.maximum(np.asarray(total_sq) / S_big - mean**2, 0.0) * S_big / (S_big - 1)
    std = np.sqrt(var)
    shape = tuple(u.shape)
    return MCEstimate(mean.reshape(shape), (std / np.sqrt(S_big)).reshape(shape), std.reshape(shape), S_big)


# ----------------------------------------------------------------------------
# finite-dimensional KL


def kl_forward_gaussian(p: GaussianFD, q: GaussianFD) -> float:
    """``KL(p || q)`` between two Gaussians of the same dimension.

    Raises :class:`NumericalRankError` when ``q.cov`` is singular; returns
    ``inf`` when only ``p.cov`` is.
    """
    if p.mean.shape != q.mean.shape:
        raise DimensionError(f"mean shapes differ: {p.mean.shape} vs {q.mean.shape}")
    k = p.dim
    try:
        cq = scipy.linalg.cho_factor(q.cov, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalRankError("q covariance is not positive definite") from exc
    diag_q = np.diag(cq[0])
    if diag_q.min() <= np.sqrt(np.finfo(float).eps) * diag_q.max():
        raise NumericalRankError("q covariance is numerically singular")
    evals_p = np.linalg.eigvalsh(p.cov)
    if evals_p.min() <= np.finfo(float).eps * k * max(evals_p.max(), 0.0):
        return float("inf")
    delta = (q.mean - p.mean).reshape(-1)
    trace = np.trace(scipy.linalg.cho_solve(cq, p.cov))
    maha = delta @ scipy.linalg.cho_solve(cq, delta)
    logdet_q = 2.0 * np.log(diag_q).sum()
    logdet_p = np.log(evals_p).sum()
    return float(max(0.5 * (trace + maha - k + logdet_q - logdet_p), 0.0))

"""Small classifiers evaluated from flat parameter vectors.

Every network is a pure function ``logits = g(theta, x)`` where ``theta`` is a
single float64 vector. The layout of that vector is a deterministic function of
the :class:`ArchitectureSpec`, so checkpoints, prior draws and gradients are
all plain arrays of length ``spec.num_params``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from fbpc_lab.errors import ConfigurationError, DimensionError
from fbpc_lab.seeding import as_key

FAMILIES = ("mlp", "convnet-small")
NORMALIZATIONS = ("none", "instance", "group", "layer", "batch")
BIAS_PRIOR_VAR = 1.0
NORM_EPS = 1e-5


class ParamBlock(NamedTuple):
    name: str
    shape: tuple
    fan_in: int
    is_bias: bool


@dataclass(frozen=True)
class ArchitectureSpec:
    family: str
    input_shape: tuple
    num_classes: int
    hidden_widths: tuple = (32, 32)
    activation: str = "relu"
    normalization: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}")
        if self.activation != "relu":
            raise ConfigurationError(f"unsupported activation {self.activation!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigurationError(f"unknown normalization {self.normalization!r}")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if any(w <= 0 for w in self.hidden_widths):
            raise ConfigurationError("hidden widths must be positive")
        if self.family == "mlp" and self.normalization in ("instance", "group"):
            raise ConfigurationError(f"{self.normalization} normalization needs convolutional feature maps")
        if self.family == "convnet-small":
            if len(self.input_shape) != 3:
                raise ConfigurationError("convnet-small expects input_shape (channels, height, width)")
            if len(self.hidden_widths) != 2:
                raise ConfigurationError("convnet-small takes exactly two channel widths")
            _, h, w = self.input_shape
            if h % 4 or w % 4:
                raise ConfigurationError("convnet-small needs spatial sides divisible by 4")

    @property
    def spec_id(self) -> str:
        hidden = "x".join(map(str, self.hidden_widths)) or "linear"
        shape = "x".join(map(str, self.input_shape))
        return f"{self.family}-{hidden}-{self.activation}-{self.normalization}-in{shape}-d{self.num_classes}"

    @functools.cached_property
    def layout(self) -> tuple:
        blocks = []
        if self.family == "mlp":
            fan_in = int(np.prod(self.input_shape))
            for i, width in enumerate(self.hidden_widths):
                blocks.append(ParamBlock(f"dense{i}.w", (width, fan_in), fan_in, False))
                blocks.append(ParamBlock(f"dense{i}.b", (width,), fan_in, True))
                fan_in = width
        else:
            channels, h, w = self.input_shape
            for i, width in enumerate(self.hidden_widths):
                fan_in = channels * 9
                blocks.append(ParamBlock(f"conv{i}.w", (width, channels, 3, 3), fan_in, False))
                blocks.append(ParamBlock(f"conv{i}.b", (width,), fan_in, True))
                channels = width
            fan_in = channels * (h // 4) * (w // 4)
        blocks.append(ParamBlock("head.w", (self.num_classes, fan_in), fan_in, False))
        blocks.append(ParamBlock("head.b", (self.num_classes,), fan_in, True))
        return tuple(blocks)

    @functools.cached_property
    def num_params(self) -> int:
        return sum(math.prod(b.shape) for b in self.layout)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "hidden_widths": list(self.hidden_widths),
            "activation": self.activation,
            "normalization": self.normalization,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(
            family=d["family"],
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            hidden_widths=tuple(d.get("hidden_widths", (32, 32))),
            activation=d.get("activation", "relu"),
            normalization=d.get("normalization", "none"),
        )


@dataclass(frozen=True)
class ParameterVector:
    values: jax.Array
    spec_id: str

    def __post_init__(self):
        object.__setattr__(self, "values", jnp.asarray(self.values, dtype=jnp.float64))
        if self.values.ndim != 1:
            raise DimensionError("parameter vector must be flat")

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class Batch:
    inputs: jax.Array
    labels: jax.Array

    def __post_init__(self):
        inputs = jnp.asarray(self.inputs, dtype=jnp.float64)
        labels = jnp.asarray(self.labels)
        if labels.ndim != 1 or inputs.shape[0] != labels.shape[0]:
            raise DimensionError(f"inputs {inputs.shape} and labels {labels.shape} disagree")
        if jnp.issubdtype(labels.dtype, jnp.floating):
            raise DimensionError("labels must be integers")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels.astype(jnp.int32))

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "Batch":
        idx = jnp.asarray(idx)
        return Batch(self.inputs[idx], self.labels[idx])


# ----------------------------------------------------------------------------
# prior


@functools.lru_cache(maxsize=None)
def _prior_arrays(spec: ArchitectureSpec):
    init_std, prior_var = [], []
    for b in spec.layout:
        n = math.prod(b.shape)
        if b.is_bias:
            init_std.append(np.zeros(n))
            prior_var.append(np.full(n, BIAS_PRIOR_VAR))
        else:
            init_std.append(np.full(n, 1.0 / math.sqrt(b.fan_in)))
            prior_var.append(np.full(n, 1.0 / b.fan_in))
    return np.concatenate(init_std), np.concatenate(prior_var)


def prior_variance(spec: ArchitectureSpec) -> jax.Array:
    """Per-parameter variance of the Gaussian prior (weights 1/fan_in, biases 1)."""
    return jnp.asarray(_prior_arrays(spec)[1])


def init_params(spec: ArchitectureSpec, rng) -> ParameterVector:
    """Draw from the prior: weights N(0, 1/fan_in), biases zero."""
    std = jnp.asarray(_prior_arrays(spec)[0])
    z = jax.random.normal(as_key(rng), (spec.num_params,), dtype=jnp.float64)
    return ParameterVector(std * z, spec.spec_id)


def log_prior(spec: ArchitectureSpec, flat: jax.Array) -> jax.Array:
    var = prior_variance(spec)
    return -0.5 * jnp.sum(flat**2 / var + jnp.log(2 * jnp.pi * var))


# ----------------------------------------------------------------------------
# forward


def unflatten(spec: ArchitectureSpec, flat: jax.Array) -> dict:
    out, offset = {}, 0
    for b in spec.layout:
        n = math.prod(b.shape)
        out[b.name] = flat[offset : offset + n].reshape(b.shape)
        offset += n
    return out


def _normalize(h, axes):
    mean = jnp.mean(h, axis=axes, keepdims=True)
    var = jnp.var(h, axis=axes, keepdims=True)
    return (h - mean) / jnp.sqrt(var + NORM_EPS)


def _norm_features(h, kind):
    # h: [n, features]
    if kind == "layer":
        return _normalize(h, (1,))
    if kind == "batch":
        return _normalize(h, (0,))
    return h


def _norm_maps(h, kind):
    # h: [n, c, height, width]
    if kind == "instance":
        return _normalize(h, (2, 3))
    if kind == "layer":
        return _normalize(h, (1, 2, 3))
    if kind == "batch":
        return _normalize(h, (0, 2, 3))
    if kind == "group":
        n, c, hh, ww = h.shape
        groups = math.gcd(c, 4)
        g = _normalize(h.reshape(n, groups, c // groups, hh, ww), (2, 3, 4))
        return g.reshape(n, c, hh, ww)
    return h


def _conv3x3(h, w):
    # SAME-padded 3x3 convolution as a patch contraction; unlike lax.conv this
    # stays a plain batched matmul under vmap over weights, which is much faster
    # on CPU at these sizes
    n, c, hh, ww = h.shape
    hp = jnp.pad(h, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = jnp.stack([hp[:, :, i : i + hh, j : j + ww] for i in range(3) for j in range(3)], axis=2)
    return jnp.einsum("nckhw,ock->nohw", cols, w.reshape(w.shape[0], c, 9))


def _avg_pool2(h):
    n, c, hh, ww = h.shape
    return h.reshape(n, c, hh // 2, 2, ww // 2, 2).mean(axis=(3, 5))


def apply(spec: ArchitectureSpec, flat: jax.Array, x: jax.Array) -> jax.Array:
    """Raw forward pass on arrays. No validation; safe to trace."""
    p = unflatten(spec, flat)
    n = x.shape[0]
    if spec.family == "mlp":
        h = x.reshape(n, -1)
        for i in range(len(spec.hidden_widths)):
            h = h @ p[f"dense{i}.w"].T + p[f"dense{i}.b"]
            h = jax.nn.relu(_norm_features(h, spec.normalization))
    else:
        h = x
        for i in range(2):
            h = _conv3x3(h, p[f"conv{i}.w"]) + p[f"conv{i}.b"][None, :, None, None]
            h = _avg_pool2(jax.nn.relu(_norm_maps(h, spec.normalization)))
        h = h.reshape(n, -1)
    return h @ p["head.w"].T + p["head.b"]


def _values(spec: ArchitectureSpec, params) -> jax.Array:
    if isinstance(params, ParameterVector):
        if params.spec_id != spec.spec_id:
            raise DimensionError(f"parameters belong to {params.spec_id}, not {spec.spec_id}")
        flat = params.values
    else:
        flat = jnp.asarray(params, dtype=jnp.float64)
    if flat.shape != (spec.num_params,):
        raise DimensionError(f"expected {spec.num_params} parameters, got {flat.shape}")
    return flat


def _check_inputs(spec: ArchitectureSpec, inputs) -> jax.Array:
    x = jnp.asarray(inputs, dtype=jnp.float64)
    if x.shape[1:] != spec.input_shape:
        raise DimensionError(f"inputs of shape {x.shape[1:]} do not match {spec.input_shape}")
    return x


_apply_jit = jax.jit(apply, static_argnums=0)


def forward(spec: ArchitectureSpec, params, inputs) -> jax.Array:
    """Logits ``[m, num_classes]`` for ``inputs`` of shape ``[m, *input_shape]``."""
    return _apply_jit(spec, _values(spec, params), _check_inputs(spec, inputs))


# ----------------------------------------------------------------------------
# likelihoods


def log_likelihood(logits, labels) -> jax.Array:
    """Categorical log-likelihood summed over rows."""
    logits = jnp.asarray(logits, dtype=jnp.float64)
    labels = jnp.asarray(labels)
    logp = jax.nn.log_softmax(logits, axis=-1)
    return jnp.sum(jnp.take_along_axis(logp, labels[:, None], axis=-1))


class CategoricalLikelihood:
    """Softmax likelihood over integer labels."""

    def log_prob(self, f, y):
        return log_likelihood(f, y)

    def grad_f(self, f, y):
        return jax.nn.one_hot(y, f.shape[-1], dtype=f.dtype) - jax.nn.softmax(f, axis=-1)

    def __hash__(self):
        return hash("categorical")

    def __eq__(self, other):
        return isinstance(other, CategoricalLikelihood)


class GaussianLikelihood:
    """Isotropic Gaussian observation model on the network outputs (test-only head)."""

    def __init__(self, sigma: float):
        self.sigma = float(sigma)

    def log_prob(self, f, y):
        r = y - f
        return -0.5 * jnp.sum(r**2) / self.sigma**2 - 0.5 * r.size * jnp.log(2 * jnp.pi * self.sigma**2)

    def grad_f(self, f, y):
        return (y - f) / self.sigma**2

    def __hash__(self):
        return hash(("gaussian", self.sigma))

    def __eq__(self, other):
        return isinstance(other, GaussianLikelihood) and other.sigma == self.sigma


CATEGORICAL = CategoricalLikelihood()


def mean_nll(spec: ArchitectureSpec, flat, x, y) -> jax.Array:
    """Mean cross-entropy, the training loss used by every optimizer here."""
    return -log_likelihood(apply(spec, flat, x), y) / x.shape[0]


# ----------------------------------------------------------------------------
# gradients


@functools.partial(jax.jit, static_argnums=0)
def _grad_params(spec, flat, x, y):
    return jax.grad(lambda t: log_likelihood(apply(spec, t, x), y))(flat)


@functools.partial(jax.jit, static_argnums=0)
def _grad_inputs(spec, flat, x, y, offset):
    return jax.grad(lambda z: log_likelihood(apply(spec, flat, z) + offset, y))(x)


@functools.partial(jax.jit, static_argnums=0)
def input_vjp(spec, flat, x, cotangent):
    """``J_x^T cotangent`` where ``J_x`` is the Jacobian of the logits w.r.t. the inputs."""
    _, pullback = jax.vjp(lambda z: apply(spec, flat, z), x)
    return pullback(cotangent)[0]


def grad_wrt_params(spec: ArchitectureSpec, params, batch: Batch) -> jax.Array:
    flat = _values(spec, params)
    return _grad_params(spec, flat, _check_inputs(spec, batch.inputs), batch.labels)


def grad_wrt_inputs(spec: ArchitectureSpec, params, inputs, labels, logit_offset=None) -> jax.Array:
    """Gradient of ``log_likelihood(forward(params, inputs) + logit_offset, labels)`` w.r.t. inputs.

    The parameters and the offset are constants here.
    """
    flat = _values(spec, params)
    x = _check_inputs(spec, inputs)
    labels = jnp.asarray(labels)
    if logit_offset is None:
        logit_offset = jnp.zeros((x.shape[0], spec.num_classes))
    offset = jnp.asarray(logit_offset, dtype=jnp.float64)
    if offset.shape != (x.shape[0], spec.num_classes):
        raise DimensionError(f"logit offset shape {offset.shape} does not match logits")
    return _grad_inputs(spec, flat, x, labels, offset)


def accuracy(spec: ArchitectureSpec, params, batch: Batch) -> float:
    logits = forward(spec, params, batch.inputs)
    return float(jnp.mean(jnp.argmax(logits, axis=-1) == batch.labels))

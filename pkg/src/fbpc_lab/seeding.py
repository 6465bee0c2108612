"""Seed handling. Every stochastic routine takes an explicit JAX key."""

from __future__ import annotations

import hashlib

import jax
import numpy as np


def as_key(rng) -> jax.Array:
    """Accept an int seed or an existing PRNG key."""
    if isinstance(rng, (int, np.integer)):
        return jax.random.PRNGKey(int(rng))
    return rng


def derive_seed(master: int, *parts) -> int:
    text = "/".join([str(int(master))] + [str(p) for p in parts])
    digest = hashlib.blake2b(text.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFFFFFF


def derive_key(master: int, *parts) -> jax.Array:
    """Sub-key that depends only on (master, parts), never on call order."""
    return jax.random.PRNGKey(derive_seed(master, *parts))

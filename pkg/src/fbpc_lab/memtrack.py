"""Allocation accounting by jaxpr inspection.

:func:`trace_buffers` stages a computation and lists every intermediate
array it would materialize, including those inside nested jit, scan,
while and cond bodies. It is a structural count, independent of how XLA
later fuses or reuses buffers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import jax
from jax.extend import core


@dataclass(frozen=True)
class Buffer:
    primitive: str
    shape: tuple
    dtype: str

    @property
    def numel(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class BufferReport:
    buffers: tuple

    @property
    def largest(self) -> int:
        return max((b.numel for b in self.buffers), default=0)

    def with_axis(self, size: int) -> list:
        """Buffers having an axis of exactly ``size`` (e.g. the parameter count)."""
        return [b for b in self.buffers if size in b.shape]

    def largest_with_axis(self, size: int) -> int:
        return max((b.numel for b in self.with_axis(size)), default=0)


def _sub_jaxprs(value):
    if isinstance(value, core.ClosedJaxpr):
        yield value.jaxpr
    elif isinstance(value, core.Jaxpr):
        yield value
    elif isinstance(value, (tuple, list)):
        for v in value:
            yield from _sub_jaxprs(v)


def _walk(jaxpr, out):
    for eqn in jaxpr.eqns:
        for var in eqn.outvars:
            aval = getattr(var, "aval", None)
            shape = getattr(aval, "shape", None)
            if shape is not None:
                out.append(Buffer(eqn.primitive.name, tuple(int(s) for s in shape), str(aval.dtype)))
        for value in eqn.params.values():
            for sub in _sub_jaxprs(value):
                _walk(sub, out)


def trace_buffers(fn, *args, **kwargs) -> BufferReport:
    """Every intermediate array materialized by ``fn(*args, **kwargs)``.

    Arguments are closed over, so Python-level validation inside ``fn`` runs
    on concrete values while all array work is staged.
    """
    closed = jax.make_jaxpr(lambda: fn(*args, **kwargs))()
    out: list = []
    _walk(closed.jaxpr, out)
    return BufferReport(tuple(out))

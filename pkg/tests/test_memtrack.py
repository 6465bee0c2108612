import jax.numpy as jnp

from fbpc_lab.memtrack import trace_buffers


def test_trace_sees_nested_buffers():
    import jax

    def f(x):
        def body(c, _):
            return c, jnp.outer(c, c)

        _, ys = jax.lax.scan(body, x, None, length=3)
        return ys.sum()

    rep = trace_buffers(f, jnp.ones(7))
    assert (7, 7) in [b.shape for b in rep.buffers]
    assert rep.largest_with_axis(7) == 3 * 49
    assert rep.largest_with_axis(11) == 0

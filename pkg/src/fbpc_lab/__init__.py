"""Function-space Bayesian pseudocoresets for small classifiers."""

import jax

jax.config.update("jax_enable_x64", True)

from fbpc_lab.models import ArchitectureSpec, Batch, ParameterVector  # noqa: E402

__all__ = ["ArchitectureSpec", "Batch", "ParameterVector"]
__version__ = "0.1.0"

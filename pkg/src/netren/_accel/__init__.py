"""Kernel selection: compiled Cython extension if built, numpy fallback otherwise."""
try:
    from ._kernels import ren_rollout_kernel, ren_step_kernel
    HAVE_COMPILED = True
except ImportError:  # extension not built
    from .python_ref import ren_rollout_kernel, ren_step_kernel
    HAVE_COMPILED = False

__all__ = ["ren_rollout_kernel", "ren_step_kernel", "HAVE_COMPILED"]

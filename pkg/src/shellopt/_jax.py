import os

import jax

jax.config.update("jax_enable_x64", True)

# compiled kernels are reused across processes; SHELLOPT_JAX_CACHE="" disables
_cache = os.environ.get("SHELLOPT_JAX_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "shellopt-jax"))
if _cache:
    try:
        jax.config.update("jax_compilation_cache_dir", _cache)
        jax.config.update("jax_persistent_cache_min_compile_time_secs", 1.0)
    except Exception:  # pragma: no cover - older jax
        pass

import jax.numpy as jnp  # noqa: E402

__all__ = ["jax", "jnp"]

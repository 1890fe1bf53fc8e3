"""Numba switch.

Set ``GRADLIME_DISABLE_JIT=1`` to run every hot kernel through its pure-numpy
fallback instead of the compiled loop version.
"""
import os

try:
    import numba as nb
except ImportError:  # pragma: no cover
    nb = None

JIT_DISABLED = nb is None or os.environ.get("GRADLIME_DISABLE_JIT", "0") not in ("", "0")


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise the identity decorator."""
    if nb is None:
        if args and callable(args[0]):
            return args[0]
        return lambda func: func
    kwargs.setdefault("cache", True)
    return nb.njit(*args, **kwargs)


def use_jit(backend=None):
    """Resolve a backend name ('numba', 'numpy' or None for the env default)."""
    if backend is None:
        return not JIT_DISABLED
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    return backend == "numba" and nb is not None

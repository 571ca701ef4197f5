"""Numba switch.

Set ``SCENESEG_NUMBA=0`` before import to run every kernel through its
pure-numpy implementation instead of the compiled one.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("SCENESEG_NUMBA", "1").lower() not in (
    "0",
    "false",
    "no",
    "off",
)


def optional_njit(**kwargs):
    """``numba.njit(cache=True, **kwargs)`` when enabled, identity otherwise."""
    opts = {"cache": True, "nogil": True}
    opts.update(kwargs)

    def decorator(func):
        if numba is None:
            return func
        return numba.njit(**opts)(func)

    return decorator


def set_threads(n):
    if numba is not None and n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


_ALLOCATOR_TUNED = False


def tune_allocator():
    """Keep large freed buffers in the glibc heap instead of unmapping them.

    Training allocates the same ~100 MB column buffers every step; letting
    glibc recycle them avoids re-faulting fresh pages each time. No-op off
    glibc.
    """
    global _ALLOCATOR_TUNED
    if _ALLOCATOR_TUNED:
        return
    _ALLOCATOR_TUNED = True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        M_TRIM_THRESHOLD, M_MMAP_MAX = -1, -4
        libc.mallopt(M_MMAP_MAX, 0)
        libc.mallopt(M_TRIM_THRESHOLD, 2**30)
    except (OSError, AttributeError):
        pass

"""Process-level allocator tuning for allocation-heavy numeric loops."""

from __future__ import annotations

import ctypes
import ctypes.util

_done = False


def tune_allocator() -> None:
    """Raise glibc's mmap/trim thresholds so multi-megabyte array buffers are
    recycled on the heap instead of being mapped and unmapped every iteration.

    No-op on non-glibc platforms and safe to call repeatedly.
    """
    global _done
    if _done:
        return
    _done = True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError, TypeError):
        pass

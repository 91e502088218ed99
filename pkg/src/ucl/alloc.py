"""Allocator tuning for the many short-lived batch-sized temporaries.

glibc serves blocks above ``M_MMAP_THRESHOLD`` with fresh ``mmap`` calls, so
every batch x batch temporary pays page faults on first touch; on a 512-row
batch that roughly triples step time. Raising the thresholds keeps freed
blocks in the heap for reuse. Numerics are unaffected.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_done = False


def keep_large_allocations(threshold: int = 256 * 1024 * 1024) -> bool:
    """Best effort; returns False where glibc ``mallopt`` is unavailable."""
    global _done
    if _done:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok = libc.mallopt(_M_MMAP_THRESHOLD, threshold) == 1 and libc.mallopt(_M_TRIM_THRESHOLD, 2 * threshold) == 1
    except (OSError, AttributeError):
        return False
    _done = ok
    return ok

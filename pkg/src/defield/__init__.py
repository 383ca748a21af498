"""defield: a dynamic radiance field with an explicit factorized motion
model, trained from sparse multi-view video with flow priors."""

import ctypes
import sys

__version__ = "0.1.0"


def _tune_malloc():
    """Keep medium numpy temporaries on the heap instead of mmap.

    glibc's default 128 KB mmap threshold makes every batch-sized
    temporary a pair of mmap/munmap syscalls, which is very expensive
    under syscall-intercepting sandboxes. Best effort; silently skipped
    off glibc/Linux."""
    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 64 * 1024 * 1024)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 128 * 1024 * 1024)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_malloc()

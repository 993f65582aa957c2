"""glibc allocator tuning for tape-style workloads.

Each training step allocates and frees a few hundred MB of large numpy
buffers held until the tape clears. With default glibc settings those blocks
are mmap'd and returned to the kernel on free, so every step re-faults the
same pages (dominating runtime on small machines). Keeping large blocks on
the heap makes steps after warm-up fault-free.

Set FRUSTUMSSC_NO_ALLOC_TUNING=1 to skip.
"""

import ctypes
import os
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_MAX = -4


def tune_allocator():
    if os.environ.get("FRUSTUMSSC_NO_ALLOC_TUNING"):
        return False
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        ok = libc.mallopt(_M_MMAP_MAX, 0)
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, 2**31 - 1)
        return bool(ok)
    except OSError:
        return False

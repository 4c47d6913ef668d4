"""Process-wide glibc allocator tuning for numeric churn.

The training loops allocate and free many ~100KB temporaries. With
glibc's default trim threshold those blocks go straight back to the
kernel, and re-faulting the pages dominates runtime on some kernels
(container sandboxes especially). Raising the trim/mmap thresholds keeps
freed blocks on the process free list; on systems where this does not
apply it is a no-op.
"""

import ctypes
import logging

log = logging.getLogger(__name__)

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3


def tune_allocator() -> bool:
    try:
        libc = ctypes.CDLL("libc.so.6")
        ok = (libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30)
              and libc.mallopt(_M_TOP_PAD, 1 << 26)
              and libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30))
        return bool(ok)
    except OSError:  # non-glibc platform
        log.debug("allocator tuning unavailable on this platform")
        return False

"""Process-level memory tuning applied when the package is imported.

Training allocates and frees many short-lived 10-100 MB activation buffers.
On virtualised hosts the page faults from handing that memory back to the
kernel and faulting it in again (worse with transparent huge pages) can cost
more than the arithmetic. Both knobs are skipped when the user configured
them through the usual environment variables.
"""

import ctypes
import ctypes.util
import os
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_KEEP_BYTES = 1 << 30


def disable_hugepage_advice() -> bool:
    if "NUMPY_MADVISE_HUGEPAGE" in os.environ:
        return False
    try:
        from numpy._core.multiarray import _set_madvise_hugepage
    except ImportError:  # numpy < 2
        try:
            from numpy.core.multiarray import _set_madvise_hugepage
        except ImportError:
            return False
    _set_madvise_hugepage(False)
    return True


def keep_freed_memory() -> bool:
    """Ask glibc malloc to serve large blocks from the heap and not trim it."""
    if not sys.platform.startswith("linux"):
        return False
    if any(k in os.environ for k in ("MALLOC_TRIM_THRESHOLD_", "MALLOC_MMAP_THRESHOLD_")):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = mallopt(_M_TRIM_THRESHOLD, _KEEP_BYTES) == 1
    return mallopt(_M_MMAP_THRESHOLD, _KEEP_BYTES) == 1 and ok


def configure() -> None:
    disable_hugepage_advice()
    keep_freed_memory()

"""Process-level performance tuning applied at package import.

Two container-environment pitfalls dominate this workload if left alone:

* glibc's default trim/mmap thresholds hand multi-megabyte temporaries back
  to the kernel on every free, so each step pays page-fault costs again;
* OpenBLAS worker threads spin between the many small GEMMs here and starve
  the compute thread, making multithreaded BLAS slower than single.

Both fixes are safe no-ops where they do not apply. Set GPEMU_NO_TUNE=1 to
skip them.
"""

from __future__ import annotations

import ctypes
import glob
import os

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3

_done = False


def _tune_malloc() -> None:
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30)
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)
    except OSError:
        pass


def _openblas_handles():
    roots = []
    try:
        import numpy

        roots.append(os.path.dirname(os.path.dirname(numpy.__file__)))
    except ImportError:
        return
    for libdir in ("numpy.libs", "scipy.libs"):
        for path in glob.glob(os.path.join(roots[0], libdir, "*openblas*")):
            try:
                yield ctypes.CDLL(path)
            except OSError:
                continue


_SET_THREAD_SYMS = (
    "openblas_set_num_threads",
    "openblas_set_num_threads64_",
    "scipy_openblas_set_num_threads",
    "scipy_openblas_set_num_threads64_",
    "scipy_openblas_set_num_threads_64_",
)


def _tune_blas_threads() -> None:
    for handle in _openblas_handles():
        for sym in _SET_THREAD_SYMS:
            fn = getattr(handle, sym, None)
            if fn is not None:
                fn(1)
                break


def tune_allocator() -> bool:
    global _done
    if _done or os.environ.get("GPEMU_NO_TUNE"):
        return _done
    _tune_malloc()
    _tune_blas_threads()
    _done = True
    return True

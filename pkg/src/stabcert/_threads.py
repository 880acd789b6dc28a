"""BLAS threadpool helpers.

The patch solves are thousands of tiny dense factorizations; multithreaded
BLAS pays a wake-up latency per call that dwarfs the arithmetic, so the hot
loops run under a single-thread limit.  threadpoolctl is optional; without it
the context is a no-op and the environment variables set by the CLI apply.
"""

from contextlib import nullcontext

try:
    from threadpoolctl import threadpool_limits

    def limit_blas_threads(n=1):
        return threadpool_limits(limits=int(n))

    def set_blas_threads(n):
        threadpool_limits(limits=int(n))

except ImportError:  # pragma: no cover - threadpoolctl present in CI
    def limit_blas_threads(n=1):
        return nullcontext()

    def set_blas_threads(n):
        pass

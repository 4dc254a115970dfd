"""BLAS thread pinning for the training and evaluation loops.

The recurrent step multiplies matrices small enough that OpenBLAS's
multithreading costs more than it buys (measured ~5x slower at batch
sizes used here), and single-threaded kernels keep reductions
bit-deterministic. Loops that carry recurrent state pin BLAS to one
thread for their duration."""

from contextlib import nullcontext

try:
    from threadpoolctl import threadpool_limits

    def single_thread_blas():
        return threadpool_limits(limits=1)
except ImportError:  # pragma: no cover
    def single_thread_blas():
        return nullcontext()

"""Thread control and strict (bit-reproducible) execution."""
import contextlib
import os

from threadpoolctl import threadpool_limits


def resolve_threads(threads=None):
    if threads is not None:
        return int(threads)
    env = os.environ.get("SDC_THREADS")
    return int(env) if env else None


@contextlib.contextmanager
def execution_mode(strict=False, threads=None):
    """Limit BLAS threads; strict mode pins them to one so reductions are ordered."""
    limit = 1 if strict else resolve_threads(threads)
    if limit is None:
        yield
        return
    with threadpool_limits(limits=limit):
        yield

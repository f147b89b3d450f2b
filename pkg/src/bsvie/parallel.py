"""Thread-count resolution and an order-preserving thread map."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

ENV_VAR = "BSVIE_THREADS"


def thread_count(threads=None):
    """Resolve the worker count: explicit value, then $BSVIE_THREADS, then CPU count."""
    env = os.environ.get(ENV_VAR)
    if env:
        threads = int(env)
    if threads is None:
        threads = os.cpu_count() or 1
    return max(1, int(threads))


def pmap(fn, items, threads=None):
    """``[fn(x) for x in items]`` evaluated on a thread pool; result order is preserved."""
    items = list(items)
    n = thread_count(threads)
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))

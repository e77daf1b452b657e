import os
from concurrent.futures import ThreadPoolExecutor

THREADS_ENV = "WARDRISK_THREADS"
CHUNK = 256


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def chunks(n: int, size: int = CHUNK):
    """Fixed-size index ranges; independent of the worker count so reductions stay bit-identical."""
    return [(i, min(n, i + size)) for i in range(0, n, size)]


def ordered_map(fn, items, threads: int | None = None):
    items = list(items)
    threads = default_threads() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))

"""Deterministic chunked parallel map honouring ``RISKSTOP_THREADS``."""
import os
from concurrent.futures import ThreadPoolExecutor


def n_threads() -> int:
    raw = os.environ.get("RISKSTOP_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = os.cpu_count() or 1
    return max(1, n)


def chunk_bounds(n: int, chunk: int):
    return [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]


def pmap(fn, items, threads=None):
    """``list(map(fn, items))``, possibly threaded; output order is input order."""
    items = list(items)
    threads = n_threads() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))

"""Process-level map for Monte Carlo replicates.

Work items carry their own seeds, so results are identical for any
thread count; reduction follows item order.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def available_threads() -> int:
    env = os.environ.get("KINKQR_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def par_map(fn, items, threads: int = 1) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    chunk = max(1, len(items) // (threads * 4))
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items, chunksize=chunk))

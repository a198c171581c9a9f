"""Deterministic parallel map for the per-box loops.

Boxes are independent, so the loop is a plain map; results are reduced
in input order regardless of worker count, which keeps floating-point
sums byte-identical between serial and parallel runs. Workers are
forked processes: the (large, read-only) transform caches are inherited
by the fork and never pickled; only per-box results travel back.
"""

from __future__ import annotations

import multiprocessing as mp

_PAYLOAD = None


def _call(i):
    func, items = _PAYLOAD
    return func(items[i])


def ordered_map(func, items, workers: int = 1) -> list:
    """[func(x) for x in items], optionally fanned out over processes.

    The result order always matches the input order.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(it) for it in items]
    global _PAYLOAD
    _PAYLOAD = (func, items)
    try:
        ctx = mp.get_context("fork")
        with ctx.Pool(min(workers, len(items))) as pool:
            return list(pool.imap(_call, range(len(items)), chunksize=1))
    finally:
        _PAYLOAD = None

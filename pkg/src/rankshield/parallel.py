"""Order-preserving map over a process pool."""

import multiprocessing


def ordered_map(fn, items, jobs=1):
    """``[fn(i) for i in items]``, fanned out over ``jobs`` worker processes.

    Results come back in input order regardless of completion order.
    """
    items = list(items)
    jobs = int(jobs or 1)
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with multiprocessing.get_context("spawn").Pool(min(jobs, len(items))) as pool:
        return pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs)))

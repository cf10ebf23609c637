import os
from concurrent.futures import ProcessPoolExecutor


def default_jobs() -> int:
    return os.cpu_count() or 1


def pmap(func, items, jobs=1):
    """Ordered map; ``jobs > 1`` fans out to worker processes.

    Each item must carry its own RNG key, so results do not depend on ``jobs``.
    """
    items = list(items)
    if jobs is None:
        jobs = default_jobs()
    if jobs <= 1 or len(items) <= 1:
        return [func(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as ex:
        return list(ex.map(func, items, chunksize=max(1, len(items) // (4 * jobs))))

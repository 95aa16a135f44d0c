from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor


def pmap(func, items, workers: int = 1) -> list:
    """Ordered map, in worker processes when ``workers > 1``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(func, items))

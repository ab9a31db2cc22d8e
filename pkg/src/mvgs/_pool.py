"""Block scheduling over a thread pool (the numba kernels release the GIL)."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable


def resolve_workers(workers: int | None) -> int:
    if workers is None or workers <= 0:
        return os.cpu_count() or 1
    return int(workers)


def chunks(n: int, parts: int) -> list[tuple[int, int]]:
    parts = max(1, min(parts, n))
    edges = [n * i // parts for i in range(parts + 1)]
    return [(edges[i], edges[i + 1]) for i in range(parts) if edges[i + 1] > edges[i]]


def run_blocks(work: Callable[[int, int], None], n_blocks: int, workers: int | None = 1) -> None:
    """Run ``work(k0, k1)`` over contiguous block ranges; blocks write disjoint outputs."""
    w = resolve_workers(workers)
    if n_blocks == 0:
        return
    if w == 1:
        work(0, n_blocks)
        return
    # a few chunks per worker evens out tiles of unequal cost
    spans = chunks(n_blocks, 4 * w)
    with ThreadPoolExecutor(max_workers=w) as pool:
        for f in [pool.submit(work, a, b) for a, b in spans]:
            f.result()

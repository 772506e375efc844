"""Deterministic thread-pool map: results are assembled by index, so the
output is bit-identical for any worker count."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    out: list[R] = [None] * len(items)  # type: ignore[list-item]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {pool.submit(fn, item): i for i, item in enumerate(items)}
        for fut, idx in futures.items():
            out[idx] = fut.result()
    return out

"""Order-preserving process-pool map used by the study drivers."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Iterable, TypeVar

from threadpoolctl import threadpool_limits

T = TypeVar("T")
R = TypeVar("R")

_STATE: tuple[Callable, Any] | None = None


def _init(fn: Callable, ctx: Any) -> None:
    global _STATE
    _STATE = (fn, ctx)
    # one BLAS thread per process keeps floating-point reductions identical
    threadpool_limits(1)


def _call(item):
    fn, ctx = _STATE
    return fn(ctx, item)


def ordered_map(fn: Callable[[Any, T], R], ctx: Any, items: Iterable[T], workers: int = 1) -> list[R]:
    """``[fn(ctx, x) for x in items]``, optionally spread over processes.

    ``fn`` must be a module-level function; ``ctx`` is shipped once per worker.
    Output order follows ``items`` whatever the completion order.
    """
    items = list(items)
    with threadpool_limits(1):
        if workers <= 1 or len(items) <= 1:
            return [fn(ctx, x) for x in items]
        with ProcessPoolExecutor(max_workers=min(workers, len(items)), initializer=_init,
                                 initargs=(fn, ctx)) as pool:
            return list(pool.map(_call, items))

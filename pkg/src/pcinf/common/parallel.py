import os

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def worker_count(jobs: Optional[int] = None) -> int:
    """
    returns the number of workers to use

    :param jobs: the requested number of workers, defaults to the number of logical cores
    :type jobs: Optional[int], optional
    :return: the number of workers, at least 1
    :rtype: int
    """
    if jobs is None or jobs <= 0:
        return os.cpu_count() or 1
    return jobs


def map_ordered(fn: Callable[[T], R], items: Iterable[T], jobs: Optional[int] = None) -> List[R]:
    """
    applies ``fn`` to all items in a thread pool and returns the results in input order.

    The result order never depends on the schedule.

    :param fn: the function to apply
    :type fn: Callable[[T], R]
    :param items: the items
    :type items: Iterable[T]
    :param jobs: the number of workers, defaults to the number of logical cores
    :type jobs: Optional[int], optional
    :return: the results in input order
    :rtype: List[R]
    """
    items = list(items)
    workers = min(worker_count(jobs), max(len(items), 1))

    if workers == 1:
        return [fn(item) for item in items]

    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="pcinf") as executor:
        return list(executor.map(fn, items))


def chunked(items: List[T], chunks: int) -> List[List[T]]:
    """
    splits a list into at most ``chunks`` contiguous chunks of similar size

    :param items: the list
    :type items: List[T]
    :param chunks: the maximum number of chunks
    :type chunks: int
    :return: the chunks in order
    :rtype: List[List[T]]
    """
    chunks = max(1, min(chunks, len(items)))
    size, rest = divmod(len(items), chunks)
    result = []
    start = 0
    for i in range(chunks):
        stop = start + size + (1 if i < rest else 0)
        result.append(items[start:stop])
        start = stop
    return [c for c in result if c]

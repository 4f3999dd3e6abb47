##########################
# Kernels of one time step
##########################

import contextlib
import time
import typing
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .enum_string import EnumString


class KernelId(EnumString):
    """
    Kernel names as they appear in timing.csv
    """
    sort = "sort"
    charge = "charge"
    poisson = "poisson"
    field = "field"
    smooth = "smooth"
    push = "push"
    shift = "shift"


class Kernel:
    def __init__(self, name: str, run: typing.Callable[[int], typing.Any], timing_id: KernelId | None = None,
                 every: int = 1):
        """
        :param name: name shown in logs
        :param run: called with the step index
        :param timing_id: kernel the elapsed time is booked on, None for untimed work (diagnostics)
        :param every: run on steps that are a multiple of this
        """
        if every < 1:
            raise ValueError(f"kernel '{name}': 'every' must be >= 1 (got {every})")
        self.name = name
        self.run = run
        self.timing_id = timing_id
        self.every = every

    def is_due(self, step: int) -> bool:
        return step % self.every == 0

    def to_yaml(self):
        y = {"timing": str(self.timing_id) if self.timing_id is not None else None}
        if self.every != 1:
            y["every"] = self.every
        return y


class KernelStore:
    """
    Kernels in execution order.
    New kernels are added through: my_store.add("charge", Kernel(...))
    """

    def add(self, identifier: str, k: Kernel) -> Kernel:
        if identifier in self.__dict__:
            raise ValueError(f"kernel '{identifier}' registered twice")
        self.__dict__[identifier] = k
        return k

    def all(self):
        return self.__dict__.values()

    def all_identifier(self):
        return self.__dict__.keys()

    def get(self, identifier: str) -> Kernel | None:
        return self.__dict__.get(identifier)

    def due(self, step: int) -> list[Kernel]:
        return [k for k in self.all() if k.is_due(step)]

    def to_yaml(self):
        return {k: v.to_yaml() for k, v in self.__dict__.items()}


class KernelClock:
    """
    Books elapsed monotonic time of a kernel onto ranks.
    Time measured for a phase that serves several ranks at once (communication) is split equally among them.
    """

    def __init__(self, sink: typing.Callable[[KernelId, int, float], None] | None = None):
        self.sink = sink

    @contextlib.contextmanager
    def measure(self, kernel: KernelId, ranks: int | typing.Iterable[int]):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - t0
            if self.sink is not None:
                ranks = [ranks] if isinstance(ranks, int) else list(ranks)
                for r in ranks:
                    self.sink(kernel, r, elapsed / len(ranks))


NULL_CLOCK = KernelClock()


def chunk_bounds(n: int, workers: int) -> list[tuple[int, int]]:
    """contiguous, disjoint [start, stop) ranges covering 0..n, one per worker"""
    edges = np.linspace(0, n, workers + 1).astype(np.int64)
    return [(int(edges[k]), int(edges[k + 1])) for k in range(workers)]


def run_chunks(fn: typing.Callable[[int, int], typing.Any], n: int, workers: int) -> list:
    """
    Call fn(start, stop) for every worker chunk.
    :return: results in worker order
    """
    bounds = chunk_bounds(n, workers)
    if workers == 1:
        return [fn(*bounds[0])]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, start, stop) for start, stop in bounds]
        return [f.result() for f in futures]

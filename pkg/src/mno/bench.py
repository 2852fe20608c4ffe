"""Wall-clock scaling of the three attention modules."""
from __future__ import annotations

import ctypes
import ctypes.util
import gc
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import Tensor, no_grad
from .geometry import knn_graph
from .model import MnoConfig, global_attention, init_model, local_attention, micro_attention

__all__ = ["BenchRow", "time_module", "bench_points", "bench_modes", "MODULES"]

MODULES = ("global", "local", "micro")


@dataclass
class BenchRow:
    size: int
    wall_ms: float
    ratio: float | None  # time relative to the previous row


def _runner(module: str, n: int, dim: int, modes: int, k: int, heads: int, seed: int):
    if module not in MODULES:
        raise ValueError(f"unknown module {module!r}; choose from {MODULES}")
    rng = np.random.default_rng(seed)
    cfg = MnoConfig(blocks=1, dim=dim, modes=modes, heads=heads, k=k)
    params = init_model(cfg, seed=seed).block(0)
    x = Tensor(rng.normal(size=(n, dim)).astype(np.float32))
    if module == "global":
        return lambda: global_attention(x, params.scope("global"), heads)
    if module == "local":
        graph = knn_graph(rng.random((n, 3)), k)
        return lambda: local_attention(x, graph, params.scope("local"))
    return lambda: micro_attention(x, params.scope("micro"))


_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def _steady_allocator() -> None:
    """Stop glibc from unmapping freed arrays between calls.

    Otherwise every call re-faults fresh pages for its temporaries, and that
    cost jumps once arrays cross the default mmap threshold, which shows up
    as spurious superlinear growth. No-op where glibc is absent.
    """
    name = ctypes.util.find_library("c")
    try:
        libc = ctypes.CDLL(name)
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(_M_TRIM_THRESHOLD, (1 << 31) - 1)
    except (OSError, AttributeError, TypeError):
        pass


def _best_times(runs: Sequence, repeats: int, min_time: float = 0.25) -> list[float]:
    """Best forward time in milliseconds per runner.

    Each runner gets at least ``repeats`` calls and at least ``min_time`` seconds
    of calls. Runners are visited round-robin, so a slow phase of a shared host
    hits every size alike instead of inflating whichever size happened to be
    timed during it; short runners simply take more samples.
    """
    _steady_allocator()
    best = [np.inf] * len(runs)
    spent = [0.0] * len(runs)
    count = [0] * len(runs)
    gc_was_on = gc.isenabled()
    gc.disable()
    try:
        with no_grad():
            for run in runs:
                run()  # warm-up
            pending = list(range(len(runs)))
            while pending:
                for i in pending:
                    t0 = time.perf_counter()
                    runs[i]()
                    dt = time.perf_counter() - t0
                    best[i] = min(best[i], dt)
                    spent[i] += dt
                    count[i] += 1
                pending = [i for i in pending if count[i] < repeats or spent[i] < min_time]
    finally:
        if gc_was_on:
            gc.enable()
    return [b * 1e3 for b in best]


def time_module(module: str, n: int, dim: int = 64, modes: int = 64, k: int = 8,
                heads: int = 8, repeats: int = 5, seed: int = 0) -> float:
    """Best-of-``repeats`` forward time in milliseconds for one module on N points."""
    return _best_times([_runner(module, n, dim, modes, k, heads, seed)], repeats)[0]


def _with_ratios(sizes: Sequence[int], times: Sequence[float]) -> list[BenchRow]:
    rows = []
    for i, (s, t) in enumerate(zip(sizes, times)):
        rows.append(BenchRow(s, t, None if i == 0 else t / times[i - 1]))
    return rows


def bench_points(module: str, ns: Sequence[int], dim: int = 64, modes: int = 64, k: int = 8,
                 heads: int = 8, repeats: int = 5, seed: int = 0) -> list[BenchRow]:
    """Time ``module`` over increasing point counts at fixed width/modes/k."""
    runs = [_runner(module, n, dim, modes, k, heads, seed) for n in ns]
    return _with_ratios(ns, _best_times(runs, repeats))


def bench_modes(ms: Sequence[int], n: int = 4000, dim: int = 64, k: int = 8, heads: int = 8,
                repeats: int = 5, seed: int = 0) -> list[BenchRow]:
    """Time the global module over increasing mode counts at fixed N."""
    runs = [_runner("global", n, dim, m, k, heads, seed) for m in ms]
    return _with_ratios(ms, _best_times(runs, repeats))

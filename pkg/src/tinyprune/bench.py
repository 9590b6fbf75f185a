"""Latency measurement and kernel backend comparison."""

from __future__ import annotations

import json
import os
import platform
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import _accel, engine, kernels
from .ir import count_cost, validate_graph


class MeasurementError(RuntimeError):
    pass


def device_descriptor():
    env = os.environ.get("TINYPRUNE_DEVICE")
    if env:
        return env
    cpu = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return f"{cpu} ({os.cpu_count()} logical cpus)"


@dataclass
class LatencyReport:
    graph_id: str
    device: str
    batch_size: int
    warmup_runs: int
    timed_runs: int
    threads: int
    backend: str
    per_run_ms: list = field(default_factory=list)
    median_ms: float = 0.0
    p10_ms: float = 0.0
    p90_ms: float = 0.0

    @classmethod
    def from_times(cls, times_ms, **meta):
        """Statistics are a pure function of ``times_ms``."""
        t = np.asarray(times_ms, dtype=np.float64)
        if t.size < 5:
            raise MeasurementError(f"need at least 5 timed runs, got {t.size}")
        p10, med, p90 = np.percentile(t, [10, 50, 90])
        return cls(per_run_ms=[float(v) for v in t], median_ms=float(med), p10_ms=float(p10), p90_ms=float(p90),
                   timed_runs=int(t.size), **meta)

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))
        return path


def _set_numba_threads(threads):
    if _accel.HAVE_NUMBA:
        import numba

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # threading-layer probing is noisy
            numba.set_num_threads(max(1, min(threads, numba.config.NUMBA_NUM_THREADS)))


def measure_latency(graph, batch_size=64, warmup=10, runs=30, threads=1, seed=0, device=None):
    """Time eval-mode forwards of ``graph`` on a fixed random batch.

    ``warmup`` untimed runs precede ``runs`` timed ones measured with
    ``time.perf_counter``.  BLAS and numba pools are limited to ``threads``.
    """
    if runs < 5:
        raise MeasurementError(f"runs must be >= 5, got {runs}")
    if batch_size < 1 or warmup < 0 or threads < 1:
        raise MeasurementError("batch_size and threads must be >= 1, warmup >= 0")
    problems = validate_graph(graph)
    if problems:
        raise MeasurementError("invalid graph: " + "; ".join(map(str, problems)))
    rng = np.random.default_rng(seed)
    dtype = engine._graph_dtype(graph)
    order = graph.topo_order()
    times = []
    try:
        x = rng.standard_normal((batch_size,) + tuple(graph.input_spec)).astype(dtype)
        with threadpool_limits(limits=threads):
            _set_numba_threads(threads)
            for _ in range(warmup):
                engine.run(graph, x, train_bn=set(), update_stats=False, order=order)
            for _ in range(runs):
                t0 = time.perf_counter()
                engine.run(graph, x, train_bn=set(), update_stats=False, order=order)
                times.append((time.perf_counter() - t0) * 1e3)
    except MemoryError as exc:
        raise MeasurementError(f"out of memory at batch size {batch_size}") from exc
    return LatencyReport.from_times(
        times,
        graph_id=graph.name or "graph",
        device=device or device_descriptor(),
        batch_size=batch_size,
        warmup_runs=warmup,
        threads=threads,
        backend=_accel.backend_name(),
    )


def compare_schemes(graphs, batch_size=8, warmup=2, runs=5, threads=1):
    """Cost and latency rows for a dict of named graphs."""
    rows = []
    for name, g in graphs.items():
        cost = count_cost(g)
        rep = measure_latency(g, batch_size, warmup, runs, threads)
        rows.append({"scheme": name, "params": cost.params, "macs": cost.macs, "median_ms": rep.median_ms,
                     "p10_ms": rep.p10_ms, "p90_ms": rep.p90_ms})
    return rows


# --------------------------------------------------------------------------
# numba vs numpy kernel comparison
# --------------------------------------------------------------------------


def _time(fn, repeats):
    fn()  # warm (and compile)
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts)) * 1e3


def kernel_benchmark(batch=16, channels=32, size=32, repeats=5, seed=0):
    """Median milliseconds per kernel on both backends.

    Returns rows ``{kernel, numba_ms, numpy_ms, max_abs_diff}``.
    """
    if not _accel.HAVE_NUMBA:
        raise MeasurementError("numba is not importable; nothing to compare")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, channels, size, size)).astype(np.float32)
    wdw = rng.standard_normal((channels, 1, 3, 3)).astype(np.float32)
    ho = kernels.out_size(size, 3, 1, 1)
    cols = rng.standard_normal((channels * 9, batch * ho * ho)).astype(np.float32)
    pooled, arg = kernels.maxpool_forward(x, 3, 2, 1)
    dpool = rng.standard_normal(pooled.shape).astype(np.float32)
    cases = {
        "im2col 3x3": lambda: kernels.im2col(x, 3, 3, 1, 1, 1, 1),
        "col2im 3x3": lambda: kernels.col2im(cols, x.shape, 3, 3, 1, 1, 1, 1),
        "maxpool fwd 3/2": lambda: kernels.maxpool_forward(x, 3, 2, 1)[0],
        "maxpool bwd 3/2": lambda: kernels.maxpool_backward(dpool, arg, x.shape),
        "depthwise fwd 3x3": lambda: kernels.depthwise_forward(x, wdw, 1, 1, 1, 1),
        "depthwise bwd 3x3": lambda: kernels.depthwise_backward(x, wdw, x, 1, 1, 1, 1)[0],
    }
    rows = []
    for name, fn in cases.items():
        out = {}
        res = {}
        for be in ("numba", "numpy"):
            with _accel.backend(be):
                out[be] = _time(fn, repeats)
                res[be] = np.asarray(fn())
        rows.append({"kernel": name, "numba_ms": out["numba"], "numpy_ms": out["numpy"],
                     "max_abs_diff": float(np.max(np.abs(res["numba"] - res["numpy"])))})
    return rows

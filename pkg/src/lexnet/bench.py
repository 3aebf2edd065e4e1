"""CPU inference timing and parameter accounting."""
from __future__ import annotations

import os
import platform
import time
from dataclasses import asdict, dataclass

import numpy as np

from .model import LexNetModel


@dataclass
class BenchReport:
    samples_per_s: float
    mean_us: float
    p50_us: float
    p95_us: float
    p99_us: float
    batch_size: int
    warmup_iters: int
    measured_iters: int
    n_params: int
    environment: str

    def to_dict(self):
        return asdict(self)


def environment_note() -> str:
    threads = os.environ.get("OMP_NUM_THREADS", "unset")
    return f"{platform.python_implementation()} {platform.python_version()}, numpy {np.__version__}, " \
           f"{platform.machine()}, OMP_NUM_THREADS={threads}"


def single_thread() -> None:
    """Pin BLAS to one thread when threadpoolctl is available (best effort)."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(1)


def time_forward(model: LexNetModel, x: np.ndarray, warmup_iters: int = 50, measured_iters: int = 500,
                 batch_size: int = 1) -> np.ndarray:
    """Per-sample latency (seconds) of ``measured_iters`` forward passes, cycling over ``x``."""
    if len(x) == 0:
        raise ValueError("empty dataset")
    if measured_iters < 1 or warmup_iters < 0 or batch_size < 1:
        raise ValueError("bad iteration counts")
    n = len(x)
    batches = [x[np.arange(i * batch_size, (i + 1) * batch_size) % n] for i in range(min(n, 64))]
    for i in range(warmup_iters):
        model.forward(batches[i % len(batches)])
    out = np.empty(measured_iters)
    clock = time.perf_counter
    for i in range(measured_iters):
        b = batches[i % len(batches)]
        t0 = clock()
        model.forward(b)
        out[i] = (clock() - t0) / batch_size
    return out


def bench_inference(model: LexNetModel, x: np.ndarray, warmup_iters: int = 50, measured_iters: int = 500,
                    batch_size: int = 1) -> BenchReport:
    single_thread()
    lat = time_forward(model, x, warmup_iters, measured_iters, batch_size) * 1e6
    p50, p95, p99 = np.percentile(lat, [50, 95, 99])
    mean = float(lat.mean())
    return BenchReport(1e6 / mean, mean, float(p50), float(p95), float(p99), batch_size, warmup_iters,
                       measured_iters, model.count_params(), environment_note())


def paired_backbone_bench(a: LexNetModel, b: LexNetModel, x: np.ndarray, rounds: int = 7,
                          iters: int = 200, warmup_iters: int = 30) -> dict:
    """Interleaved single-sample timings of two models; medians per model over all rounds.

    Interleaving keeps slow drifts of the machine (frequency scaling, other
    load) from landing on one side only.
    """
    single_thread()
    ta, tb = [], []
    time_forward(a, x, warmup_iters, 1)
    time_forward(b, x, warmup_iters, 1)
    for r in range(rounds):
        first, second = (a, b) if r % 2 == 0 else (b, a)
        t1 = time_forward(first, x, 0, iters)
        t2 = time_forward(second, x, 0, iters)
        (ta, tb)[first is b].append(t1)
        (tb, ta)[first is b].append(t2)
    ma = float(np.median(np.concatenate(ta))) * 1e6
    mb = float(np.median(np.concatenate(tb))) * 1e6
    return {"a_median_us": ma, "b_median_us": mb, "ratio": ma / mb}


def format_param_table(rows: list[dict]) -> str:
    head = f"{'Input':>10}  {'Operator':<14}{'Stride':>7}{'Out':>6}{'Cum. Params':>13}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['input']:>10}  {r['operator']:<14}{r['stride']:>7}{r['out']:>6}{r['cum']:>13,}")
    return "\n".join(lines)

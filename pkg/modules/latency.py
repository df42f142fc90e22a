"""
Inference latency for the three action decoders at batch size 1.

Every variant recomputes the condition for each chunk, so the shared
encoder cost is counted everywhere. Timings use time.perf_counter and the
median over warm chunks.
"""

import logging
import time
from typing import Callable, Dict, Sequence

import numpy as np
import pandas as pd

import calc
from core.tensor import no_grad
from modules.flow_policy import FlowPolicy
from modules.token_head import TokenHead, TokenHeadConfig

logger = logging.getLogger(__name__)

BENCH_COLUMNS = ["variant", "passes_per_chunk", "median_ms", "chunks_per_s"]
MIN_TIMED_CHUNKS = 200


def time_chunks(fn: Callable[[], object], n_chunks: int = MIN_TIMED_CHUNKS, warmup: int = 10) -> np.ndarray:
    """Wall-clock milliseconds of n_chunks calls after warmup untimed calls."""
    for _ in range(warmup):
        fn()
    out = np.empty(n_chunks)
    for i in range(n_chunks):
        start = time.perf_counter()
        fn()
        out[i] = (time.perf_counter() - start) * 1000.0
    return out


def _row(variant: str, passes: int, timings: np.ndarray) -> dict:
    median = float(np.median(timings))
    return {"variant": variant, "passes_per_chunk": passes, "median_ms": median, "chunks_per_s": 1000.0 / median}


def bench_latency(policy: FlowPolicy, student: FlowPolicy, head: TokenHead, context, instruction,
                  flow_steps: int = 5, n_chunks: int = MIN_TIMED_CHUNKS, warmup: int = 10, seed: int = 0) -> pd.DataFrame:
    """One row per variant: ar_token_head, flow_s{S}, distilled_s1."""
    context = np.asarray(context, dtype=np.float64).reshape(1, -1)
    instruction = np.asarray(instruction, dtype=np.int64).reshape(1)
    rng = np.random.default_rng(seed)

    def ar_chunk():
        with no_grad():
            cond = policy.encode_condition(context, instruction)
        return head.generate(cond)

    variants = [
        ("ar_token_head", head.cfg.length, ar_chunk),
        (f"flow_s{flow_steps}", flow_steps, lambda: policy.generate(context, instruction, flow_steps, rng=rng)),
        ("distilled_s1", 1, lambda: student.generate(context, instruction, 1, rng=rng)),
    ]
    rows = []
    for name, passes, fn in variants:
        rows.append(_row(name, passes, time_chunks(fn, n_chunks, warmup)))
        logger.info(f"latency {name}: median {rows[-1]['median_ms']:.3f} ms, {rows[-1]['chunks_per_s']:.1f} chunks/s")
    return pd.DataFrame(rows, columns=BENCH_COLUMNS)


def ar_latency_sweep(policy: FlowPolicy, head_cfg: TokenHeadConfig, depths: Sequence[int], context, instruction,
                     n_chunks: int = 50, warmup: int = 5, seed: int = 0) -> Dict[str, object]:
    """
    Median AR decoding time for heads of growing depth m (token count n*m),
    with a linear fit of milliseconds against token count.
    """
    context = np.asarray(context, dtype=np.float64).reshape(1, -1)
    instruction = np.asarray(instruction, dtype=np.int64).reshape(1)
    with no_grad():
        cond = policy.encode_condition(context, instruction)
    tokens, medians = [], []
    for m in depths:
        cfg = TokenHeadConfig(K=head_cfg.K, m=m, n=head_cfg.n, cond_dim=head_cfg.cond_dim, hidden=head_cfg.hidden,
                              layers=head_cfg.layers, heads_q=head_cfg.heads_q, heads_kv=head_cfg.heads_kv)
        head = TokenHead(cfg, np.random.default_rng(seed))
        medians.append(float(np.median(time_chunks(lambda: head.generate(cond), n_chunks, warmup))))
        tokens.append(cfg.length)
    slope, intercept, r2 = calc.linear_fit(tokens, medians)
    logger.info(f"AR latency slope {slope:.4f} ms/token, R^2 {r2:.4f}")
    return {"tokens": tokens, "median_ms": medians, "slope": slope, "intercept": intercept, "r2": r2}

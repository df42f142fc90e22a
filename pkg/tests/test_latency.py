import numpy as np
import pytest

from modules.distill import init_student
from modules.flow_policy import FlowPolicy, PolicyConfig
from modules.latency import BENCH_COLUMNS, ar_latency_sweep, bench_latency, time_chunks
from modules.token_head import TokenHead, TokenHeadConfig


@pytest.fixture(scope="module")
def policy():
    cfg = PolicyConfig(T_a=8, context_dim=4, n_instructions=2, layers=2, hidden=16, heads_q=4, heads_kv=2,
                       cond_tokens=4, steps=3, mlp_ratio=2)
    return FlowPolicy(cfg, np.random.default_rng(0))


@pytest.fixture(scope="module")
def head_cfg():
    return TokenHeadConfig(K=8, m=2, n=2, cond_dim=16, hidden=16, layers=1, heads_q=4, heads_kv=2, mlp_ratio=2)


class TestTiming:
    def test_counts_calls(self):
        calls = []
        timings = time_chunks(lambda: calls.append(1), n_chunks=7, warmup=3)
        assert len(calls) == 10
        assert timings.shape == (7,)
        assert np.all(timings >= 0)


class TestBench:
    def test_rows_per_variant(self, policy, head_cfg):
        head = TokenHead(head_cfg, np.random.default_rng(1))
        df = bench_latency(policy, init_student(policy), head, np.zeros(4), 1, flow_steps=3, n_chunks=3, warmup=1)
        assert list(df.columns) == BENCH_COLUMNS
        assert df["variant"].tolist() == ["ar_token_head", "flow_s3", "distilled_s1"]
        assert df["passes_per_chunk"].tolist() == [4, 3, 1]
        assert (df["median_ms"] > 0).all()
        np.testing.assert_allclose(df["chunks_per_s"], 1000.0 / df["median_ms"])

    def test_ar_sweep_token_counts(self, policy, head_cfg):
        out = ar_latency_sweep(policy, head_cfg, [1, 2, 4], np.zeros(4), 0, n_chunks=3, warmup=1)
        assert out["tokens"] == [2, 4, 8]
        assert len(out["median_ms"]) == 3
        assert set(out) == {"tokens", "median_ms", "slope", "intercept", "r2"}

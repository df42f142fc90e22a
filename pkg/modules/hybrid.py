"""
Hybrid ablation: flow training on top of a token-pretrained condition encoder
versus flow training from scratch, at matched total compute.

Hybrid arm: the condition encoder and a token head are trained with
cross-entropy on RVQ codes for pretrain_steps updates, the encoder is frozen,
then the velocity net is trained with the flow loss for flow_steps updates.
Scratch arm: encoder and velocity net are trained jointly with the flow loss
for pretrain_steps + flow_steps updates. Both arms start from the same initial
weights and read the same batch sequence; curves share one update axis, on
which the hybrid flow loss starts after pretraining.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
import pandas as pd

import calc
from core.errors import ConfigError
from modules.batching import Sampler
from modules.flow_policy import FlowPolicy, PolicyConfig, TrainConfig, train_policy
from modules.rvq import RvqTokenizer
from modules.token_head import TokenHead, head_config_for, train_token_head_on

logger = logging.getLogger(__name__)

HYBRID_COLUMNS = ["step", "hybrid_loss", "hybrid_smoothed", "scratch_loss", "scratch_smoothed"]
SEED_COLUMNS = ["seed", "hybrid_final", "scratch_final", "hybrid_updates", "scratch_updates"]

# seed -> batch source for one arm; called once per arm so both arms read the same batches
SamplerFactory = Callable[[int], Sampler]


@dataclass
class HybridConfig:
    pretrain_steps: int = 1000
    flow_steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-4
    head_lr: float = 1e-3
    head_layers: int = 2
    smoothing: float = 0.99
    seed: int = 0
    n_seeds: int = 3

    def __post_init__(self):
        if self.pretrain_steps < 1 or self.flow_steps < 1:
            raise ConfigError("hybrid ablation needs pretrain_steps >= 1 and flow_steps >= 1")
        if self.n_seeds < 1:
            raise ConfigError(f"hybrid ablation needs n_seeds >= 1, got {self.n_seeds}")

    @property
    def total_updates(self) -> int:
        return self.pretrain_steps + self.flow_steps

    @property
    def seeds(self) -> List[int]:
        return [self.seed + i for i in range(self.n_seeds)]

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ArmRun:
    seed: int
    hybrid: np.ndarray           # flow losses after pretraining
    scratch: np.ndarray
    pretrain_log: pd.DataFrame

    @property
    def hybrid_updates(self) -> int:
        return len(self.pretrain_log) + len(self.hybrid)

    @property
    def scratch_updates(self) -> int:
        return len(self.scratch)


@dataclass
class HybridResult:
    curves: pd.DataFrame         # mean over seeds
    per_seed: pd.DataFrame       # one row per seed plus a "mean" row
    seed_curves: pd.DataFrame    # curves for every seed, with a seed column
    pretrain_log: pd.DataFrame

    def final_smoothed(self):
        last = self.curves.iloc[-1]
        return float(last["hybrid_smoothed"]), float(last["scratch_smoothed"])


def _flow_config(cfg: HybridConfig, steps: int) -> TrainConfig:
    return TrainConfig(steps=steps, batch_size=cfg.batch_size, lr=cfg.lr,
                       warmup_steps=min(500, max(steps // 10, 1)), eval_every=0,
                       divergence_patience=steps + 1, smoothing=cfg.smoothing)


def _with_sampler(make_sampler: SamplerFactory, seed: int, fn):
    sampler = make_sampler(seed)
    try:
        return fn(sampler)
    finally:
        sampler.close()


def run_scratch_arm(policy_cfg: PolicyConfig, make_sampler: SamplerFactory, cfg: HybridConfig,
                    seed: int) -> np.ndarray:
    """Flow losses of pretrain_steps + flow_steps joint updates."""
    policy = FlowPolicy(policy_cfg, np.random.default_rng(seed))

    def run(sampler):
        result = train_policy(policy, sampler, _flow_config(cfg, cfg.total_updates), np.random.default_rng(seed + 1))
        return result.loss_log["loss"].to_numpy()

    return _with_sampler(make_sampler, seed, run)


def run_hybrid_arm(policy_cfg: PolicyConfig, make_sampler: SamplerFactory, tokenizer: RvqTokenizer,
                   cfg: HybridConfig, seed: int, head: Optional[TokenHead] = None):
    """Returns (flow loss series, cross-entropy pretraining log)."""
    policy = FlowPolicy(policy_cfg, np.random.default_rng(seed))
    head = head or TokenHead(head_config_for(tokenizer.cfg, policy_cfg.hidden, layers=cfg.head_layers),
                             np.random.default_rng(seed + 2))

    def run(sampler):
        ce_log = train_token_head_on(head, policy.encoder, sampler, tokenizer, cfg.pretrain_steps,
                                     cfg.batch_size, np.random.default_rng(seed + 3), lr=cfg.head_lr)
        policy.encoder.freeze()
        result = train_policy(policy, sampler, _flow_config(cfg, cfg.flow_steps), np.random.default_rng(seed + 1))
        return result.loss_log["loss"].to_numpy(), ce_log

    return _with_sampler(make_sampler, seed, run)


def ablation_curves(run: ArmRun, cfg: HybridConfig) -> pd.DataFrame:
    """Both arms on the shared update axis; the hybrid columns are NaN while pretraining."""
    hybrid = np.full(cfg.total_updates, np.nan)
    hybrid_smoothed = np.full(cfg.total_updates, np.nan)
    hybrid[cfg.pretrain_steps:] = run.hybrid
    hybrid_smoothed[cfg.pretrain_steps:] = calc.exponential_smoothing(run.hybrid, cfg.smoothing)
    return pd.DataFrame({
        "step": np.arange(1, cfg.total_updates + 1),
        "hybrid_loss": hybrid,
        "hybrid_smoothed": hybrid_smoothed,
        "scratch_loss": run.scratch,
        "scratch_smoothed": calc.exponential_smoothing(run.scratch, cfg.smoothing),
    }, columns=HYBRID_COLUMNS)


def hybrid_vs_scratch_ablation(policy_cfg: PolicyConfig, make_sampler: SamplerFactory, tokenizer: RvqTokenizer,
                               cfg: HybridConfig) -> HybridResult:
    """Flow-loss curves of both arms over cfg.seeds, raw and 99% smoothed, at equal update counts."""
    frames, rows, ce_logs = [], [], []
    for seed in cfg.seeds:
        hybrid, ce_log = run_hybrid_arm(policy_cfg, make_sampler, tokenizer, cfg, seed)
        run = ArmRun(seed, hybrid, run_scratch_arm(policy_cfg, make_sampler, cfg, seed), ce_log)
        curves = ablation_curves(run, cfg)
        last = curves.iloc[-1]
        rows.append({"seed": str(seed), "hybrid_final": float(last["hybrid_smoothed"]),
                     "scratch_final": float(last["scratch_smoothed"]),
                     "hybrid_updates": run.hybrid_updates, "scratch_updates": run.scratch_updates})
        frames.append(curves.assign(seed=seed))
        ce_logs.append(ce_log.assign(seed=seed))
        logger.info(f"Hybrid ablation seed {seed}: final smoothed flow loss hybrid {rows[-1]['hybrid_final']:.4f} "
                    f"vs scratch {rows[-1]['scratch_final']:.4f} after {run.scratch_updates} updates each")

    rows.append({"seed": "mean", "hybrid_final": float(np.mean([r["hybrid_final"] for r in rows])),
                 "scratch_final": float(np.mean([r["scratch_final"] for r in rows])),
                 "hybrid_updates": cfg.total_updates, "scratch_updates": cfg.total_updates})
    per_seed = pd.DataFrame(rows, columns=SEED_COLUMNS)
    seed_curves = pd.concat(frames, ignore_index=True)
    mean_curves = seed_curves.groupby("step", sort=True)[HYBRID_COLUMNS[1:]].mean().reset_index()
    result = HybridResult(mean_curves[HYBRID_COLUMNS], per_seed, seed_curves[["seed", *HYBRID_COLUMNS]],
                          pd.concat(ce_logs, ignore_index=True))
    h, s = result.final_smoothed()
    logger.info(f"Hybrid ablation over {cfg.n_seeds} seeds: mean final smoothed flow loss hybrid {h:.4f} "
                f"vs scratch {s:.4f}")
    return result

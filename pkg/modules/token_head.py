"""
Autoregressive head over RVQ codes.

A causal GQA decoder reads the serialized code sequence (latent-major, depth
inner) and predicts the next code with a K-way softmax. Every layer also
cross-attends to the condition tokens. Decoding keeps a per-layer KV cache,
so each generated code costs one single-position pass.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from core.errors import ConfigError, DimensionError
from core.nn import MLP, Embedding, GQAttention, LayerNorm, Linear, Module, Parameter
from core.optim import AdamW, make_schedule
from core.tensor import Tape, Tensor, concat, log_softmax, no_grad, reshape
from modules.flow_policy import ConditionEncoder

logger = logging.getLogger(__name__)


@dataclass
class TokenHeadConfig:
    K: int = 256
    m: int = 4
    n: int = 8
    cond_dim: int = 128
    hidden: int = 128
    layers: int = 2
    heads_q: int = 8
    heads_kv: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.K < 2 or self.m < 1 or self.n < 1:
            raise ConfigError(f"token head needs K >= 2, m >= 1, n >= 1; got {self.K}, {self.m}, {self.n}")
        if self.hidden % self.heads_q or self.heads_q % max(self.heads_kv, 1):
            raise ConfigError(f"hidden={self.hidden}, heads_q={self.heads_q}, heads_kv={self.heads_kv} do not divide")

    @property
    def length(self) -> int:
        return self.n * self.m

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class DecoderBlock(Module):
    def __init__(self, cfg: TokenHeadConfig, rng):
        self.ln_self = LayerNorm(cfg.hidden)
        self.self_attn = GQAttention(cfg.hidden, cfg.heads_q, cfg.heads_kv, rng)
        self.ln_cross = LayerNorm(cfg.hidden)
        self.cross_attn = GQAttention(cfg.hidden, cfg.heads_q, cfg.heads_kv, rng, source_dim=cfg.cond_dim)
        self.ln_mlp = LayerNorm(cfg.hidden)
        self.mlp = MLP(cfg.hidden, cfg.mlp_ratio * cfg.hidden, rng)

    def forward(self, h, cond, cache=None):
        h = h + self.self_attn(self.ln_self(h), causal=True, cache=cache)
        h = h + self.cross_attn(self.ln_cross(h), source=cond)
        return h + self.mlp(self.ln_mlp(h))


class TokenHead(Module):
    def __init__(self, cfg: TokenHeadConfig, rng):
        self.cfg = cfg
        self.embed = Embedding(cfg.m * cfg.K, cfg.hidden, rng)
        self.bos = Parameter(rng.standard_normal(cfg.hidden) * 0.02)
        self.pos = Parameter(rng.standard_normal((cfg.length, cfg.hidden)) * 0.02)
        self.blocks = [DecoderBlock(cfg, rng) for _ in range(cfg.layers)]
        self.ln_out = LayerNorm(cfg.hidden)
        self.out = Linear(cfg.hidden, cfg.K, rng)

    def _embed_codes(self, codes, start: int):
        """Embedding of codes occupying positions start, start+1, ... (depth-aware ids)."""
        codes = np.asarray(codes, dtype=np.int64)
        depth = (start + np.arange(codes.shape[1])) % self.cfg.m
        return self.embed(depth[None, :] * self.cfg.K + codes)

    def _bos(self, batch: int):
        return reshape(self.bos, (1, 1, self.cfg.hidden)) + np.zeros((batch, 1, self.cfg.hidden))

    def _run(self, h, cond, start: int, caches=None):
        h = h + self.pos[start:start + h.shape[1]]
        for i, block in enumerate(self.blocks):
            h = block(h, cond, cache=caches[i] if caches is not None else None)
        return self.out(self.ln_out(h))

    def forward(self, codes, cond):
        """Teacher-forced logits (B, L, K) for predicting codes[:, p] from codes[:, :p]."""
        codes = np.asarray(codes, dtype=np.int64)
        B, L = codes.shape
        if L > self.cfg.length:
            raise DimensionError(f"sequence length {L} exceeds {self.cfg.length}")
        if np.any(codes < 0) or np.any(codes >= self.cfg.K):
            raise DimensionError(f"codes must lie in [0, {self.cfg.K})")
        h = self._bos(B)
        if L > 1:
            h = concat([h, self._embed_codes(codes[:, :-1], 0)], axis=1)
        return self._run(h, cond, 0)

    def generate(self, cond, length: Optional[int] = None, rng=None, temperature: float = 1.0) -> np.ndarray:
        """KV-cached decoding; greedy when rng is None, else sampled at the given temperature."""
        length = length or self.cfg.length
        if length > self.cfg.length:
            raise DimensionError(f"sequence length {length} exceeds {self.cfg.length}")
        B = cond.shape[0]
        caches: List[dict] = [{} for _ in self.blocks]
        out = np.zeros((B, length), dtype=np.int64)
        with no_grad():
            h = self._bos(B)
            for p in range(length):
                logits = self._run(h, cond, p, caches).data[:, -1]
                if rng is None:
                    out[:, p] = np.argmax(logits, axis=-1)
                else:
                    z = logits / temperature
                    probs = np.exp(z - z.max(axis=-1, keepdims=True))
                    probs /= probs.sum(axis=-1, keepdims=True)
                    out[:, p] = [rng.choice(self.cfg.K, p=row) for row in probs]
                if p + 1 < length:
                    h = self._embed_codes(out[:, p:p + 1], p)
        return out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood over every (sample, position)."""
    targets = np.asarray(targets, dtype=np.int64)
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    n = targets.size
    return (log_softmax(logits, axis=-1) * onehot).sum() * (-1.0 / n)


def _fit_head(head: TokenHead, encoder: ConditionEncoder, next_batch, steps: int, lr: float, warmup_steps: int,
              weight_decay: float, log_every: int, progress: bool) -> pd.DataFrame:
    params = encoder.parameters() + head.parameters()
    schedule = make_schedule("cosine", lr, min(warmup_steps, max(steps // 10, 1)), steps)
    opt = AdamW(params, lr=lr, weight_decay=weight_decay, schedule=schedule)
    rows = []
    for step in tqdm(range(1, steps + 1), desc="token head", disable=not progress):
        codes, context, instruction = next_batch()
        with Tape() as tape:
            cond = encoder(context, instruction)
            loss = cross_entropy(head(codes, cond), codes)
        opt.step(tape.backward(loss, params))
        rows.append({"step": step, "loss": loss.item()})
        if step % log_every == 0 or step == steps:
            logger.info(f"token head step {step}/{steps} cross-entropy {loss.item():.4f} "
                        f"(uniform {np.log(head.cfg.K):.4f})")
    return pd.DataFrame(rows, columns=["step", "loss"])


def train_token_head(head: TokenHead, encoder: ConditionEncoder, codes, context, instruction, steps: int,
                     batch_size: int, rng, lr: float = 1e-4, warmup_steps: int = 1000,
                     weight_decay: float = 1e-2, log_every: int = 100, progress: bool = False) -> pd.DataFrame:
    """Cross-entropy pretraining of encoder and head together; returns a step,loss log."""
    codes = np.asarray(codes, dtype=np.int64)

    def next_batch():
        idx = rng.integers(0, len(codes), size=batch_size)
        return codes[idx], context[idx], instruction[idx]

    return _fit_head(head, encoder, next_batch, steps, lr, warmup_steps, weight_decay, log_every, progress)


def train_token_head_on(head: TokenHead, encoder: ConditionEncoder, sampler, tokenizer, steps: int,
                        batch_size: int, rng, lr: float = 1e-4, warmup_steps: int = 1000,
                        weight_decay: float = 1e-2, log_every: int = 100, progress: bool = False) -> pd.DataFrame:
    """As train_token_head, with each sampled batch tokenized on arrival."""
    def next_batch():
        batch = sampler.sample(rng, batch_size)
        return tokenizer.tokenize(batch["actions"]), batch["context"], batch["instruction"]

    return _fit_head(head, encoder, next_batch, steps, lr, warmup_steps, weight_decay, log_every, progress)


def head_config_for(tokenizer_cfg, cond_dim: int, **overrides) -> TokenHeadConfig:
    return TokenHeadConfig(K=tokenizer_cfg.K, m=tokenizer_cfg.m, n=tokenizer_cfg.n, cond_dim=cond_dim, **overrides)

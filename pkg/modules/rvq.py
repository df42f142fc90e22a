"""
Residual vector quantization action tokenizer.

A temporal conv encoder maps a normalized (T_a, d) chunk to n latents of
width C. Each latent is quantized greedily over m depth-ordered codebooks:
depth j picks the entry nearest to the running residual and subtracts it.
The decoder mirrors the encoder with transpose convs and reconstructs the
chunk from the summed entries.

Codebook collapse is countered by EMA updates, optional cosine lookup, a
small latent width and periodic restarts of rarely used entries.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from core.errors import ConfigError, DecodeError, DimensionError
from core.nn import Conv1d, ConvTranspose1d, Module, Parameter
from core.optim import AdamW, ema_update, make_schedule
from core.tensor import Tape, Tensor, add, as_tensor, gelu, no_grad, stop_gradient, take
from modules.batching import draw_actions
from storage import load_checkpoint, prefixed, save_checkpoint, strip_prefix

logger = logging.getLogger(__name__)

RESERVED_VOCAB = 1024
LAPLACE_EPS = 1e-5
_DIST_CHUNK = 2048


@dataclass
class RvqConfig:
    T_a: int = 32
    d: int = 14
    n: int = 8
    C: int = 64
    m: int = 4
    K: int = 256
    beta: float = 0.25
    distance: str = "euclidean"
    hidden: int = 64
    ema: bool = True
    ema_decay: float = 0.99
    codebook_grad: bool = False
    restart: bool = True
    restart_period: int = 500
    restart_threshold: int = 1
    init: str = "batch"
    vocab_offset: int = 0

    def __post_init__(self):
        if self.n < 1 or self.T_a % self.n:
            raise ConfigError(f"latent count n={self.n} must divide T_a={self.T_a}")
        factor = self.T_a // self.n
        if factor & (factor - 1):
            raise ConfigError(f"downsample factor T_a/n={factor} must be a power of two")
        if self.m * self.K > RESERVED_VOCAB:
            raise ConfigError(f"m*K={self.m * self.K} exceeds the reserved vocabulary of {RESERVED_VOCAB}")
        if self.vocab_offset < 0:
            raise ConfigError("vocab_offset must be >= 0")
        if self.distance not in ("euclidean", "cosine"):
            raise ConfigError(f"Unknown distance '{self.distance}'")
        if self.init not in ("batch", "random"):
            raise ConfigError(f"Unknown codebook init '{self.init}'")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must be in [0, 1), got {self.ema_decay}")

    @property
    def downsample(self) -> int:
        return self.T_a // self.n

    @property
    def n_down(self) -> int:
        return int(round(math.log2(self.downsample)))

    @property
    def tokens_per_chunk(self) -> int:
        return self.n * self.m

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class QuantizeResult:
    indices: np.ndarray              # (..., m) int64, 0-based
    z_hat: np.ndarray                # (..., C)
    residual_norms: np.ndarray       # (..., m + 1): ||r_0|| .. ||r_m||
    depth_inputs: List[np.ndarray] = field(default_factory=list)  # r_{j-1} per depth, flattened
    recon: Optional[np.ndarray] = None

    @property
    def tokens(self) -> np.ndarray:
        """Serialized token sequence, latent-major then depth: (..., n*m)."""
        lead = self.indices.shape[:-2]
        return self.indices.reshape(lead + (-1,))


# =============================================================================
# GREEDY RESIDUAL QUANTIZATION
# =============================================================================

def _unit(x):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norm > 0, norm, 1.0)


def nearest_entry(residuals: np.ndarray, entries: np.ndarray, distance: str = "euclidean") -> np.ndarray:
    """Index of the nearest entry per row; lowest index wins ties."""
    r = residuals if distance == "euclidean" else _unit(residuals)
    e = entries if distance == "euclidean" else _unit(entries)
    out = np.empty(r.shape[0], dtype=np.int64)
    for start in range(0, r.shape[0], _DIST_CHUNK):
        block = r[start:start + _DIST_CHUNK]
        diff = block[:, None, :] - e[None, :, :]
        out[start:start + _DIST_CHUNK] = np.argmin(np.sum(diff * diff, axis=-1), axis=1)
    return out


def quantize_rvq(latents, codebooks, distance: str = "euclidean", depth: Optional[int] = None) -> QuantizeResult:
    """
    Greedy residual quantization of latents (..., C) over codebooks [(K, C)] * m.

    Cosine mode normalizes residual and entries for the argmin only; the
    subtraction uses the raw entry, so z_hat stays the sum of chosen entries.
    """
    z = np.asarray(latents, dtype=np.float64)
    lead, C = z.shape[:-1], z.shape[-1]
    books = [np.asarray(cb, dtype=np.float64) for cb in codebooks]
    if depth is not None:
        if not 1 <= depth <= len(books):
            raise ConfigError(f"depth must be in [1, {len(books)}], got {depth}")
        books = books[:depth]
    for cb in books:
        if cb.shape[-1] != C:
            raise DimensionError(f"codebook width {cb.shape[-1]} != latent width {C}")

    r = z.reshape(-1, C)
    norms = [np.linalg.norm(r, axis=-1)]
    indices, inputs = [], []
    z_hat = np.zeros_like(r)
    for cb in books:
        inputs.append(r)
        k = nearest_entry(r, cb, distance)
        chosen = cb[k]
        z_hat = z_hat + chosen
        r = r - chosen
        indices.append(k)
        norms.append(np.linalg.norm(r, axis=-1))

    m = len(books)
    return QuantizeResult(
        indices=np.stack(indices, axis=-1).reshape(lead + (m,)),
        z_hat=z_hat.reshape(lead + (C,)),
        residual_norms=np.stack(norms, axis=-1).reshape(lead + (m + 1,)),
        depth_inputs=inputs,
    )


def lookup(indices, codebooks) -> np.ndarray:
    """z_hat = sum_j e_j(k_j), accumulated in depth order."""
    idx = np.asarray(indices)
    m = idx.shape[-1]
    if m > len(codebooks):
        raise DecodeError(f"{m} depths requested but only {len(codebooks)} codebooks")
    z_hat = None
    for j in range(m):
        cb = np.asarray(codebooks[j])
        k = idx[..., j]
        if np.any(k < 0) or np.any(k >= cb.shape[0]):
            raise DecodeError(f"code index out of range [0, {cb.shape[0]}) at depth {j}")
        chosen = cb[k]
        z_hat = chosen if z_hat is None else z_hat + chosen
    return z_hat


def lookup_tensor(indices, codebooks) -> Tensor:
    """Differentiable z_hat with respect to the codebook entries."""
    idx = np.asarray(indices, dtype=np.int64)
    out = None
    for j in range(idx.shape[-1]):
        chosen = take(codebooks[j], idx[..., j], axis=0)
        out = chosen if out is None else add(out, chosen)
    return out


# =============================================================================
# VOCABULARY VIEW
# =============================================================================

def to_vocab_ids(tokens, K: int, m: int, offset: int = 0) -> np.ndarray:
    """Serialized tokens (..., n*m) -> ids offset + j*K + k inside the reserved block."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape[-1] % m:
        raise DecodeError(f"token sequence length {tokens.shape[-1]} is not a multiple of m={m}")
    if np.any(tokens < 0) or np.any(tokens >= K):
        raise DecodeError(f"code index out of range [0, {K})")
    depth = np.arange(tokens.shape[-1]) % m
    return offset + depth * K + tokens


def from_vocab_ids(ids, K: int, m: int, offset: int = 0) -> np.ndarray:
    """Inverse of to_vocab_ids; ids must sit in the block and match their depth slot."""
    ids = np.asarray(ids, dtype=np.int64)
    local = ids - offset
    if np.any(local < 0) or np.any(local >= m * K):
        raise DecodeError(f"vocabulary id outside [{offset}, {offset + m * K})")
    depth, k = np.divmod(local, K)
    expected = np.arange(ids.shape[-1]) % m
    if np.any(depth != expected):
        raise DecodeError("vocabulary id at a position of a different depth")
    return k


# =============================================================================
# NETWORKS
# =============================================================================

class RvqEncoder(Module):
    def __init__(self, cfg: RvqConfig, rng):
        self.cfg = cfg
        if cfg.n_down == 0:
            self.blocks = []
            self.out = Conv1d(cfg.d, cfg.C, 1, rng)
        else:
            self.inp = Conv1d(cfg.d, cfg.hidden, 3, rng, pad=1)
            self.blocks = [Conv1d(cfg.hidden, cfg.hidden, 4, rng, stride=2, pad=1) for _ in range(cfg.n_down)]
            self.out = Conv1d(cfg.hidden, cfg.C, 1, rng)

    def forward(self, x):
        if not self.blocks:
            return self.out(x)
        h = gelu(self.inp(x))
        for block in self.blocks:
            h = gelu(block(h))
        return self.out(h)


class RvqDecoder(Module):
    def __init__(self, cfg: RvqConfig, rng):
        self.cfg = cfg
        if cfg.n_down == 0:
            self.blocks = []
            self.out = Conv1d(cfg.C, cfg.d, 1, rng)
        else:
            self.inp = Conv1d(cfg.C, cfg.hidden, 1, rng)
            self.blocks = [ConvTranspose1d(cfg.hidden, cfg.hidden, 4, rng, stride=2, pad=1) for _ in range(cfg.n_down)]
            self.out = Conv1d(cfg.hidden, cfg.d, 3, rng, pad=1)

    def forward(self, z):
        if not self.blocks:
            return self.out(z)
        h = gelu(self.inp(z))
        for block in self.blocks:
            h = gelu(block(h))
        return self.out(h)


class RvqTokenizer(Module):
    """Encoder, m codebooks with EMA statistics, decoder."""

    def __init__(self, cfg: RvqConfig, rng):
        self.cfg = cfg
        self.encoder = RvqEncoder(cfg, rng)
        self.decoder = RvqDecoder(cfg, rng)
        self.codebooks = [Parameter(rng.standard_normal((cfg.K, cfg.C)) / math.sqrt(cfg.C), name=f"codebook.{j}")
                          for j in range(cfg.m)]
        self.ema_size = np.ones((cfg.m, cfg.K))
        self.ema_sum = np.stack([cb.data.copy() for cb in self.codebooks])
        self.usage = np.zeros((cfg.m, cfg.K), dtype=np.int64)
        self.initialized = cfg.init == "random"

    def codebook_arrays(self):
        return [cb.data for cb in self.codebooks]

    def network_parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    # --- inference path ---
    def encode_latents(self, chunks) -> Tensor:
        x = as_tensor(chunks)
        if x.ndim != 3 or x.shape[1:] != (self.cfg.T_a, self.cfg.d):
            raise DimensionError(f"expected chunks (B, {self.cfg.T_a}, {self.cfg.d}), got {x.shape}")
        return self.encoder(x)

    def quantize(self, latents, depth: Optional[int] = None) -> QuantizeResult:
        z = latents.data if isinstance(latents, Tensor) else latents
        return quantize_rvq(z, self.codebook_arrays(), self.cfg.distance, depth)

    def decode(self, z_hat) -> np.ndarray:
        with no_grad():
            return self.decoder(as_tensor(z_hat)).data

    def quantize_chunks(self, chunks, depth: Optional[int] = None) -> QuantizeResult:
        with no_grad():
            latents = self.encode_latents(chunks)
        result = self.quantize(latents, depth)
        result.recon = self.decode(result.z_hat)
        return result

    def tokenize(self, chunks, depth: Optional[int] = None) -> np.ndarray:
        return self.quantize_chunks(chunks, depth).tokens

    def dequantize(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.shape[-1] % self.cfg.n:
            raise DecodeError(f"token length {tokens.shape[-1]} is not a multiple of n={self.cfg.n}")
        depth = tokens.shape[-1] // self.cfg.n
        indices = tokens.reshape(tokens.shape[:-1] + (self.cfg.n, depth))
        return self.decode(lookup(indices, self.codebook_arrays()))

    def vocab_ids(self, tokens) -> np.ndarray:
        return to_vocab_ids(tokens, self.cfg.K, tokens.shape[-1] // self.cfg.n, self.cfg.vocab_offset)

    def tokens_from_vocab(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        return from_vocab_ids(ids, self.cfg.K, ids.shape[-1] // self.cfg.n, self.cfg.vocab_offset)

    # --- codebook maintenance ---
    def init_codebooks_from(self, latents: np.ndarray, rng):
        """Seed each depth with batch residuals at that depth."""
        r = np.asarray(latents, dtype=np.float64).reshape(-1, self.cfg.C)
        for j, cb in enumerate(self.codebooks):
            replace = r.shape[0] < self.cfg.K
            pick = rng.choice(r.shape[0], self.cfg.K, replace=replace)
            entries = r[pick].copy()
            if replace:
                entries += rng.standard_normal(entries.shape) * 0.01 / math.sqrt(self.cfg.C)
            cb.data = entries
            self.ema_sum[j] = entries
            self.ema_size[j] = 1.0
            r = r - entries[nearest_entry(r, entries, self.cfg.distance)]
        self.initialized = True
        logger.info(f"Initialised {self.cfg.m} codebooks from {latents.reshape(-1, self.cfg.C).shape[0]} latents")

    def record_usage(self, result: QuantizeResult):
        idx = result.indices.reshape(-1, result.indices.shape[-1])
        for j in range(idx.shape[-1]):
            self.usage[j] += np.bincount(idx[:, j], minlength=self.cfg.K)

    # --- persistence ---
    def checkpoint_arrays(self):
        arrays = prefixed(self.state_dict(), "model")
        arrays["ema.size"] = self.ema_size.copy()
        arrays["ema.sum"] = self.ema_sum.copy()
        arrays["ema.usage"] = self.usage.copy()
        return arrays

    def save(self, path, extra: Optional[dict] = None):
        meta = {"kind": "rvq_tokenizer", "config": asdict(self.cfg), "initialized": self.initialized}
        meta.update(extra or {})
        return save_checkpoint(path, self.checkpoint_arrays(), meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path)
        cfg = RvqConfig.from_dict(meta["config"])
        tok = cls(cfg, np.random.default_rng(0))
        tok.load_state_dict(strip_prefix(arrays, "model"))
        tok.ema_size = arrays["ema.size"].copy()
        tok.ema_sum = arrays["ema.sum"].copy()
        tok.usage = arrays["ema.usage"].astype(np.int64)
        tok.initialized = bool(meta.get("initialized", True))
        return tok


def dequantize(tokens, codebooks, decoder, n: int) -> np.ndarray:
    """Functional form: summed entries through the decoder."""
    tokens = np.asarray(tokens, dtype=np.int64)
    indices = tokens.reshape(tokens.shape[:-1] + (n, tokens.shape[-1] // n))
    with no_grad():
        return decoder(as_tensor(lookup(indices, codebooks))).data


# =============================================================================
# LOSS AND CODEBOOK UPDATES
# =============================================================================

def tokenizer_loss(chunk, recon, latents, z_hat, beta: float, codebook_grad: bool = True) -> dict:
    """
    ||A - A_hat||^2 + ||sg(z) - z_hat||^2 + beta ||z - sg(z_hat)||^2,
    summed over chunk elements and averaged over the batch.

    With codebook_grad False the middle term is reported but carries no gradient.
    """
    chunk, recon, latents, z_hat = (as_tensor(t) for t in (chunk, recon, latents, z_hat))
    batch = chunk.shape[0]
    rec_err = recon - chunk
    rec = (rec_err * rec_err).sum() * (1.0 / batch)
    cb_target = z_hat if codebook_grad else stop_gradient(z_hat)
    cb_err = cb_target - stop_gradient(latents)
    codebook = (cb_err * cb_err).sum() * (1.0 / batch)
    commit_err = latents - stop_gradient(z_hat)
    commit = (commit_err * commit_err).sum() * (1.0 / batch)
    total = rec + codebook + commit * beta
    return {"loss": total, "recon": rec, "codebook": codebook, "commit": commit}


def straight_through(latents: Tensor, z_hat) -> Tensor:
    """Forward value z_hat, gradient of identity with respect to latents."""
    return add(latents, stop_gradient(as_tensor(z_hat).data - latents.data))


def ema_codebook_update(tok: RvqTokenizer, result: QuantizeResult, decay: Optional[float] = None):
    """
    EMA of per-entry assignment counts and sums; entries with a nonzero batch
    count move to sum / (size + eps). Entries without assignments keep their
    value while their statistics decay.
    """
    decay = tok.cfg.ema_decay if decay is None else decay
    idx = result.indices.reshape(-1, result.indices.shape[-1])
    for j in range(idx.shape[-1]):
        inputs = result.depth_inputs[j]
        counts = np.bincount(idx[:, j], minlength=tok.cfg.K).astype(np.float64)
        sums = np.zeros((tok.cfg.K, tok.cfg.C))
        np.add.at(sums, idx[:, j], inputs)
        tok.ema_size[j] = ema_update(tok.ema_size[j], counts, decay)
        tok.ema_sum[j] = ema_update(tok.ema_sum[j], sums, decay)
        hit = counts > 0
        entries = tok.codebooks[j].data.copy()
        entries[hit] = tok.ema_sum[j][hit] / (tok.ema_size[j][hit, None] + LAPLACE_EPS)
        tok.codebooks[j].data = entries


def restart_dead_codes(tok: RvqTokenizer, result: QuantizeResult, rng, threshold: Optional[int] = None) -> List[int]:
    """Re-seed entries used fewer than threshold times from residuals at their depth."""
    threshold = tok.cfg.restart_threshold if threshold is None else threshold
    restarted = []
    for j, cb in enumerate(tok.codebooks):
        dead = np.nonzero(tok.usage[j] < threshold)[0]
        if dead.size:
            pool = result.depth_inputs[j]
            pick = rng.choice(pool.shape[0], dead.size, replace=pool.shape[0] < dead.size)
            entries = cb.data.copy()
            entries[dead] = pool[pick]
            cb.data = entries
            tok.ema_sum[j][dead] = pool[pick]
            tok.ema_size[j][dead] = 1.0
        restarted.append(int(dead.size))
    tok.usage[:] = 0
    if any(restarted):
        logger.info(f"Restarted dead codes per depth: {restarted}")
    return restarted


def codebook_utilization(tok: RvqTokenizer, chunks, batch_size: int = 256) -> np.ndarray:
    """Fraction of entries selected at least once per depth over chunks."""
    hit = np.zeros((tok.cfg.m, tok.cfg.K), dtype=bool)
    for start in range(0, len(chunks), batch_size):
        res = tok.quantize_chunks(chunks[start:start + batch_size])
        idx = res.indices.reshape(-1, tok.cfg.m)
        for j in range(tok.cfg.m):
            hit[j, idx[:, j]] = True
    return hit.mean(axis=1)


# =============================================================================
# TRAINING
# =============================================================================

def training_step(tok: RvqTokenizer, batch: np.ndarray, rng):
    """Forward with the straight-through estimator; returns (loss dict, quantize result, tape)."""
    if not tok.initialized:
        with no_grad():
            tok.init_codebooks_from(tok.encode_latents(batch).data, rng)
    with Tape() as tape:
        latents = tok.encode_latents(batch)
        result = tok.quantize(latents)
        z_hat = lookup_tensor(result.indices, tok.codebooks)
        recon = tok.decoder(straight_through(latents, z_hat))
        losses = tokenizer_loss(batch, recon, latents, z_hat, tok.cfg.beta,
                                codebook_grad=tok.cfg.codebook_grad or not tok.cfg.ema)
    return losses, result, tape


def train_tokenizer(tok: RvqTokenizer, source, steps: int, batch_size: int, rng,
                    lr: float = 1e-3, warmup_steps: int = 1000, weight_decay: float = 0.0,
                    log_every: int = 100, progress: bool = False) -> pd.DataFrame:
    """Train on normalized chunks, an (N, T_a, d) array or a sampler; returns the tokenizer log."""
    cfg = tok.cfg
    train_codebooks = cfg.codebook_grad or not cfg.ema
    params = tok.network_parameters() + (list(tok.codebooks) if train_codebooks else [])
    schedule = make_schedule("cosine", lr, min(warmup_steps, max(steps // 10, 1)), steps)
    opt = AdamW(params, lr=lr, weight_decay=weight_decay, schedule=schedule)
    rows = []
    restarts_total = 0
    for step in tqdm(range(1, steps + 1), desc="tokenizer", disable=not progress):
        batch = draw_actions(source, rng, batch_size)
        losses, result, tape = training_step(tok, batch, rng)
        grads = tape.backward(losses["loss"], params)
        opt.step(grads)
        tok.record_usage(result)
        if cfg.ema:
            ema_codebook_update(tok, result)
        restarts = 0
        if cfg.restart and step % cfg.restart_period == 0:
            restarts = int(sum(restart_dead_codes(tok, result, rng)))
            restarts_total += restarts
        rows.append({"step": step, "loss": losses["loss"].item(), "recon": losses["recon"].item(),
                     "codebook": losses["codebook"].item(), "commit": losses["commit"].item(),
                     "restarts": restarts})
        if step % log_every == 0 or step == steps:
            logger.info(f"tokenizer step {step}/{steps} loss {rows[-1]['loss']:.5f} "
                        f"recon {rows[-1]['recon']:.5f} restarts so far {restarts_total}")
    return pd.DataFrame(rows, columns=["step", "loss", "recon", "codebook", "commit", "restarts"])

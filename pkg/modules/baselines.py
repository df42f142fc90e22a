"""
Baseline action tokenizers for the token-budget comparison.

UniformBinTokenizer: one token per action element, uniform bins per dimension.
DctBpeTokenizer: orthonormal DCT-II over time per dimension, low-frequency
truncation, scalar quantization, then byte-pair merges on the symbol stream.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from scipy.fft import dct, idct

from core.errors import ConfigError, DecodeError, DimensionError

logger = logging.getLogger(__name__)


# =============================================================================
# UNIFORM BINNING
# =============================================================================

def _check_ranges(bins, lo, hi):
    if bins < 2:
        raise ConfigError(f"bins must be >= 2, got {bins}")
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(hi <= lo):
        raise ConfigError("uniform binning needs hi > lo in every dimension")
    return lo, hi


def uniform_bin_encode(chunk, bins: int, ranges) -> np.ndarray:
    """(..., T, d) -> (..., T*d) bin indices, time-major."""
    lo, hi = _check_ranges(bins, *ranges)
    x = np.clip(np.asarray(chunk, dtype=np.float64), lo, hi)
    idx = np.floor((x - lo) / (hi - lo) * bins).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    return idx.reshape(idx.shape[:-2] + (-1,))


def uniform_bin_decode(ids, bins: int, ranges, d: int) -> np.ndarray:
    """Bin indices -> bin centers, reshaped to (..., T, d)."""
    lo, hi = _check_ranges(bins, *ranges)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape[-1] % d:
        raise DecodeError(f"token count {ids.shape[-1]} is not a multiple of d={d}")
    if np.any(ids < 0) or np.any(ids >= bins):
        raise DecodeError(f"bin index out of range [0, {bins})")
    idx = ids.reshape(ids.shape[:-1] + (-1, d))
    return lo + (idx + 0.5) * (hi - lo) / bins


@dataclass
class UniformBinTokenizer:
    bins: int
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo, self.hi = _check_ranges(self.bins, self.lo, self.hi)

    @classmethod
    def fit(cls, chunks, bins: int, margin: float = 1e-9):
        """Ranges from the data extent per dimension."""
        flat = np.asarray(chunks, dtype=np.float64).reshape(-1, np.shape(chunks)[-1])
        lo, hi = flat.min(axis=0), flat.max(axis=0)
        hi = np.where(hi - lo < margin, lo + max(margin, 1e-6), hi)
        return cls(bins, lo, hi)

    @property
    def d(self):
        return self.lo.shape[-1] if self.lo.ndim else 1

    def encode(self, chunk) -> np.ndarray:
        return uniform_bin_encode(chunk, self.bins, (self.lo, self.hi))

    def decode(self, ids) -> np.ndarray:
        return uniform_bin_decode(ids, self.bins, (self.lo, self.hi), self.d)

    def tokens_per_chunk(self, T: int) -> int:
        return T * self.d


# =============================================================================
# BYTE-PAIR ENCODING
# =============================================================================

def _merge_pair(seq: List[int], pair: Tuple[int, int], new_id: int) -> List[int]:
    out, i, n = [], 0, len(seq)
    a, b = pair
    while i < n:
        if i + 1 < n and seq[i] == a and seq[i + 1] == b:
            out.append(new_id)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def bpe_train(corpus: Iterable[Sequence[int]], n_merges: int, base_vocab: int) -> List[Tuple[int, int]]:
    """
    Greedy merge table: repeatedly merge the most frequent adjacent pair.
    Ties go to the smallest pair; training stops early once no pair repeats.
    """
    seqs = [list(s) for s in corpus]
    merges = []
    for i in range(n_merges):
        counts = Counter()
        for s in seqs:
            counts.update(zip(s, s[1:]))
        if not counts:
            break
        best_count = max(counts.values())
        if best_count < 2:
            break
        pair = min(p for p, c in counts.items() if c == best_count)
        new_id = base_vocab + i
        merges.append(pair)
        seqs = [_merge_pair(s, pair, new_id) if len(s) > 1 else s for s in seqs]
    logger.info(f"BPE trained {len(merges)} merges over {len(seqs)} sequences")
    return merges


def bpe_encode(seq: Sequence[int], merges: Sequence[Tuple[int, int]], base_vocab: int) -> List[int]:
    """Apply merges in training order (lowest-rank pair present first)."""
    ranks = {pair: r for r, pair in enumerate(merges)}
    seq = list(seq)
    while len(seq) > 1:
        present = [ranks[p] for p in zip(seq, seq[1:]) if p in ranks]
        if not present:
            break
        r = min(present)
        seq = _merge_pair(seq, merges[r], base_vocab + r)
    return seq


def bpe_decode(ids: Sequence[int], merges: Sequence[Tuple[int, int]], base_vocab: int) -> List[int]:
    vocab = base_vocab + len(merges)
    out = []
    stack = list(reversed([int(t) for t in ids]))
    while stack:
        t = stack.pop()
        if t < 0 or t >= vocab:
            raise DecodeError(f"unknown BPE token {t} (vocabulary size {vocab})")
        if t < base_vocab:
            out.append(t)
        else:
            a, b = merges[t - base_vocab]
            stack.append(b)
            stack.append(a)
    return out


# =============================================================================
# DCT + BPE
# =============================================================================

def dct_coefficients(chunk) -> np.ndarray:
    """Orthonormal DCT-II along time for every dimension: (T, d) -> (T, d)."""
    return dct(np.asarray(chunk, dtype=np.float64), type=2, norm="ortho", axis=-2)


@dataclass
class DctBpeTokenizer:
    T: int
    d: int
    dct_keep: int = 8
    quant_scale: float = 10.0
    clip: int = 255
    merges: List[Tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not 1 <= self.dct_keep <= self.T:
            raise ConfigError(f"dct_keep must be in [1, {self.T}], got {self.dct_keep}")
        if self.quant_scale <= 0:
            raise ConfigError("quant_scale must be > 0")
        self.merges = [tuple(p) for p in self.merges]

    @property
    def base_vocab(self) -> int:
        return 2 * self.clip + 1

    @property
    def vocab_size(self) -> int:
        return self.base_vocab + len(self.merges)

    def symbols(self, chunk) -> List[int]:
        """Quantized low-frequency coefficients, dimension-major, shifted to be >= 0."""
        chunk = np.asarray(chunk, dtype=np.float64)
        if chunk.shape != (self.T, self.d):
            raise DimensionError(f"expected chunk ({self.T}, {self.d}), got {chunk.shape}")
        coef = dct_coefficients(chunk)[: self.dct_keep]
        q = np.clip(np.rint(coef * self.quant_scale), -self.clip, self.clip).astype(np.int64)
        return (q.T.reshape(-1) + self.clip).tolist()

    def from_symbols(self, symbols: Sequence[int]) -> np.ndarray:
        if len(symbols) != self.dct_keep * self.d:
            raise DecodeError(f"expected {self.dct_keep * self.d} symbols, got {len(symbols)}")
        q = np.asarray(symbols, dtype=np.float64).reshape(self.d, self.dct_keep).T - self.clip
        coef = np.zeros((self.T, self.d))
        coef[: self.dct_keep] = q / self.quant_scale
        return idct(coef, type=2, norm="ortho", axis=0)

    def fit(self, chunks, n_merges: int = 256, max_corpus: int = 512):
        corpus = [self.symbols(c) for c in list(chunks)[:max_corpus]]
        self.merges = bpe_train(corpus, n_merges, self.base_vocab)
        return self

    def encode(self, chunk) -> List[int]:
        return bpe_encode(self.symbols(chunk), self.merges, self.base_vocab)

    def decode(self, ids) -> np.ndarray:
        return self.from_symbols(bpe_decode(ids, self.merges, self.base_vocab))


def dct_bpe_tokenize(chunk, dct_keep: int, quant_scale: float, merges, clip: int = 255) -> List[int]:
    chunk = np.asarray(chunk)
    tok = DctBpeTokenizer(chunk.shape[0], chunk.shape[1], dct_keep, quant_scale, clip, list(merges))
    return tok.encode(chunk)


def dct_bpe_detokenize(ids, T: int, d: int, dct_keep: int, quant_scale: float, merges, clip: int = 255) -> np.ndarray:
    return DctBpeTokenizer(T, d, dct_keep, quant_scale, clip, list(merges)).decode(ids)

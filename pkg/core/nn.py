"""
Layers and functional building blocks on top of core.tensor.

Functional ops (linear_forward, temporal_conv1d, gqa_attention, ...) validate
shapes and compose tensor primitives; Module subclasses own Parameters and
expose them in a deterministic order for optimizers and checkpoints.
"""

import logging
import math
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from core.errors import ConfigError, DimensionError
from core.tensor import (
    Tensor,
    add,
    concat,
    fold_time,
    gelu,
    matmul,
    reshape,
    softmax,
    swapaxes,
    take,
    transpose,
    unfold_time,
)

logger = logging.getLogger(__name__)

MASK_VALUE = -1e9


class Parameter(Tensor):
    """A trainable tensor."""

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Module:
    """Minimal container: parameters are discovered from attributes in definition order."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix="") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f"{prefix}{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise DimensionError(f"State mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"Shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.data = value.copy()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad = True
        return self


# =============================================================================
# FUNCTIONAL OPS
# =============================================================================

def linear_forward(x, W, b=None) -> Tensor:
    """out[..., o] = sum_i x[..., i] * W[i, o] + b[o]."""
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {W.shape[0]}")
    out = matmul(x, W)
    if b is not None:
        if b.shape != (W.shape[1],):
            raise DimensionError(f"linear: bias shape {b.shape} != ({W.shape[1]},)")
        out = add(out, b)
    return out


def conv_output_length(length: int, kernel: int, stride: int, pad: int) -> int:
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if length + 2 * pad < kernel:
        raise DimensionError(f"kernel {kernel} wider than padded input {length + 2 * pad}")
    return (length + 2 * pad - kernel) // stride + 1


def conv_transpose_output_length(length: int, kernel: int, stride: int, pad: int, output_padding=0) -> int:
    return (length - 1) * stride - 2 * pad + kernel + output_padding


def temporal_conv1d(x, kernel, bias=None, stride=1, pad=0) -> Tensor:
    """(B, T, C_in) * (k, C_in, C_out) -> (B, T', C_out) with symmetric zero padding."""
    k, c_in, c_out = kernel.shape
    if x.ndim != 3 or x.shape[-1] != c_in:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with kernel {kernel.shape}")
    out_len = conv_output_length(x.shape[1], k, stride, pad)
    cols = unfold_time(x, k, stride, pad, out_len)
    cols = reshape(cols, (x.shape[0], out_len, k * c_in))
    out = matmul(cols, reshape(kernel, (k * c_in, c_out)))
    return add(out, bias) if bias is not None else out


def temporal_conv_transpose1d(x, kernel, bias=None, stride=1, pad=0, output_padding=0) -> Tensor:
    """Adjoint-shaped conv: (B, T, C_in) -> (B, (T-1)*stride - 2*pad + k + output_padding, C_out)."""
    k, c_in, c_out = kernel.shape
    if x.ndim != 3 or x.shape[-1] != c_in:
        raise DimensionError(f"conv_transpose1d: input {x.shape} incompatible with kernel {kernel.shape}")
    if not 0 <= output_padding < max(stride, 1):
        raise ConfigError(f"output_padding must be in [0, stride), got {output_padding}")
    out_len = conv_transpose_output_length(x.shape[1], k, stride, pad, output_padding)
    if out_len < 1:
        raise DimensionError(f"conv_transpose1d: non-positive output length {out_len}")
    B, T, _ = x.shape
    w = reshape(transpose(kernel, (1, 0, 2)), (c_in, k * c_out))
    cols = reshape(matmul(x, w), (B, T, k, c_out))
    out = fold_time(cols, stride, pad, out_len)
    return add(out, bias) if bias is not None else out


def layer_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * (var + eps) ** -0.5 * gamma + beta


def kv_group_index(heads_q: int, heads_kv: int) -> np.ndarray:
    """Query head h attends to kv head floor(h * H_kv / H_q)."""
    if heads_kv < 1 or heads_q % heads_kv != 0:
        raise ConfigError(f"query heads {heads_q} not divisible by kv heads {heads_kv}")
    return (np.arange(heads_q) * heads_kv) // heads_q


def causal_mask(len_q: int, len_k: int) -> np.ndarray:
    """Additive mask; the last query aligns with the last key."""
    offset = len_k - len_q
    q_pos = np.arange(len_q)[:, None] + offset
    k_pos = np.arange(len_k)[None, :]
    return np.where(k_pos > q_pos, MASK_VALUE, 0.0)


def multi_head_attention(q, k, v, causal=False) -> Tensor:
    """Standard attention, all tensors (B, T, H, D) with equal head counts."""
    if not (q.shape[2] == k.shape[2] == v.shape[2]):
        raise ConfigError(f"head counts differ: {q.shape[2]}, {k.shape[2]}, {v.shape[2]}")
    if q.shape[-1] != k.shape[-1] or k.shape[:2] != v.shape[:2]:
        raise DimensionError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    head_dim = q.shape[-1]
    qh = transpose(q, (0, 2, 1, 3))
    kh = transpose(k, (0, 2, 1, 3))
    vh = transpose(v, (0, 2, 1, 3))
    scores = matmul(qh, swapaxes(kh, -1, -2)) * (1.0 / math.sqrt(head_dim))
    if causal:
        scores = scores + causal_mask(q.shape[1], k.shape[1])
    weights = softmax(scores, axis=-1)
    return transpose(matmul(weights, vh), (0, 2, 1, 3))


def gqa_attention(q, k, v, causal=False) -> Tensor:
    """Grouped-query attention: q (B,T,Hq,D), k/v (B,S,Hkv,D) -> (B,T,Hq,D)."""
    heads_q, heads_kv = q.shape[2], k.shape[2]
    if v.shape[2] != heads_kv:
        raise ConfigError(f"k and v head counts differ: {heads_kv} vs {v.shape[2]}")
    group = kv_group_index(heads_q, heads_kv)
    if heads_q != heads_kv:
        k = take(k, group, axis=2)
        v = take(v, group, axis=2)
    return multi_head_attention(q, k, v, causal=causal)


def sinusoidal_embedding(tau, dim: int, scale: float = 1000.0) -> np.ndarray:
    """(B,) times in [0, 1] -> (B, dim) fixed features."""
    tau = np.asarray(tau, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = tau[:, None] * scale * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((tau.shape[0], 1))], axis=-1)
    return emb


# =============================================================================
# MODULES
# =============================================================================

def _normal(rng, shape, std):
    return rng.standard_normal(shape) * std


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True, init_scale=1.0):
        self.weight = Parameter(_normal(rng, (in_dim, out_dim), init_scale / math.sqrt(in_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x):
        return linear_forward(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, pad=0):
        self.weight = Parameter(_normal(rng, (kernel, in_ch, out_ch), 1.0 / math.sqrt(kernel * in_ch)))
        self.bias = Parameter(np.zeros(out_ch))
        self.stride, self.pad = stride, pad

    def forward(self, x):
        return temporal_conv1d(x, self.weight, self.bias, self.stride, self.pad)


class ConvTranspose1d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, pad=0, output_padding=0):
        fan = kernel * in_ch / max(stride, 1)
        self.weight = Parameter(_normal(rng, (kernel, in_ch, out_ch), 1.0 / math.sqrt(fan)))
        self.bias = Parameter(np.zeros(out_ch))
        self.stride, self.pad, self.output_padding = stride, pad, output_padding

    def forward(self, x):
        return temporal_conv_transpose1d(x, self.weight, self.bias, self.stride, self.pad, self.output_padding)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, num, dim, rng, std=0.02):
        self.table = Parameter(_normal(rng, (num, dim), std))

    def forward(self, ids):
        return take(self.table, np.asarray(ids, dtype=np.int64), axis=0)


class MLP(Module):
    def __init__(self, dim, hidden, rng, out_dim=None):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim or dim, rng)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


class GQAttention(Module):
    """Projected grouped-query attention; self-attention or cross-attention to a source."""

    def __init__(self, dim, heads_q, heads_kv, rng, source_dim=None):
        if dim % heads_q:
            raise ConfigError(f"hidden size {dim} not divisible by {heads_q} query heads")
        kv_group_index(heads_q, heads_kv)
        self.heads_q, self.heads_kv = heads_q, heads_kv
        self.head_dim = dim // heads_q
        src = source_dim or dim
        self.wq = Linear(dim, heads_q * self.head_dim, rng, bias=False)
        self.wk = Linear(src, heads_kv * self.head_dim, rng, bias=False)
        self.wv = Linear(src, heads_kv * self.head_dim, rng, bias=False)
        self.wo = Linear(heads_q * self.head_dim, dim, rng, bias=False)

    def forward(self, x, source=None, causal=False, cache: Optional[dict] = None):
        B, T, _ = x.shape
        src = x if source is None else source
        q = reshape(self.wq(x), (B, T, self.heads_q, self.head_dim))
        k = reshape(self.wk(src), (B, src.shape[1], self.heads_kv, self.head_dim))
        v = reshape(self.wv(src), (B, src.shape[1], self.heads_kv, self.head_dim))
        if cache is not None:
            if "k" in cache:
                k = concat([cache["k"], k], axis=1)
                v = concat([cache["v"], v], axis=1)
            cache["k"], cache["v"] = k, v
        out = gqa_attention(q, k, v, causal=causal)
        return self.wo(reshape(out, (B, T, self.heads_q * self.head_dim)))

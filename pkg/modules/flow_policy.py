"""
Conditional flow-matching action expert.

A small GQA transformer predicts the velocity v(tau, A^tau, c) that carries
Gaussian noise to an action chunk. Training regresses it onto A - eps at
A^tau = (1 - tau) eps + tau A with logistic-normal tau; sampling integrates
the ODE with left-endpoint Euler steps on the grid {0, 1/S, ..., (S-1)/S}.

The condition c (a token sequence standing in for frozen backbone features)
is produced by ConditionEncoder once per decision step. Its tokens are split
into one group per expert layer; each layer cross-attends to its own group.
"""

import copy
import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import pandas as pd
from scipy.special import expit
from tqdm import tqdm

import calc
from core.errors import ConfigError, DimensionError, DivergenceError, NonFiniteError
from core.nn import MLP, Embedding, GQAttention, LayerNorm, Linear, Module, Parameter, sinusoidal_embedding
from core.optim import AdamW, constant_with_warmup
from core.tensor import Tape, Tensor, as_tensor, gelu, no_grad, reshape
from modules.batching import Sampler
from modules.datagen import ActionLayout, NormStats, TaskSpec, nearest_mode, stack_chunks
from modules.eval_bench import METRIC_COLUMNS, EvalReport, aggregate_error, chunk_metrics
from storage import load_checkpoint, prefixed, save_checkpoint, strip_prefix, write_csv

logger = logging.getLogger(__name__)

LOSS_LOG_COLUMNS = ["step", "loss", "smoothed_loss", "lr"]
VALIDATION_COLUMNS = ["step"] + METRIC_COLUMNS + ["aggregate"]

VelocityFn = Callable[[np.ndarray, Tensor, Tensor], Tensor]


@dataclass
class PolicyConfig:
    T_a: int = 32
    d: int = 14
    context_dim: int = 16
    n_instructions: int = 4
    layers: int = 4
    hidden: int = 128
    heads_q: int = 8
    heads_kv: int = 4
    cond_tokens: int = 8
    steps: int = 5
    mlp_ratio: int = 4
    time_scale: float = 1000.0

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.cond_tokens < self.layers or self.cond_tokens % self.layers:
            raise ConfigError(f"cond_tokens={self.cond_tokens} must split evenly over {self.layers} layers")
        if self.hidden % self.heads_q:
            raise ConfigError(f"hidden={self.hidden} not divisible by heads_q={self.heads_q}")
        if self.heads_kv < 1 or self.heads_q % self.heads_kv:
            raise ConfigError(f"heads_q={self.heads_q} not divisible by heads_kv={self.heads_kv}")
        if self.steps < 1:
            raise ConfigError(f"integration steps must be >= 1, got {self.steps}")

    @property
    def step_size(self) -> float:
        return 1.0 / self.steps

    @property
    def tokens_per_layer(self) -> int:
        return self.cond_tokens // self.layers

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_task(cls, task: TaskSpec, **overrides):
        return cls(T_a=task.T_a, d=task.d, context_dim=task.context_dim,
                   n_instructions=task.n_instructions, **overrides)


# =============================================================================
# NETWORKS
# =============================================================================

class ConditionEncoder(Module):
    """(context, instruction id) -> cond_tokens x hidden condition sequence."""

    def __init__(self, cfg: PolicyConfig, rng):
        self.cfg = cfg
        self.instruction = Embedding(cfg.n_instructions, cfg.hidden, rng)
        self.context_proj = Linear(cfg.context_dim, cfg.cond_tokens * cfg.hidden, rng)
        self.token_pos = Parameter(rng.standard_normal((cfg.cond_tokens, cfg.hidden)) * 0.02)
        self.norm = LayerNorm(cfg.hidden)

    def forward(self, context, instruction):
        ctx = as_tensor(context)
        if ctx.ndim != 2 or ctx.shape[1] != self.cfg.context_dim:
            raise DimensionError(f"expected context (B, {self.cfg.context_dim}), got {ctx.shape}")
        B = ctx.shape[0]
        instr = np.asarray(instruction, dtype=np.int64).reshape(-1)
        if instr.shape[0] != B:
            raise DimensionError(f"{instr.shape[0]} instruction ids for a batch of {B}")
        tokens = reshape(self.context_proj(ctx), (B, self.cfg.cond_tokens, self.cfg.hidden))
        lang = reshape(self.instruction(instr), (B, 1, self.cfg.hidden))
        return self.norm(gelu(tokens + lang + self.token_pos))


class ExpertBlock(Module):
    def __init__(self, cfg: PolicyConfig, rng):
        self.ln_self = LayerNorm(cfg.hidden)
        self.self_attn = GQAttention(cfg.hidden, cfg.heads_q, cfg.heads_kv, rng)
        self.ln_cross = LayerNorm(cfg.hidden)
        self.cross_attn = GQAttention(cfg.hidden, cfg.heads_q, cfg.heads_kv, rng, source_dim=cfg.hidden)
        self.ln_mlp = LayerNorm(cfg.hidden)
        self.mlp = MLP(cfg.hidden, cfg.mlp_ratio * cfg.hidden, rng)

    def forward(self, h, cond_group, time_emb):
        h = h + self.self_attn(self.ln_self(h))
        h = h + self.cross_attn(self.ln_cross(h), source=cond_group + time_emb)
        return h + self.mlp(self.ln_mlp(h))


class VelocityNet(Module):
    """v(tau, x, c): (B, T_a, d) -> (B, T_a, d)."""

    def __init__(self, cfg: PolicyConfig, rng):
        self.cfg = cfg
        self.in_proj = Linear(cfg.d, cfg.hidden, rng)
        self.pos = Parameter(rng.standard_normal((cfg.T_a, cfg.hidden)) * 0.02)
        self.time_fc1 = Linear(cfg.hidden, cfg.hidden, rng)
        self.time_fc2 = Linear(cfg.hidden, cfg.hidden, rng)
        self.blocks = [ExpertBlock(cfg, rng) for _ in range(cfg.layers)]
        self.ln_out = LayerNorm(cfg.hidden)
        self.out = Linear(cfg.hidden, cfg.d, rng, init_scale=0.1)

    def time_embedding(self, tau, batch: int):
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64).reshape(-1), (batch,))
        feats = sinusoidal_embedding(tau, self.cfg.hidden, self.cfg.time_scale)
        emb = self.time_fc2(gelu(self.time_fc1(as_tensor(feats))))
        return reshape(emb, (batch, 1, self.cfg.hidden))

    def forward(self, tau, x, cond):
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[1:] != (self.cfg.T_a, self.cfg.d):
            raise DimensionError(f"expected chunks (B, {self.cfg.T_a}, {self.cfg.d}), got {x.shape}")
        B = x.shape[0]
        if cond.shape != (B, self.cfg.cond_tokens, self.cfg.hidden):
            raise DimensionError(f"condition shape {cond.shape} != ({B}, {self.cfg.cond_tokens}, {self.cfg.hidden})")
        temb = self.time_embedding(tau, B)
        h = self.in_proj(x) + self.pos + temb
        g = self.cfg.tokens_per_layer
        for i, block in enumerate(self.blocks):
            h = block(h, cond[:, i * g:(i + 1) * g], temb)
        return self.out(self.ln_out(h))


class FlowPolicy(Module):
    """Condition encoder plus velocity network."""

    def __init__(self, cfg: PolicyConfig, rng):
        self.cfg = cfg
        self.encoder = ConditionEncoder(cfg, rng)
        self.velocity_net = VelocityNet(cfg, rng)

    @property
    def chunk_shape(self):
        return (self.cfg.T_a, self.cfg.d)

    def encode_condition(self, context, instruction) -> Tensor:
        return self.encoder(context, instruction)

    def velocity(self, tau, x, cond) -> Tensor:
        return self.velocity_net(tau, x, cond)

    def generate(self, context, instruction, steps: Optional[int] = None, rng=None, noise=None) -> np.ndarray:
        """Normalized action chunks; the condition is computed once per call."""
        with no_grad():
            cond = self.encode_condition(context, instruction)
        shape = (cond.shape[0],) + self.chunk_shape
        return euler_sample(self.velocity, cond, steps or self.cfg.steps, rng=rng, noise=noise, shape=shape)

    def clone(self) -> "FlowPolicy":
        return copy.deepcopy(self)

    def save(self, path, extra: Optional[dict] = None):
        meta = {"kind": "flow_policy", "config": asdict(self.cfg)}
        meta.update(extra or {})
        return save_checkpoint(path, prefixed(self.state_dict(), "model"), meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path)
        policy = cls(PolicyConfig.from_dict(meta["config"]), np.random.default_rng(0))
        policy.load_state_dict(strip_prefix(arrays, "model"))
        return policy


# =============================================================================
# FLOW MATCHING
# =============================================================================

def timestep_from_normal(g):
    """Logistic-normal map tau = sigmoid(g)."""
    return expit(np.asarray(g, dtype=np.float64))


def sample_timestep(rng, size=None):
    return timestep_from_normal(rng.standard_normal(size))


def interpolate(actions, noise, tau) -> np.ndarray:
    """A^tau = (1 - tau) eps + tau A, with tau broadcast per batch element."""
    actions = np.asarray(actions, dtype=np.float64)
    t = np.asarray(tau, dtype=np.float64).reshape((-1,) + (1,) * (actions.ndim - 1))
    return (1.0 - t) * noise + t * actions


def flow_matching_loss(actions, cond, velocity_fn: VelocityFn, rng=None, tau=None, noise=None) -> Tensor:
    """Mean over the batch of ||v(tau, A^tau, c) - (A - eps)||^2 summed over chunk elements."""
    actions = np.asarray(actions, dtype=np.float64)
    B = actions.shape[0]
    if tau is None:
        tau = sample_timestep(rng, B)
    if noise is None:
        noise = rng.standard_normal(actions.shape)
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64).reshape(-1), (B,))
    x_tau = interpolate(actions, noise, tau)
    v = as_tensor(velocity_fn(tau, Tensor(x_tau), cond))
    if v.shape != actions.shape:
        raise DimensionError(f"velocity shape {v.shape} != chunk shape {actions.shape}")
    err = v - (actions - noise)
    loss = (err * err).sum() * (1.0 / B)
    if not loss.is_finite():
        bad = np.nonzero(~np.isfinite(v.data).reshape(B, -1).all(axis=1))[0]
        raise NonFiniteError(f"Non-finite flow loss; samples {bad.tolist()} at tau {tau[bad].round(4).tolist()}",
                             name="flow_matching_loss")
    return loss


def euler_grid(steps: int) -> List[Fraction]:
    if steps < 1:
        raise ConfigError(f"integration steps must be >= 1, got {steps}")
    return [Fraction(k, steps) for k in range(steps)]


def euler_sample(velocity_fn: VelocityFn, cond, steps: int, rng=None, noise=None, shape=None) -> np.ndarray:
    """Integrate from A^0 (given noise, or drawn from rng) with S left-endpoint Euler steps."""
    if noise is None:
        if rng is None or shape is None:
            raise ConfigError("euler_sample needs either noise or rng and shape")
        noise = rng.standard_normal(shape)
    x = np.array(noise, dtype=np.float64)
    dt = 1.0 / steps
    with no_grad():
        for tau in euler_grid(steps):
            v = velocity_fn(np.full(x.shape[0], float(tau)), Tensor(x), cond)
            x = x + dt * as_tensor(v).data
    return x


# =============================================================================
# VALIDATION
# =============================================================================

@dataclass
class Validator:
    """Held-out chunks scored after full multi-step integration with fixed noise."""

    actions: np.ndarray          # denormalized ground truth
    context: np.ndarray
    instruction: np.ndarray
    norm: NormStats
    layout: ActionLayout
    steps: int = 5
    seed: int = 0

    def __post_init__(self):
        mean_chunk = np.broadcast_to(self.norm.mean, self.actions.shape)
        self.reference = chunk_metrics(mean_chunk, self.actions, self.layout)

    @classmethod
    def from_chunks(cls, chunks, norm, layout, steps=5, seed=0, limit: Optional[int] = None):
        arrays = stack_chunks(chunks[:limit] if limit else chunks)
        return cls(arrays["actions"], arrays["context"], arrays["instruction"], norm, layout, steps, seed)

    def evaluate(self, policy: FlowPolicy):
        noise = np.random.default_rng(self.seed).standard_normal(self.actions.shape)
        pred = self.norm.denormalize(policy.generate(self.context, self.instruction, self.steps, noise=noise))
        report = chunk_metrics(pred, self.actions, self.layout)
        return report, aggregate_error(report, self.reference)


def mode_coverage(policy: FlowPolicy, task: TaskSpec, norm: NormStats, context, instruction,
                  steps: Optional[int] = None, rng=None) -> np.ndarray:
    """Fraction of generated chunks whose nearest mode is each of task.modes."""
    rng = rng or np.random.default_rng(0)
    pred = norm.denormalize(policy.generate(context, instruction, steps, rng=rng))
    labels = nearest_mode(pred, task)
    return np.bincount(labels, minlength=len(task.modes)) / len(labels)


# =============================================================================
# TRAINING
# =============================================================================

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-4
    warmup_steps: int = 500
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    max_grad_norm: float = 1.0
    eval_every: int = 2500
    log_every: int = 100
    checkpoint_every: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 500
    smoothing: float = 0.99

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError(f"steps must be >= 0 and batch_size >= 1, got {self.steps}, {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainState:
    step: int = 0
    losses: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    initial_loss: Optional[float] = None
    above: int = 0
    best_aggregate: Optional[float] = None
    validation: List[dict] = field(default_factory=list)

    def loss_log(self, smoothing: float = 0.99) -> pd.DataFrame:
        losses = np.asarray(self.losses, dtype=np.float64)
        smoothed = calc.exponential_smoothing(losses, smoothing) if losses.size else losses
        return pd.DataFrame({"step": np.arange(1, losses.size + 1), "loss": losses,
                             "smoothed_loss": smoothed, "lr": np.asarray(self.lrs, dtype=np.float64)},
                            columns=LOSS_LOG_COLUMNS)

    def validation_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.validation, columns=VALIDATION_COLUMNS)


@dataclass
class TrainResult:
    loss_log: pd.DataFrame
    validation: pd.DataFrame
    state: TrainState


def make_optimizer(params, cfg: TrainConfig) -> AdamW:
    return AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay,
                 max_grad_norm=cfg.max_grad_norm, schedule=constant_with_warmup(cfg.lr, cfg.warmup_steps))


def save_training_checkpoint(path, policy: FlowPolicy, opt: AdamW, rng, state: TrainState, cfg: TrainConfig):
    """Everything needed to continue bitwise: weights, moments, generator state and history."""
    arrays = prefixed(policy.state_dict(), "model")
    arrays.update(prefixed(opt.state_dict(), "opt"))
    arrays["history.loss"] = np.asarray(state.losses, dtype=np.float64)
    arrays["history.lr"] = np.asarray(state.lrs, dtype=np.float64)
    meta = {
        "kind": "flow_policy", "config": asdict(policy.cfg), "train": asdict(cfg),
        "step": state.step, "opt_step": opt.state.step, "rng_state": rng.bit_generator.state,
        "initial_loss": state.initial_loss, "above": state.above,
        "best_aggregate": state.best_aggregate, "validation": state.validation,
    }
    return save_checkpoint(path, arrays, meta)


def restore_training_checkpoint(path, policy: FlowPolicy, opt: AdamW, rng) -> TrainState:
    arrays, meta = load_checkpoint(path)
    policy.load_state_dict(strip_prefix(arrays, "model"))
    opt.load_state_dict(strip_prefix(arrays, "opt"), meta.get("opt_step", meta["step"]))
    rng.bit_generator.state = meta["rng_state"]
    state = TrainState(step=int(meta["step"]), losses=arrays["history.loss"].tolist(),
                       lrs=arrays["history.lr"].tolist(), initial_loss=meta.get("initial_loss"),
                       above=int(meta.get("above", 0)), best_aggregate=meta.get("best_aggregate"),
                       validation=list(meta.get("validation", [])))
    logger.info(f"Resumed policy training from {path} at step {state.step}")
    return state


def flow_training_step(policy: FlowPolicy, batch: dict, rng, params) -> tuple:
    """Returns (loss tensor, gradients for params)."""
    with Tape() as tape:
        cond = policy.encode_condition(batch["context"], batch["instruction"])
        loss = flow_matching_loss(batch["actions"], cond, policy.velocity, rng)
    return loss, tape.backward(loss, params)


def _check_divergence(state: TrainState, loss: float, cfg: TrainConfig):
    if state.initial_loss is None:
        state.initial_loss = loss
    if loss > cfg.divergence_factor * state.initial_loss:
        state.above += 1
    else:
        state.above = 0
    if state.above >= cfg.divergence_patience:
        msg = (f"Loss {loss:.4g} above {cfg.divergence_factor}x initial {state.initial_loss:.4g} "
               f"for {state.above} consecutive steps")
        logger.error(msg)
        raise DivergenceError(msg)


def train_policy(policy: FlowPolicy, sampler: Sampler, cfg: TrainConfig, rng,
                 validator: Optional[Validator] = None, out_dir=None, resume_from=None,
                 progress: bool = False) -> TrainResult:
    """
    AdamW with constant LR after linear warm-up and global-norm clipping.

    Only parameters with requires_grad are updated, so a frozen condition
    encoder stays fixed. With out_dir set, writes loss_log.csv,
    validation.csv, policy.ckpt and policy_best.ckpt there.
    """
    params = [p for p in policy.parameters() if p.requires_grad]
    opt = make_optimizer(params, cfg)
    state = TrainState()
    if resume_from:
        state = restore_training_checkpoint(resume_from, policy, opt, rng)
        sampler.skip(state.step * cfg.batch_size)
    out_dir = Path(out_dir) if out_dir else None

    for step in tqdm(range(state.step + 1, cfg.steps + 1), desc="policy", disable=not progress):
        batch = sampler.sample(rng, cfg.batch_size)
        try:
            loss, grads = flow_training_step(policy, batch, rng, params)
            lr = opt.step(grads)
        except NonFiniteError as e:
            logger.error(f"Aborting policy training at step {step}: {e}")
            raise
        value = loss.item()
        state.step = step
        state.losses.append(value)
        state.lrs.append(lr)
        _check_divergence(state, value, cfg)

        if step % cfg.log_every == 0 or step == cfg.steps:
            logger.info(f"policy step {step}/{cfg.steps} loss {value:.5f} lr {lr:.2e} "
                        f"grad_norm {opt.last_grad_norm:.3f}")
        if validator is not None and cfg.eval_every and step % cfg.eval_every == 0:
            _validate(policy, validator, state, out_dir)
        if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_training_checkpoint(out_dir / f"policy_step{step:07d}.ckpt", policy, opt, rng, state, cfg)

    result = TrainResult(state.loss_log(cfg.smoothing), state.validation_frame(), state)
    if out_dir is not None:
        write_csv(result.loss_log, out_dir / "loss_log.csv")
        write_csv(result.validation, out_dir / "validation.csv")
        save_training_checkpoint(out_dir / "policy.ckpt", policy, opt, rng, state, cfg)
    return result


def _validate(policy: FlowPolicy, validator: Validator, state: TrainState, out_dir: Optional[Path]):
    report, agg = validator.evaluate(policy)
    state.validation.append({"step": state.step, **report.metrics(), "aggregate": agg})
    logger.info(f"validation step {state.step}: position_mse {report.position_mse:.3e} "
                f"rotation {report.rotation_geodesic_rad:.4f} rad aggregate {agg:.4f}")
    if state.best_aggregate is None or agg < state.best_aggregate:
        state.best_aggregate = agg
        if out_dir is not None:
            policy.save(out_dir / "policy_best.ckpt", {"step": state.step, "aggregate": agg})


def evaluate_policy(policy: FlowPolicy, validator: Validator) -> EvalReport:
    report, _ = validator.evaluate(policy)
    return report

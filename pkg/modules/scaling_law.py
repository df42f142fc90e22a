"""
Parametric loss surface L(N, D) = E + A / N^alpha + B / D^beta.

Fitting minimises a Huber loss on log residuals. Each start of a fixed
(alpha, beta) grid gets (E, A, B) in closed form by non-negative least
squares, then all five parameters are refined with a trust-region
Gauss-Newton solver. The start with the lowest final objective wins.

The sweep protocol trains models of several sizes for a single pass over
the shards and records (N, D, loss) at fixed step intervals.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.optimize import least_squares, nnls
from tabulate import tabulate

import calc
from core.errors import ConfigError, UnderdeterminedError
from core.optim import AdamW, constant_with_warmup
from modules.datagen import NormStats, record_to_chunk, stack_chunks
from modules.flow_policy import FlowPolicy, flow_training_step
from modules.shards import epoch_once

logger = logging.getLogger(__name__)

POINT_COLUMNS = ["N", "D", "loss"]
ISO_COLUMNS = ["N", "target_loss", "D_required"]

HUBER_DELTA = 1e-3
ALPHA_GRID = (0.1, 0.2, 0.35, 0.5, 0.8, 1.2)
BETA_GRID = (0.1, 0.2, 0.35, 0.5, 0.8, 1.2)
EXPONENT_BOUNDS = (1e-3, 2.0)
LOG_COEF_FLOOR = -60.0


@dataclass
class ScalingFit:
    E: float
    A: float
    alpha: float
    B: float
    beta: float
    rmse: float = 0.0
    objective: float = 0.0
    converged: bool = True
    smoothed: bool = False
    n_points: int = 0
    residuals: List[float] = field(default_factory=list)

    def predict(self, N, D):
        return predict_loss(self, N, D)

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        rows = [["E", self.E], ["A", self.A], ["alpha", self.alpha], ["B", self.B], ["beta", self.beta],
                ["rmse", self.rmse], ["huber objective", self.objective], ["points", self.n_points],
                ["converged", self.converged], ["smoothed input", self.smoothed]]
        return tabulate(rows, headers=["parameter", "value"], tablefmt="github", floatfmt=".6g")


def predict_loss(fit, N, D):
    """E + A/N^alpha + B/D^beta; N and D may be arrays or +inf."""
    N = np.asarray(N, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    if np.any(N <= 0) or np.any(D <= 0):
        raise ConfigError("N and D must be > 0")
    out = fit.E + fit.A / N ** fit.alpha + fit.B / D ** fit.beta
    return float(out) if out.ndim == 0 else out


def huber(residuals, delta: float = HUBER_DELTA) -> np.ndarray:
    a = np.abs(residuals)
    return np.where(a <= delta, 0.5 * residuals ** 2, delta * (a - 0.5 * delta))


def _validate_points(N, D, L):
    N, D, L = (np.asarray(v, dtype=np.float64).reshape(-1) for v in (N, D, L))
    if not (N.shape == D.shape == L.shape):
        raise ConfigError("N, D and loss must have the same length")
    if np.any(N <= 0) or np.any(D <= 0) or not np.all(np.isfinite(L)) or np.any(L <= 0):
        raise ConfigError("scaling points need N > 0, D > 0 and finite positive loss")
    if N.size < 5:
        raise UnderdeterminedError(f"need at least 5 points, got {N.size}")
    if np.unique(N).size < 2:
        raise UnderdeterminedError(f"need at least 2 distinct model sizes, got {np.unique(N).size}")
    return N, D, L


def _closed_form_coefficients(N, D, L, alpha, beta):
    """(E, A, B) >= 0 for fixed exponents, least squares weighted by 1/L (first-order log residuals)."""
    X = np.stack([np.ones_like(N), N ** -alpha, D ** -beta], axis=1) / L[:, None]
    coef, _ = nnls(X, np.ones_like(L))
    return coef


def _pack(E, A, alpha, B, beta):
    return np.array([E, np.log(max(A, np.exp(LOG_COEF_FLOOR))), alpha, np.log(max(B, np.exp(LOG_COEF_FLOOR))), beta])


def _log_residuals(theta, N, D, logL):
    E, logA, alpha, logB, beta = theta
    pred = E + np.exp(logA - alpha * np.log(N)) + np.exp(logB - beta * np.log(D))
    return np.log(np.maximum(pred, 1e-300)) - logL


def fit_scaling_law(N, D, L, alpha_grid: Sequence[float] = ALPHA_GRID, beta_grid: Sequence[float] = BETA_GRID,
                    delta: float = HUBER_DELTA, smoothed: bool = False, max_nfev: int = 5000) -> ScalingFit:
    """Multi-start Huber-on-log fit; the result is deterministic given the grids."""
    N, D, L = _validate_points(N, D, L)
    logL = np.log(L)
    lo = [0.0, LOG_COEF_FLOOR, EXPONENT_BOUNDS[0], LOG_COEF_FLOOR, EXPONENT_BOUNDS[0]]
    hi = [np.inf, np.inf, EXPONENT_BOUNDS[1], np.inf, EXPONENT_BOUNDS[1]]

    best = None
    for alpha in alpha_grid:
        for beta in beta_grid:
            E, A, B = _closed_form_coefficients(N, D, L, alpha, beta)
            x0 = np.clip(_pack(E, A, alpha, B, beta), lo, hi)
            res = least_squares(_log_residuals, x0, args=(N, D, logL), method="trf", loss="huber",
                                f_scale=delta, bounds=(lo, hi), x_scale="jac",
                                xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=max_nfev)
            if best is None or res.cost < best.cost:
                best = res

    E, logA, alpha, logB, beta = best.x
    A, B = float(np.exp(logA)), float(np.exp(logB))
    if logB <= LOG_COEF_FLOOR + 1e-9:
        B = 0.0
    if logA <= LOG_COEF_FLOOR + 1e-9:
        A = 0.0
    fit = ScalingFit(E=float(E), A=A, alpha=float(alpha), B=B, beta=float(beta),
                     converged=bool(best.status > 0), smoothed=smoothed, n_points=int(N.size))
    resid = L - predict_loss(fit, N, D)
    fit.residuals = resid.tolist()
    fit.rmse = float(np.sqrt(np.mean(resid ** 2)))
    fit.objective = float(np.sum(huber(_log_residuals(best.x, N, D, logL), delta)))
    if not fit.converged:
        logger.warning(f"Scaling-law fit did not converge ({best.message}); returning best-so-far")
    logger.info(f"Scaling fit E={fit.E:.4f} A={fit.A:.4g} alpha={fit.alpha:.4f} "
                f"B={fit.B:.4g} beta={fit.beta:.4f} rmse={fit.rmse:.3g}")
    return fit


def fit_points(points: pd.DataFrame, smoothed: bool = False, **kwargs) -> ScalingFit:
    return fit_scaling_law(points["N"], points["D"], points["loss"], smoothed=smoothed, **kwargs)


def smooth_points(points: pd.DataFrame, factor: float = 0.99) -> pd.DataFrame:
    """Exponential smoothing of each model size's loss series, ordered by D."""
    parts = []
    for _, grp in points.sort_values(["N", "D"]).groupby("N", sort=True):
        grp = grp.copy()
        grp["loss"] = calc.exponential_smoothing(grp["loss"].to_numpy(), factor)
        parts.append(grp)
    return pd.concat(parts, ignore_index=True)[POINT_COLUMNS]


def iso_loss_table(fit: ScalingFit, sizes: Sequence[float], targets: Sequence[float]) -> pd.DataFrame:
    """Tokens needed to reach each target loss per model size; inf when the target is unreachable."""
    rows = []
    for n in sizes:
        floor = fit.E + fit.A / float(n) ** fit.alpha
        for target in targets:
            gap = target - floor
            if gap <= 0:
                d_req = np.inf
            elif fit.B == 0.0:
                d_req = 0.0
            else:
                d_req = (fit.B / gap) ** (1.0 / fit.beta)
            rows.append({"N": float(n), "target_loss": float(target), "D_required": float(d_req)})
    return pd.DataFrame(rows, columns=ISO_COLUMNS)


# =============================================================================
# SWEEP PROTOCOL
# =============================================================================

def epoch_batches(shards: Sequence, seed, batch_size: int, norm: NormStats) -> Iterator[dict]:
    """Normalized minibatches from one non-repeating pass; a trailing partial batch is dropped."""
    buf = []
    for record in epoch_once(shards, seed):
        buf.append(record_to_chunk(record))
        if len(buf) == batch_size:
            arrays = stack_chunks(buf)
            yield {"actions": norm.normalize(arrays["actions"]), "context": arrays["context"],
                   "instruction": arrays["instruction"]}
            buf = []


class FlowSweepMember:
    """Training callback for one model size: call with a batch, get the flow loss."""

    def __init__(self, policy: FlowPolicy, rng, lr: float = 1e-4, warmup_steps: int = 100):
        self.policy = policy
        self.rng = rng
        self.params = policy.parameters()
        self.opt = AdamW(self.params, lr=lr, schedule=constant_with_warmup(lr, warmup_steps))

    @property
    def n_parameters(self) -> int:
        return self.policy.num_parameters()

    def __call__(self, batch: dict) -> float:
        loss, grads = flow_training_step(self.policy, batch, self.rng, self.params)
        self.opt.step(grads)
        return loss.item()


def sweep_protocol(members: Sequence, batches: Callable[[], Iterator[dict]], batch_size: int,
                   tokens_per_sample: int, checkpoint_every: int) -> pd.DataFrame:
    """
    Train every member for one pass of batches(), logging at each checkpoint
    the mean loss since the previous checkpoint with D = k * batch_size *
    tokens_per_sample after k steps.
    """
    if checkpoint_every < 1:
        raise ConfigError(f"checkpoint_every must be >= 1, got {checkpoint_every}")
    rows = []
    for member in members:
        window = []
        step = 0
        for batch in batches():
            window.append(member(batch))
            step += 1
            if step % checkpoint_every == 0:
                rows.append({"N": float(member.n_parameters), "D": float(step * batch_size * tokens_per_sample),
                             "loss": float(np.mean(window))})
                window = []
        logger.info(f"Sweep member N={member.n_parameters}: {step} steps, {step * batch_size} samples")
    return pd.DataFrame(rows, columns=POINT_COLUMNS)


def size_ordering_violations(points: pd.DataFrame, tolerance: float = 0.0) -> int:
    """Count matched-D pairs of adjacent sizes where the larger model has higher loss beyond tolerance."""
    table = points.pivot_table(index="D", columns="N", values="loss")
    sizes = sorted(table.columns)
    count = 0
    for small, large in zip(sizes, sizes[1:]):
        diff = table[large] - table[small]
        count += int((diff > tolerance).sum())
    return count

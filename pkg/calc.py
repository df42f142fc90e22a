import logging

import numpy as np
from scipy import stats

from core.errors import ConfigError

logger = logging.getLogger(__name__)

BIMODAL_THRESHOLD = 5.0 / 9.0


def exponential_smoothing(values, factor=0.99, debias=True):
    """
    Exponential moving average of a loss series.
    With debias, the zero-initialised average is divided by (1 - factor^k),
    so the first smoothed value equals the first raw value.
    """
    if not 0.0 <= factor < 1.0:
        raise ConfigError(f"smoothing factor must be in [0, 1), got {factor}")
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    out = np.empty_like(x)
    acc = 0.0
    for k, v in enumerate(x, start=1):
        acc = factor * acc + (1.0 - factor) * v
        out[k - 1] = acc / (1.0 - factor ** k) if debias else acc
    return out


def standard_error(p_hat, n):
    """Binomial standard error sqrt(p(1-p)/n)."""
    p_hat = np.asarray(p_hat, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.sqrt(np.clip(p_hat * (1.0 - p_hat), 0.0, None) / n)


def running_success_rate(trials):
    """Running (p_hat_k, se_k) for k = 1..n over the last axis."""
    t = np.asarray(trials, dtype=np.float64)
    k = np.arange(1, t.shape[-1] + 1)
    p_hat = np.cumsum(t, axis=-1) / k
    return p_hat, standard_error(p_hat, k)


def se_band_coverage(trials, z=2.0):
    """
    Fraction of k whose band p_hat_k +/- z*se_k contains the final estimate p_hat_n.
    Works on one series (n,) or a batch of replications (R, n).
    """
    p_hat, se = running_success_rate(trials)
    final = p_hat[..., -1:]
    inside = np.abs(final - p_hat) <= z * se + 1e-12
    return inside.mean(axis=-1)


def simulate_se_coverage(p_star, n_trials, n_reps, rng, z=2.0):
    """Monte Carlo study: mean band coverage over Bernoulli(p_star) replications."""
    trials = (rng.random((n_reps, n_trials)) < p_star).astype(np.float64)
    cov = se_band_coverage(trials, z)
    logger.info(f"SE band coverage p*={p_star} n={n_trials}: mean {cov.mean():.4f} over {n_reps} reps")
    return float(cov.mean())


def bimodality_coefficient(values):
    """Sarle's coefficient from sample skewness and excess kurtosis; > 5/9 hints at bimodality."""
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    n = x.size
    if n < 4:
        raise ConfigError("bimodality coefficient needs at least 4 samples")
    g = stats.skew(x, bias=False)
    k = stats.kurtosis(x, fisher=True, bias=False)
    return float((g * g + 1.0) / (k + 3.0 * (n - 1) ** 2 / ((n - 2) * (n - 3))))


def linear_fit(x, y):
    """Least-squares line; returns (slope, intercept, r_squared)."""
    res = stats.linregress(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    return float(res.slope), float(res.intercept), float(res.rvalue ** 2)


def loglog_interpolate(x_query, xs, ys):
    """Interpolate y at x_query on log-log axes; xs need not be sorted. NaN outside the range."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    keep = (xs > 0) & (ys > 0)
    xs, ys = xs[keep], ys[keep]
    if xs.size == 0:
        return np.nan
    order = np.argsort(xs)
    lx, ly = np.log(xs[order]), np.log(ys[order])
    q = np.log(x_query)
    if q < lx[0] - 1e-12 or q > lx[-1] + 1e-12:
        return np.nan
    return float(np.exp(np.interp(q, lx, ly)))

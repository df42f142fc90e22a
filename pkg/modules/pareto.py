"""
Error-versus-token-budget sweep across tokenizer families.

Every family is swept over its own budget knob: RVQ depth, uniform bin count,
and (DCT coefficients kept, quantization scale) for DCT+BPE. Errors are
measured in denormalized units on a held-out set.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import calc
from modules.baselines import DctBpeTokenizer, UniformBinTokenizer
from modules.datagen import ActionLayout, NormStats
from modules.eval_bench import chunk_metrics
from modules.rvq import RvqTokenizer

logger = logging.getLogger(__name__)

PARETO_COLUMNS = ["tokenizer", "budget", "tokens_per_chunk", "pos_mse", "rot_geodesic_rad", "grip_mse"]
DEFAULT_ORDER = ("rvq", "dct_bpe", "uniform")


def _row(family, budget, tokens, recon, gt, layout):
    rep = chunk_metrics(recon, gt, layout)
    return {"tokenizer": family, "budget": str(budget), "tokens_per_chunk": float(tokens),
            "pos_mse": rep.position_mse, "rot_geodesic_rad": rep.rotation_geodesic_rad,
            "grip_mse": rep.gripper_mse}


def sweep_rvq(tok: RvqTokenizer, eval_norm: np.ndarray, norm: NormStats, layout: ActionLayout,
              depths: Optional[Sequence[int]] = None) -> List[dict]:
    gt = norm.denormalize(eval_norm)
    rows = []
    for depth in depths or range(1, tok.cfg.m + 1):
        tokens = tok.tokenize(eval_norm, depth=depth)
        recon = norm.denormalize(tok.dequantize(tokens))
        rows.append(_row("rvq", f"depth{depth}", tokens.shape[-1], recon, gt, layout))
    return rows


def sweep_uniform(train_raw: np.ndarray, eval_raw: np.ndarray, layout: ActionLayout,
                  bins_list: Sequence[int]) -> List[dict]:
    rows = []
    for bins in bins_list:
        tok = UniformBinTokenizer.fit(train_raw, bins)
        ids = tok.encode(eval_raw)
        rows.append(_row("uniform", f"bins{bins}", ids.shape[-1], tok.decode(ids), eval_raw, layout))
    return rows


def sweep_dct_bpe(train_norm: np.ndarray, eval_norm: np.ndarray, norm: NormStats, layout: ActionLayout,
                  grid: Sequence[Tuple[int, float]], n_merges: int = 256) -> List[dict]:
    T, d = eval_norm.shape[1:]
    gt = norm.denormalize(eval_norm)
    rows = []
    for keep, scale in grid:
        tok = DctBpeTokenizer(T, d, dct_keep=int(keep), quant_scale=float(scale)).fit(train_norm, n_merges)
        encoded = [tok.encode(c) for c in eval_norm]
        recon = norm.denormalize(np.stack([tok.decode(ids) for ids in encoded]))
        mean_tokens = float(np.mean([len(ids) for ids in encoded]))
        rows.append(_row("dct_bpe", f"k{keep}_q{scale:g}", mean_tokens, recon, gt, layout))
    return rows


def pareto_sweep(tok: RvqTokenizer, train_norm: np.ndarray, eval_norm: np.ndarray, norm: NormStats,
                 layout: ActionLayout, bins_list=(4, 8, 16, 32, 64, 256),
                 dct_grid=((2, 2.0), (4, 4.0), (6, 8.0), (8, 16.0), (12, 32.0), (16, 64.0)),
                 n_merges: int = 256) -> pd.DataFrame:
    """One row per (family, budget) in the tokenizer_pareto CSV schema."""
    rows = sweep_rvq(tok, eval_norm, norm, layout)
    rows += sweep_uniform(norm.denormalize(train_norm), norm.denormalize(eval_norm), layout, bins_list)
    rows += sweep_dct_bpe(train_norm, eval_norm, norm, layout, dct_grid, n_merges)
    df = pd.DataFrame(rows, columns=PARETO_COLUMNS)
    logger.info(f"Pareto sweep: {len(df)} points over {df['tokenizer'].nunique()} tokenizers")
    return df


def frontier(df: pd.DataFrame, family: str) -> pd.DataFrame:
    """Pareto-optimal points of one family: error strictly improves as tokens grow."""
    grp = df[df["tokenizer"] == family].sort_values(["tokens_per_chunk", "pos_mse"])
    keep, best = [], np.inf
    for idx, row in grp.iterrows():
        if row["pos_mse"] < best:
            keep.append(idx)
            best = row["pos_mse"]
    return grp.loc[keep]


def _tokens_at(front: pd.DataFrame, target: float) -> float:
    """Fewest tokens reaching target error, interpolated on log-log axes along the frontier."""
    errs = front["pos_mse"].to_numpy()
    toks = front["tokens_per_chunk"].to_numpy()
    if errs.size == 0 or target < errs.min():
        return np.nan
    if target >= errs.max():
        return float(toks[np.argmax(errs)])
    return calc.loglog_interpolate(target, errs, toks)


def matched_error_tokens(df: pd.DataFrame, targets: Optional[Sequence[float]] = None, n_targets: int = 5,
                         families: Sequence[str] = DEFAULT_ORDER) -> pd.DataFrame:
    """
    Token count each family needs at common position-error targets.
    Default targets are log-spaced over the error range every family reaches.
    """
    fronts = {f: frontier(df, f) for f in families}
    if targets is None:
        lo = max(fr["pos_mse"].min() for fr in fronts.values())
        hi = min(fr["pos_mse"].max() for fr in fronts.values())
        if not hi > lo:
            hi = max(fr["pos_mse"].max() for fr in fronts.values())
        targets = np.geomspace(lo, hi, n_targets)
    rows = []
    for target in targets:
        row = {"target_pos_mse": float(target)}
        row.update({f: _tokens_at(fronts[f], float(target)) for f in families})
        rows.append(row)
    return pd.DataFrame(rows, columns=["target_pos_mse"] + list(families))


def ordering_holds(matched: pd.DataFrame, order: Sequence[str] = DEFAULT_ORDER) -> int:
    """Number of matched-error rows where token counts strictly increase along order."""
    count = 0
    for _, row in matched.iterrows():
        vals = [row[f] for f in order]
        if all(np.isfinite(vals)) and all(a < b for a, b in zip(vals, vals[1:])):
            count += 1
    return count

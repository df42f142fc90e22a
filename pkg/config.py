"""
Run configuration: built-in defaults <- YAML file <- --set overrides <- --seed.

Every command snapshots the merged result as resolved_config.yaml next to
its outputs, so a run can be repeated from the snapshot alone.
"""

import copy
import logging
import os
from pathlib import Path
from typing import Iterable, Optional

import yaml

from core.errors import ConfigError, MissingArtifactError
from storage import read_yaml, write_yaml

logger = logging.getLogger(__name__)

OUT_ENV_VAR = "CHUNKFLOW_OUT"
DEFAULT_OUT = "runs"

DEFAULT_CONFIG = {
    "seed": 0,
    "task": {
        "d": 14,
        "T_a": 32,
        "context_dim": 16,
        "n_instructions": 4,
        "context_noise": 0.05,
        "mode_in_context": False,
        "context_seed": 1234,
        "modes": None,
    },
    "data": {
        "n_train": 4096,
        "n_val": 512,
        "shard_size": 256,
        "prefetch": 64,
        "train_mix": "train=1",
    },
    "tokenizer": {
        "model": {
            "n": 8, "C": 64, "m": 4, "K": 256, "beta": 0.25, "distance": "euclidean", "hidden": 64,
            "ema": True, "ema_decay": 0.99, "codebook_grad": False, "restart": True,
            "restart_period": 500, "restart_threshold": 1, "init": "batch", "vocab_offset": 0,
        },
        "train": {"steps": 2000, "batch_size": 64, "lr": 1e-3, "warmup_steps": 1000, "log_every": 100},
    },
    "pareto": {
        "enabled": True,
        "n_eval": 256,
        "bins": [4, 8, 16, 32, 64, 256],
        "dct_grid": [[2, 2.0], [4, 4.0], [6, 8.0], [8, 16.0], [12, 32.0], [16, 64.0]],
        "n_merges": 256,
    },
    "policy": {
        "layers": 4, "hidden": 128, "heads_q": 8, "heads_kv": 4, "cond_tokens": 8,
        "steps": 5, "mlp_ratio": 4, "time_scale": 1000.0,
    },
    "train": {
        "steps": 2000, "batch_size": 32, "lr": 1e-4, "warmup_steps": 500, "weight_decay": 1e-2,
        "max_grad_norm": 1.0, "eval_every": 2500, "log_every": 100, "checkpoint_every": 0,
        "divergence_factor": 10.0, "divergence_patience": 500, "smoothing": 0.99, "n_val": 256,
    },
    "distill": {
        "steps": 2000, "batch_size": 32, "lr": 1e-4, "warmup_steps": 500, "weight_decay": 1e-2,
        "max_grad_norm": 1.0, "teacher_steps": 5, "log_every": 100,
    },
    "hybrid": {
        "pretrain_steps": 1000, "flow_steps": 1000, "batch_size": 32, "lr": 1e-4, "head_lr": 1e-3,
        "head_layers": 2, "smoothing": 0.99, "n_seeds": 3,
    },
    "scaling": {
        "hidden_sizes": [16, 32, 64, 128],
        "layers": 2,
        "heads_q": 4,
        "heads_kv": 2,
        "batch_size": 16,
        "checkpoint_every": 16,
        "lr": 1e-3,
        "warmup_steps": 20,
        "smooth": False,
        "iso_targets": [],
    },
    "bench": {"n_chunks": 200, "warmup": 10, "ar_depths": [1, 2, 3, 4], "ar_chunks": 50},
    "eval": {"n_samples": 256, "success_tol": 0.03},
}


def resolve_out(out: Optional[str] = None) -> Path:
    """--out, else the CHUNKFLOW_OUT environment variable, else ./runs."""
    return Path(out or os.environ.get(OUT_ENV_VAR) or DEFAULT_OUT)


def _merge(base: dict, update: dict, where: str = ""):
    for key, value in update.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"Unknown config key '{path}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"Config key '{path}' is a section, got {type(value).__name__}")
            _merge(base[key], value, path + ".")
        elif isinstance(base[key], float) and isinstance(value, (str, int)) and not isinstance(value, bool):
            try:
                base[key] = float(value)
            except ValueError:
                raise ConfigError(f"Config key '{path}' expects a number, got '{value}'")
        else:
            base[key] = value


def parse_override(text: str) -> dict:
    """'train.lr=3e-4' -> {'train': {'lr': 0.0003}}; values parsed as YAML scalars."""
    if "=" not in text:
        raise ConfigError(f"Override '{text}' is not of the form section.key=value")
    key, raw = text.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"Override '{text}' has an empty key")
    value = yaml.safe_load(raw) if raw.strip() else ""
    if isinstance(value, str):
        try:
            value = float(value)
        except ValueError:
            pass
    out = value
    for part in reversed(parts):
        out = {part: out}
    return out


def load_run_config(path=None, overrides: Iterable[str] = (), seed: Optional[int] = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError([path])
        loaded = read_yaml(path) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"Config file {path} must hold a mapping")
        _merge(cfg, loaded)
        logger.info(f"Loaded config {path}")
    for text in overrides or ():
        _merge(cfg, parse_override(text))
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def save_resolved(cfg: dict, out_dir) -> Path:
    return write_yaml(cfg, Path(out_dir) / "resolved_config.yaml")

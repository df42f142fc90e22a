import logging
import os
import platform
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import scipy

from storage import write_yaml

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def setup_logging(level="INFO", log_file: Optional[str] = None):
    """Configure the root logger once per process; optionally mirror into a file."""
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO), format=LOG_FORMAT,
                        handlers=handlers, force=True)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator per (seed, stream...) path."""
    return np.random.default_rng([int(seed), *[int(s) for s in stream]])


def ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_run_meta(out_dir, command: str, seed: int, argv=None) -> Path:
    """Versions and thread settings that affect reproducibility of a run."""
    meta = {
        "command": command,
        "argv": list(argv or []),
        "seed": int(seed),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "threads": {k: os.environ.get(k, "") for k in THREAD_ENV_VARS},
    }
    return write_yaml(meta, Path(out_dir) / "run_meta.yaml")

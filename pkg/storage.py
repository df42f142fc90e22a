"""
Persistence layer: checkpoint container, CSV artifacts and YAML sidecars.

Checkpoint layout (byte-stable for identical contents):
    line 1   magic + version, e.g. "CHUNKFLOW-CKPT 1"
    line 2   JSON manifest with sorted keys: tensors [{name, shape, dtype,
             offset, nbytes}] and free-form metadata
    rest     raw little-endian tensor blobs, in manifest order
"""

import json
import logging
import os
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
import yaml

from core.errors import ChunkFlowError, MissingArtifactError

logger = logging.getLogger(__name__)

CKPT_MAGIC = "CHUNKFLOW-CKPT"
CKPT_VERSION = 1
CSV_FLOAT_FORMAT = "%.10g"


class CheckpointError(ChunkFlowError):
    """Checkpoint file is malformed or of an unsupported version."""


# --- CHECKPOINTS ---

def _le_dtype(arr: np.ndarray) -> np.dtype:
    return arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype


def encode_checkpoint(arrays: Dict[str, np.ndarray], metadata: Optional[dict] = None) -> bytes:
    """Serialize named arrays plus metadata; sorted names keep the bytes deterministic."""
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        arr = arr.astype(_le_dtype(arr), copy=False)
        blob = arr.tobytes(order="C")
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    manifest = {"version": CKPT_VERSION, "tensors": entries, "metadata": metadata or {}}
    header = f"{CKPT_MAGIC} {CKPT_VERSION}\n".encode("ascii")
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    return header + body + b"".join(blobs)


def decode_checkpoint(raw: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    try:
        first, rest = raw.split(b"\n", 1)
        magic, version = first.decode("ascii").split()
        manifest_line, payload = rest.split(b"\n", 1)
        manifest = json.loads(manifest_line.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"Malformed checkpoint header: {e}")
    if magic != CKPT_MAGIC or int(version) != CKPT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint format '{magic} {version}'")

    arrays = {}
    for entry in manifest["tensors"]:
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(payload):
            raise CheckpointError(f"Truncated checkpoint: tensor '{entry['name']}' ends past EOF")
        arr = np.frombuffer(payload[start:stop], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(arr.dtype.newbyteorder("="))
    return arrays, manifest.get("metadata", {})


def save_checkpoint(path, arrays: Dict[str, np.ndarray], metadata: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = encode_checkpoint(arrays, metadata)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(raw)
    os.replace(tmp, path)
    logger.info(f"Saved checkpoint {path} ({len(arrays)} tensors, {len(raw)} bytes)")
    return path


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError([path])
    return decode_checkpoint(path.read_bytes())


def prefixed(arrays: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in arrays.items()}


def strip_prefix(arrays: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    head = prefix + "."
    return {k[len(head):]: v for k, v in arrays.items() if k.startswith(head)}


# --- CSV ARTIFACTS ---

def write_csv(df: pd.DataFrame, path) -> Path:
    """Write a DataFrame artifact with the fixed float format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Wrote {path} ({len(df)} rows)")
    return path


def read_csv(path, required_columns=None) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError([path])
    df = pd.read_csv(path)
    if required_columns:
        missing = [c for c in required_columns if c not in df.columns]
        if missing:
            raise CheckpointError(f"{path} lacks columns {missing}")
    return df


# --- YAML SIDECARS ---

def _plain(value):
    """numpy scalars/arrays -> builtin types so safe_dump accepts them."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    return value


def write_yaml(data: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(_plain(data), fh, sort_keys=True, default_flow_style=False)
    return path


def read_yaml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError([path])
    with open(path, "r", encoding="utf-8") as fh:
        return yaml.safe_load(fh) or {}

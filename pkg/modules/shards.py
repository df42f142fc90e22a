"""
POSIX tar shard pipeline.

Samples are groups of tar entries sharing a key prefix ("<key>.<suffix>").
Shards are plain ustar archives with zeroed ownership and timestamps, so the
bytes depend only on the records written. Readers stream shards sequentially;
Resample draws shards with replacement forever, epoch_once visits every
record once, and RandomMix blends sources by weight on the consumer side.
"""

import io
import logging
import queue
import tarfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence

import numpy as np
import pandas as pd

from core.errors import ConfigError, DecodeError, ShardError

logger = logging.getLogger(__name__)

PREFETCH_DEFAULT = 64
SHARD_PATTERN = "shard-{:06d}.tar"


# =============================================================================
# PAYLOAD ENCODING
# =============================================================================

def encode_array(arr) -> bytes:
    """One text header line 'shape=a,b dtype=<f8' followed by raw little-endian bytes."""
    arr = np.ascontiguousarray(arr)
    dtype = arr.dtype if arr.dtype.byteorder == "|" else arr.dtype.newbyteorder("<")
    shape = ",".join(str(n) for n in arr.shape)
    header = f"shape={shape} dtype={dtype.str}\n".encode("ascii")
    return header + arr.astype(dtype, copy=False).tobytes()


def decode_array(raw: bytes) -> np.ndarray:
    try:
        header, body = raw.split(b"\n", 1)
        fields_ = dict(part.split("=", 1) for part in header.decode("ascii").split())
        shape = tuple(int(n) for n in fields_["shape"].split(",") if n)
        dtype = np.dtype(fields_["dtype"])
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise DecodeError(f"Malformed array payload header: {e}")
    return np.frombuffer(body, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


@dataclass
class SampleRecord:
    key: str
    entries: Dict[str, bytes] = field(default_factory=dict)

    def __post_init__(self):
        if not self.key or "." in self.key or "/" in self.key:
            raise ShardError(f"Sample key '{self.key}' must be non-empty without '.' or '/'")


# =============================================================================
# WRITING
# =============================================================================

def _tar_info(name: str, size: int) -> tarfile.TarInfo:
    info = tarfile.TarInfo(name=name)
    info.size = size
    info.mtime = 0
    info.mode = 0o644
    info.uid = info.gid = 0
    info.uname = info.gname = ""
    return info


def write_shard(records: Sequence[SampleRecord], path) -> Path:
    path = Path(path)
    seen = set()
    with tarfile.open(path, "w", format=tarfile.USTAR_FORMAT) as tar:
        for rec in records:
            if rec.key in seen:
                raise ShardError(f"Duplicate sample key '{rec.key}' in shard {path.name}")
            seen.add(rec.key)
            for suffix, payload in rec.entries.items():
                tar.addfile(_tar_info(f"{rec.key}.{suffix}", len(payload)), io.BytesIO(payload))
    return path


def write_shards(records: Iterable[SampleRecord], shard_size: int, directory) -> List[Path]:
    """Pack records into consecutive shards of at most shard_size samples."""
    if shard_size < 1:
        raise ConfigError(f"shard_size must be >= 1, got {shard_size}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths, batch = [], []
    for rec in records:
        batch.append(rec)
        if len(batch) == shard_size:
            paths.append(write_shard(batch, directory / SHARD_PATTERN.format(len(paths))))
            logger.info(f"Wrote shard {paths[-1].name} ({len(batch)} samples)")
            batch = []
    if batch:
        paths.append(write_shard(batch, directory / SHARD_PATTERN.format(len(paths))))
        logger.info(f"Wrote shard {paths[-1].name} ({len(batch)} samples)")
    return paths


def list_shards(directory) -> List[Path]:
    return sorted(Path(directory).glob("shard-*.tar"))


# =============================================================================
# READING
# =============================================================================

def read_shard(path) -> Iterator[SampleRecord]:
    """Yield samples in stored order; entries of one sample must be contiguous."""
    current: Optional[SampleRecord] = None
    with tarfile.open(path, "r|") as tar:
        for member in tar:
            if not member.isfile():
                continue
            key, _, suffix = member.name.partition(".")
            payload = tar.extractfile(member).read()
            if current is not None and current.key != key:
                yield current
                current = None
            if current is None:
                current = SampleRecord(key)
            current.entries[suffix] = payload
    if current is not None:
        yield current


def _read_or_skip(path) -> Iterator[SampleRecord]:
    try:
        yield from read_shard(path)
    except (tarfile.TarError, OSError, ShardError) as e:
        logger.warning(f"Skipping unreadable shard {path}: {e}")


def resample_indices(n_shards: int, seed) -> Iterator[int]:
    """Infinite shard choices, uniformly with replacement."""
    if n_shards < 1:
        raise ShardError("Resample needs at least one shard")
    rng = np.random.default_rng(seed)
    while True:
        yield int(rng.integers(n_shards))


def stream_resample(shards: Sequence, seed) -> Iterator[SampleRecord]:
    """Infinite stream without epoch boundaries; unreadable shards are skipped."""
    shards = list(shards)
    bad = set()
    for idx in resample_indices(len(shards), seed):
        produced = False
        for rec in _read_or_skip(shards[idx]):
            produced = True
            yield rec
        if produced:
            bad.discard(idx)
        else:
            bad.add(idx)
            if len(bad) == len(shards):
                raise ShardError(f"None of the {len(shards)} shards is readable")


def epoch_once(shards: Sequence, seed) -> Iterator[SampleRecord]:
    """Each record exactly once: shard order permuted, in-shard order kept."""
    shards = list(shards)
    rng = np.random.default_rng(seed)
    for idx in rng.permutation(len(shards)):
        yield from _read_or_skip(shards[idx])


# =============================================================================
# MIXING
# =============================================================================

@dataclass
class MixSpec:
    sources: List[str]
    weights: List[float]

    def __post_init__(self):
        if len(self.sources) != len(self.weights):
            raise ConfigError("MixSpec sources and weights differ in length")
        _check_weights(self.weights)

    def probabilities(self) -> np.ndarray:
        w = np.asarray(self.weights, dtype=np.float64)
        return w / w.sum()


def _check_weights(weights):
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0 or np.any(w < 0) or not np.isfinite(w).all():
        raise ConfigError(f"Mixing weights must be finite and >= 0, got {list(weights)}")
    if w.sum() <= 0:
        raise ConfigError("Mixing weights are all zero")
    return w


def parse_mix(text: str) -> MixSpec:
    """'a=3,b=1' -> MixSpec(['a', 'b'], [3.0, 1.0])."""
    sources, weights = [], []
    for part in filter(None, (p.strip() for p in text.split(","))):
        name, sep, value = part.partition("=")
        if not sep:
            raise ConfigError(f"Bad mix entry '{part}', expected name=weight")
        try:
            weights.append(float(value))
        except ValueError:
            raise ConfigError(f"Bad mix weight in '{part}'")
        sources.append(name.strip())
    return MixSpec(sources, weights)


class RandomMix:
    """Draw a source by normalized weight, then pull one record from it."""

    def __init__(self, streams: Sequence[Iterator], weights: Sequence[float], seed):
        if len(streams) != len(weights):
            raise ConfigError(f"{len(streams)} streams but {len(weights)} weights")
        self.streams = [iter(s) for s in streams]
        self.rng = np.random.default_rng(seed)
        self.set_weights(weights)
        self.last_source = None

    def set_weights(self, weights):
        """Takes effect from the next draw."""
        w = _check_weights(weights)
        if w.size != len(self.streams):
            raise ConfigError(f"{len(self.streams)} streams but {w.size} weights")
        self.probs = w / w.sum()

    def __iter__(self):
        return self

    def __next__(self):
        self.last_source = int(self.rng.choice(len(self.streams), p=self.probs))
        return next(self.streams[self.last_source])

    def close(self):
        """Stops every underlying reader that can be stopped."""
        for stream in self.streams:
            close = getattr(stream, "close", None)
            if close is not None:
                close()


def random_mix(streams, spec: MixSpec, seed) -> RandomMix:
    return RandomMix(streams, spec.weights, seed)


# =============================================================================
# PREFETCH
# =============================================================================

_END = object()


class Prefetcher:
    """Background reader feeding a bounded queue; order is preserved."""

    def __init__(self, iterable: Iterable, maxsize: int = PREFETCH_DEFAULT):
        if maxsize < 1:
            raise ConfigError(f"prefetch size must be >= 1, got {maxsize}")
        self._queue = queue.Queue(maxsize=maxsize)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(iter(iterable),), daemon=True)
        self._thread.start()

    def _put(self, item) -> bool:
        """Blocks until queued or closed; False once closed."""
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self, it):
        try:
            for item in it:
                if not self._put(item):
                    return
            self._put(_END)
        except Exception as e:
            self._put(e)

    def __iter__(self):
        return self

    def __next__(self):
        item = self._queue.get()
        if item is _END:
            self._queue.put(_END)
            raise StopIteration
        if isinstance(item, Exception):
            raise item
        return item

    def close(self, timeout: float = 1.0):
        self._stop.set()
        self._thread.join(timeout)

    @property
    def running(self) -> bool:
        return self._thread.is_alive()


def build_mixed_stream(sources: Dict[str, Sequence], mix: MixSpec, seed, prefetch: int = PREFETCH_DEFAULT):
    """One prefetching Resample reader per named source, blended by mix weights."""
    missing = [name for name in mix.sources if name not in sources]
    if missing:
        raise ConfigError(f"Mix names unknown sources {missing}")
    streams = []
    for i, name in enumerate(mix.sources):
        stream = stream_resample(sources[name], seed=(seed, i))
        streams.append(Prefetcher(stream, prefetch) if prefetch else stream)
    return random_mix(streams, mix, seed)


# =============================================================================
# INSPECTION
# =============================================================================

def inspect_shards(paths: Sequence) -> pd.DataFrame:
    rows = []
    for path in paths:
        path = Path(path)
        n_samples, n_entries = 0, 0
        for rec in _read_or_skip(path):
            n_samples += 1
            n_entries += len(rec.entries)
        rows.append({"shard": path.name, "samples": n_samples, "entries": n_entries,
                     "bytes": path.stat().st_size if path.exists() else 0})
    return pd.DataFrame(rows, columns=["shard", "samples", "entries", "bytes"])

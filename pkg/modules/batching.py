"""
Minibatch sources for the trainers.

StreamSampler pulls records in order from a shard stream (Resample readers
behind a RandomMix, each behind a Prefetcher). ChunkSampler draws uniformly
from chunks held in memory and serves evaluation-sized sets and tests. Both
return normalized actions with their conditioning inputs.
"""

import logging
from typing import Dict, Iterator, Sequence, Union

import numpy as np

from core.errors import ConfigError, DimensionError, ShardError
from modules.datagen import NormStats, record_to_chunk, stack_chunks
from modules.shards import PREFETCH_DEFAULT, MixSpec, build_mixed_stream

logger = logging.getLogger(__name__)


class ChunkSampler:
    """Uniform minibatches from in-memory normalized chunks."""

    def __init__(self, actions, context, instruction):
        self.actions = np.asarray(actions, dtype=np.float64)
        self.context = np.asarray(context, dtype=np.float64)
        self.instruction = np.asarray(instruction, dtype=np.int64)
        if not (len(self.actions) == len(self.context) == len(self.instruction)):
            raise DimensionError("actions, context and instruction lengths differ")
        if len(self.actions) == 0:
            raise ConfigError("ChunkSampler needs at least one chunk")

    @classmethod
    def from_chunks(cls, chunks, norm: NormStats):
        arrays = stack_chunks(chunks)
        return cls(norm.normalize(arrays["actions"]), arrays["context"], arrays["instruction"])

    def __len__(self):
        return len(self.actions)

    def sample(self, rng, batch_size: int) -> dict:
        idx = rng.integers(0, len(self.actions), size=batch_size)
        return {"actions": self.actions[idx], "context": self.context[idx], "instruction": self.instruction[idx]}

    def skip(self, n_records: int):
        # draws come from the caller's generator, which a resume restores
        pass

    def close(self):
        pass


class StreamSampler:
    """Consecutive records of a shard stream grouped into minibatches."""

    def __init__(self, stream: Iterator, norm: NormStats):
        self.stream = stream
        self.norm = norm
        self.records_read = 0

    def _next_record(self):
        try:
            record = next(self.stream)
        except StopIteration:
            raise ShardError(f"Record stream ended after {self.records_read} records")
        self.records_read += 1
        return record

    def sample(self, rng, batch_size: int) -> dict:
        """rng is unused; the stream carries its own seeded order."""
        arrays = stack_chunks([record_to_chunk(self._next_record()) for _ in range(batch_size)])
        return {"actions": self.norm.normalize(arrays["actions"]), "context": arrays["context"],
                "instruction": arrays["instruction"]}

    def skip(self, n_records: int):
        """Fast-forward past records an earlier run already consumed."""
        for _ in range(n_records):
            self._next_record()
        if n_records:
            logger.info(f"Skipped {n_records} stream records")

    def close(self):
        close = getattr(self.stream, "close", None)
        if close is not None:
            close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


Sampler = Union[ChunkSampler, StreamSampler]


def open_stream_sampler(sources: Dict[str, Sequence], mix: MixSpec, norm: NormStats, seed,
                        prefetch: int = PREFETCH_DEFAULT) -> StreamSampler:
    return StreamSampler(build_mixed_stream(sources, mix, seed, prefetch), norm)


def draw_actions(source, rng, batch_size: int) -> np.ndarray:
    """A batch of normalized actions from an (N, T_a, d) array or a sampler."""
    if isinstance(source, np.ndarray):
        return source[rng.integers(0, len(source), size=batch_size)]
    return source.sample(rng, batch_size)["actions"]

"""Named, reproducible random streams and serializable generator state."""

from __future__ import annotations

import numpy as np

# stable stream ids so unrelated draws never share a sequence
STREAM_INIT = 1
STREAM_DATA = 2
STREAM_TRAIN = 3
STREAM_SAMPLE = 4
STREAM_EVAL = 5


def derive_rng(seed: int, *stream: int) -> np.random.Generator:
    """An independent generator for (seed, stream...), stable across runs."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))


def get_state(gen: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's position."""
    return gen.bit_generator.state


def set_state(gen: np.random.Generator, state: dict) -> None:
    gen.bit_generator.state = state


def restored_rng(state: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    set_state(gen, state)
    return gen

"""Deterministic, labeled random streams.

Every source of randomness in the package draws from a named PCG64 stream
derived from (seed, stream label), so two runs with the same seed consume
identical draw sequences regardless of which other streams exist.
"""
import numpy as np

_STREAMS = {
    "init": 0,
    "gen": 1,
    "pretrain": 2,
    "finetune": 3,
    "episodes": 4,
    "data": 5,
}


def make_rng(seed, stream):
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([int(seed), _STREAMS[stream]]))
    )


def rng_state(rng):
    """JSON-serializable snapshot of a generator's position."""
    return rng.bit_generator.state


def restore_rng(state):
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state
    return rng

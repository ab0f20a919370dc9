"""Derived random streams for reproducible simulations.

Every stochastic step in the framework draws from a stream derived from the
master seed plus a purpose tag (and, where relevant, a client id and round
number).  Streams are therefore independent of execution order: running
clients serially or in parallel consumes the same randomness.
"""

from __future__ import annotations

import zlib

import numpy as np


def _entropy(master_seed: int, purpose: str, client_id: int, round_num: int) -> list[int]:
    if master_seed < 0 or client_id < 0 or round_num < 0:
        raise ValueError("seed components must be non-negative")
    tag = zlib.crc32(purpose.encode("utf-8"))
    return [master_seed, tag, client_id, round_num]


def derive_rng(master_seed: int, purpose: str, client_id: int = 0,
               round_num: int = 0) -> np.random.Generator:
    """Generator for a (purpose, client, round) stream of the master seed."""
    return np.random.default_rng(
        np.random.SeedSequence(_entropy(master_seed, purpose, client_id, round_num))
    )


def derive_seed(master_seed: int, purpose: str, client_id: int = 0,
                round_num: int = 0) -> int:
    """Integer seed for APIs that take a seed rather than a Generator."""
    ss = np.random.SeedSequence(_entropy(master_seed, purpose, client_id, round_num))
    return int(ss.generate_state(1, dtype=np.uint32)[0])

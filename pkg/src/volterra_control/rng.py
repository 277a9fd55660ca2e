"""Counter-based random streams for reproducible parallel Monte Carlo.

Each simulated path owns a Philox stream keyed by (seed, path index), so
the noise a path sees is independent of how paths are partitioned across
workers, and disjoint seed namespaces can be derived from string labels
without coordination.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, label: str) -> int:
    """Deterministic 63-bit sub-seed for an independent stream namespace."""
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def path_generator(seed: int, path_index: int) -> np.random.Generator:
    """Philox generator owned by one path; bitwise stable across workers."""
    key = np.array([np.uint64(int(seed) & (2**64 - 1)), np.uint64(path_index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def brownian_increments(
    seed: int, path_indices: np.ndarray, steps: int, noise_dim: int, dt: float
) -> np.ndarray:
    """Increments of shape (len(path_indices), steps, noise_dim), variance dt.

    Each path draws from its own stream in a fixed order, so a longer
    horizon extends the noise of a shorter one rather than reshuffling it.
    """
    out = np.empty((len(path_indices), steps, noise_dim))
    root = np.sqrt(dt)
    for row, idx in enumerate(path_indices):
        gen = path_generator(seed, int(idx))
        out[row] = root * gen.standard_normal((steps, noise_dim))
    return out
